/** Minimal deterministic SVG construction: fixed palette, fixed layout,
 *  no timestamps or randomness, so identical inputs give identical bytes. */

export const PALETTE = [
  "#4477aa",
  "#ee6677",
  "#228833",
  "#ccbb44",
  "#66ccee",
  "#aa3377",
  "#bbbbbb",
  "#222222",
];

export function fmt(value: number): string {
  if (!Number.isFinite(value)) return "0";
  const rounded = Number(value.toPrecision(6));
  return Object.is(rounded, -0) ? "0" : String(rounded);
}

export class LinearScale {
  constructor(
    readonly d0: number,
    readonly d1: number,
    readonly r0: number,
    readonly r1: number,
  ) {}

  map(v: number): number {
    const span = this.d1 - this.d0;
    const t = span === 0 ? 0.5 : (v - this.d0) / span;
    return this.r0 + t * (this.r1 - this.r0);
  }

  ticks(count = 5): number[] {
    const span = this.d1 - this.d0;
    if (span === 0) return [this.d0];
    const step = niceStep(span / count);
    const start = Math.ceil(this.d0 / step) * step;
    const out: number[] = [];
    for (let v = start; v <= this.d1 + 1e-9; v += step) {
      out.push(Number(v.toPrecision(12)));
    }
    return out;
  }
}

function niceStep(raw: number): number {
  const mag = Math.pow(10, Math.floor(Math.log10(raw)));
  const norm = raw / mag;
  if (norm < 1.5) return mag;
  if (norm < 3.5) return 2 * mag;
  if (norm < 7.5) return 5 * mag;
  return 10 * mag;
}

export function el(tag: string, attrs: Record<string, string | number>, body = ""): string {
  const rendered = Object.entries(attrs)
    .map(([k, v]) => `${k}="${v}"`)
    .join(" ");
  return body === "" && tag !== "text"
    ? `<${tag} ${rendered}/>`
    : `<${tag} ${rendered}>${body}</${tag}>`;
}

export function escapeText(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function polylinePoints(pts: Array<[number, number]>): string {
  return pts.map(([x, y]) => `${fmt(x)},${fmt(y)}`).join(" ");
}
