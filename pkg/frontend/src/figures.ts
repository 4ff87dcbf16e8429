/** Figure models and SVG rendering for the three report kinds:
 *  regret-vs-misspec lines with error bands, stacked nominator/ranker regret
 *  proportions, and precision/recall@K bars.
 */

import { Table, num, requireColumns } from "./csv.js";
import { LinearScale, PALETTE, el, escapeText, fmt, polylinePoints } from "./svg.js";

export type FigureKind = "regret-vs-misspec" | "regret-decomposition" | "moe-bars";

export interface LinePoint {
  x: number;
  y: number;
  half: number; // half-width of the error band (2 standard errors)
}

export interface LineSeries {
  label: string;
  points: LinePoint[];
}

export interface StackPoint {
  x: number;
  fractions: number[]; // one share per band; sums to 1
}

export interface Bar {
  label: string;
  value: number;
  half: number;
}

export interface Panel {
  title: string;
  lines?: LineSeries[];
  stack?: { bandLabels: string[]; points: StackPoint[] };
  bars?: { groups: string[]; perGroup: Bar[][] };
}

export interface FigureModel {
  kind: FigureKind;
  xLabel: string;
  yLabel: string;
  panels: Panel[];
}

const AGENT_LETTER: Record<string, string> = {
  ucb: "U",
  greedy: "G",
  pg: "PG",
  uniform: "Rand",
};

function systemLabel(row: Record<string, string>): string {
  const ranker = AGENT_LETTER[row["ranker"]] ?? row["ranker"];
  if (row["stages"] === "single-stage") return ranker;
  const nominator = AGENT_LETTER[row["nominator"]] ?? row["nominator"];
  return `${ranker}+${nominator}`;
}

function facetValues(table: Table, facet: string | undefined): string[] {
  if (!facet) return ["all"];
  const seen: string[] = [];
  for (const row of table.rows) {
    const v = row[facet];
    if (!seen.includes(v)) seen.push(v);
  }
  return seen.sort();
}

function rowsOf(table: Table, facet: string | undefined, value: string) {
  return facet ? table.rows.filter((r) => r[facet] === value) : table.rows;
}

function xValue(row: Record<string, string>, xMode: string): number {
  if (xMode === "ratio") return num(row, "d") / num(row, "s");
  return num(row, xMode);
}

export function buildRegretFigure(
  table: Table,
  opts: { facet?: string; x?: string } = {},
): FigureModel {
  const xMode = opts.x ?? "ratio";
  const needed = ["stages", "ranker", "nominator", "regret_2s_mean", "regret_2s_se2"];
  if (xMode === "ratio") needed.push("d", "s");
  else needed.push(xMode);
  if (opts.facet) needed.push(opts.facet);
  requireColumns(table, needed);
  const panels = facetValues(table, opts.facet).map((value) => {
    const rows = rowsOf(table, opts.facet, value);
    const byLabel = new Map<string, LinePoint[]>();
    for (const row of rows) {
      const label = systemLabel(row);
      if (!byLabel.has(label)) byLabel.set(label, []);
      byLabel.get(label)!.push({
        x: xValue(row, xMode),
        y: num(row, "regret_2s_mean"),
        half: num(row, "regret_2s_se2"),
      });
    }
    const lines = [...byLabel.entries()]
      .sort(([a], [b]) => a.localeCompare(b))
      .map(([label, points]) => ({
        label,
        points: points.sort((p, q) => p.x - q.x),
      }));
    return { title: opts.facet ? `${opts.facet}=${value}` : "", lines };
  });
  return {
    kind: "regret-vs-misspec",
    xLabel: xMode === "ratio" ? "d / s" : xMode,
    yLabel: "mean regret (band: 2 SE)",
    panels,
  };
}

export function buildDecompositionFigure(
  table: Table,
  opts: { facet?: string; x?: string } = {},
): FigureModel {
  const xMode = opts.x ?? "ratio";
  const needed = ["stages", "ranker", "nominator", "regret_nom_mean", "regret_rank_mean"];
  if (xMode === "ratio") needed.push("d", "s");
  else needed.push(xMode);
  if (opts.facet) needed.push(opts.facet);
  requireColumns(table, needed);
  // One stacked panel per (facet x system); the two bands split the
  // two-stage regret into its nominator and ranker shares.
  const panels: Panel[] = [];
  for (const value of facetValues(table, opts.facet)) {
    const rows = rowsOf(table, opts.facet, value);
    const bySystem = new Map<string, StackPoint[]>();
    for (const row of rows) {
      const label = systemLabel(row);
      const nom = num(row, "regret_nom_mean");
      const rank = num(row, "regret_rank_mean");
      const total = nom + rank;
      const fractions = total === 0 ? [1, 0] : [nom / total, rank / total];
      if (!bySystem.has(label)) bySystem.set(label, []);
      bySystem.get(label)!.push({ x: xValue(row, xMode), fractions });
    }
    for (const [label, points] of [...bySystem.entries()].sort(([a], [b]) => a.localeCompare(b))) {
      const prefix = opts.facet ? `${opts.facet}=${value} ` : "";
      panels.push({
        title: `${prefix}${label}`,
        stack: {
          bandLabels: ["nominator share", "ranker share"],
          points: points.sort((p, q) => p.x - q.x),
        },
      });
    }
  }
  return {
    kind: "regret-decomposition",
    xLabel: xMode === "ratio" ? "d / s" : xMode,
    yLabel: "share of two-stage regret",
    panels,
  };
}

export function buildMoeBarsFigure(
  table: Table,
  opts: { facet?: string } = {},
): FigureModel {
  const needed = ["model", "seed", "precision_at_5", "recall_at_5"];
  if (opts.facet) needed.push(opts.facet);
  requireColumns(table, needed);
  const metrics: Array<["precision_at_5" | "recall_at_5", string]> = [
    ["precision_at_5", "precision@5"],
    ["recall_at_5", "recall@5"],
  ];
  const panels = facetValues(table, opts.facet).map((value) => {
    const rows = rowsOf(table, opts.facet, value);
    const models = [...new Set(rows.map((r) => r["model"]))].sort();
    const perGroup = metrics.map(([column]) =>
      models.map((model) => {
        const vals = rows.filter((r) => r["model"] === model).map((r) => num(r, column));
        const mean = vals.reduce((a, b) => a + b, 0) / vals.length;
        let half = 0;
        if (vals.length > 1) {
          const sd = Math.sqrt(
            vals.reduce((a, b) => a + (b - mean) ** 2, 0) / (vals.length - 1),
          );
          half = (2 * sd) / Math.sqrt(vals.length);
        }
        return { label: model, value: mean, half };
      }),
    );
    return {
      title: opts.facet ? `${opts.facet}=${value}` : "",
      bars: { groups: metrics.map(([, label]) => label), perGroup },
    };
  });
  return { kind: "moe-bars", xLabel: "", yLabel: "mean over seeds (whisker: 2 SE)", panels };
}

// ---------------------------------------------------------------------------
// Rendering

const PANEL_W = 320;
const PANEL_H = 240;
const MARGIN = { top: 34, right: 16, bottom: 44, left: 56 };
const PER_ROW = 3;

export function renderFigure(model: FigureModel): string {
  const n = model.panels.length;
  const cols = Math.min(PER_ROW, Math.max(n, 1));
  const rows = Math.ceil(n / cols);
  const width = cols * PANEL_W;
  const height = rows * PANEL_H + 24;
  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `viewBox="0 0 ${width} ${height}" font-family="Helvetica,Arial,sans-serif" font-size="11">`,
  );
  parts.push(el("rect", { x: 0, y: 0, width, height, fill: "#ffffff" }));
  model.panels.forEach((panel, i) => {
    const ox = (i % cols) * PANEL_W;
    const oy = Math.floor(i / cols) * PANEL_H;
    parts.push(`<g class="facet" transform="translate(${ox},${oy})">`);
    parts.push(renderPanel(panel, model));
    parts.push("</g>");
  });
  parts.push(
    el(
      "text",
      { x: width / 2, y: height - 6, "text-anchor": "middle", class: "x-label" },
      escapeText(model.xLabel),
    ),
  );
  parts.push("</svg>");
  return parts.join("\n");
}

function plotArea(): { x0: number; x1: number; y0: number; y1: number } {
  return {
    x0: MARGIN.left,
    x1: PANEL_W - MARGIN.right,
    y0: PANEL_H - MARGIN.bottom,
    y1: MARGIN.top,
  };
}

function axes(xs: LinearScale, ys: LinearScale, title: string, yLabel: string): string {
  const a = plotArea();
  const parts: string[] = [];
  parts.push(
    el("rect", {
      x: a.x0,
      y: a.y1,
      width: a.x1 - a.x0,
      height: a.y0 - a.y1,
      fill: "none",
      stroke: "#888888",
      "stroke-width": 1,
    }),
  );
  for (const t of xs.ticks()) {
    const px = xs.map(t);
    parts.push(el("line", { x1: fmt(px), y1: a.y0, x2: fmt(px), y2: a.y0 + 4, stroke: "#888888" }));
    parts.push(
      el("text", { x: fmt(px), y: a.y0 + 16, "text-anchor": "middle" }, escapeText(fmt(t))),
    );
  }
  for (const t of ys.ticks()) {
    const py = ys.map(t);
    parts.push(el("line", { x1: a.x0 - 4, y1: fmt(py), x2: a.x0, y2: fmt(py), stroke: "#888888" }));
    parts.push(
      el(
        "text",
        { x: a.x0 - 7, y: fmt(py + 3.5), "text-anchor": "end" },
        escapeText(fmt(t)),
      ),
    );
  }
  if (title) {
    parts.push(
      el(
        "text",
        { x: PANEL_W / 2, y: 16, "text-anchor": "middle", "font-weight": "bold" },
        escapeText(title),
      ),
    );
  }
  parts.push(
    el(
      "text",
      {
        x: 14,
        y: (a.y0 + a.y1) / 2,
        "text-anchor": "middle",
        transform: `rotate(-90 14 ${(a.y0 + a.y1) / 2})`,
        class: "y-label",
      },
      escapeText(yLabel),
    ),
  );
  return parts.join("\n");
}

function renderPanel(panel: Panel, model: FigureModel): string {
  if (panel.lines) return renderLines(panel, model);
  if (panel.stack) return renderStack(panel, model);
  if (panel.bars) return renderBars(panel, model);
  throw new Error("empty panel");
}

function renderLines(panel: Panel, model: FigureModel): string {
  const a = plotArea();
  const lines = panel.lines!;
  const xsAll = lines.flatMap((s) => s.points.map((p) => p.x));
  const ysLow = lines.flatMap((s) => s.points.map((p) => p.y - p.half));
  const ysHigh = lines.flatMap((s) => s.points.map((p) => p.y + p.half));
  const xs = new LinearScale(Math.min(...xsAll), Math.max(...xsAll), a.x0, a.x1);
  const ys = new LinearScale(Math.min(0, ...ysLow), Math.max(...ysHigh), a.y0, a.y1);
  const parts = [axes(xs, ys, panel.title, model.yLabel)];
  lines.forEach((series, i) => {
    const color = PALETTE[i % PALETTE.length];
    const band = series.points
      .map((p) => [xs.map(p.x), ys.map(p.y + p.half)] as [number, number])
      .concat(
        [...series.points]
          .reverse()
          .map((p) => [xs.map(p.x), ys.map(p.y - p.half)] as [number, number]),
      );
    parts.push(
      el("polygon", {
        class: "error-band",
        points: polylinePoints(band),
        fill: color,
        "fill-opacity": 0.18,
        stroke: "none",
      }),
    );
    parts.push(
      el("polyline", {
        class: "series",
        points: polylinePoints(series.points.map((p) => [xs.map(p.x), ys.map(p.y)])),
        fill: "none",
        stroke: color,
        "stroke-width": 1.6,
      }),
    );
    parts.push(
      el(
        "text",
        {
          x: a.x1 - 4,
          y: a.y1 + 13 + 13 * i,
          "text-anchor": "end",
          fill: color,
          class: "legend",
        },
        escapeText(series.label),
      ),
    );
  });
  return parts.join("\n");
}

function renderStack(panel: Panel, model: FigureModel): string {
  const a = plotArea();
  const stack = panel.stack!;
  const xsAll = stack.points.map((p) => p.x);
  const xs = new LinearScale(Math.min(...xsAll), Math.max(...xsAll), a.x0, a.x1);
  const ys = new LinearScale(0, 1, a.y0, a.y1);
  const parts = [axes(xs, ys, panel.title, model.yLabel)];
  let base = stack.points.map(() => 0);
  stack.bandLabels.forEach((label, b) => {
    const top = stack.points.map((p, i) => base[i] + p.fractions[b]);
    const color = PALETTE[b % PALETTE.length];
    const poly = stack.points
      .map((p, i) => [xs.map(p.x), ys.map(top[i])] as [number, number])
      .concat(
        [...stack.points]
          .map((p, i) => [xs.map(p.x), ys.map(base[i])] as [number, number])
          .reverse(),
      );
    parts.push(
      el("polygon", {
        class: "stack-band",
        "data-band": label,
        points: polylinePoints(poly),
        fill: color,
        "fill-opacity": 0.75,
        stroke: "#ffffff",
        "stroke-width": 0.5,
      }),
    );
    parts.push(
      el(
        "text",
        { x: a.x0 + 6, y: a.y1 + 13 + 13 * b, fill: color, class: "legend" },
        escapeText(label),
      ),
    );
    base = top;
  });
  return parts.join("\n");
}

function renderBars(panel: Panel, model: FigureModel): string {
  const a = plotArea();
  const bars = panel.bars!;
  const flat = bars.perGroup.flat();
  const top = Math.max(...flat.map((b) => b.value + b.half), 0.01);
  const ys = new LinearScale(0, top * 1.05, a.y0, a.y1);
  const groups = bars.groups.length;
  const perGroup = bars.perGroup[0]?.length ?? 0;
  const groupWidth = (a.x1 - a.x0) / groups;
  const barWidth = (groupWidth * 0.8) / Math.max(perGroup, 1);
  const parts = [
    axes(new LinearScale(0, groups, a.x0, a.x1), ys, panel.title, model.yLabel),
  ];
  bars.perGroup.forEach((group, g) => {
    group.forEach((bar, i) => {
      const x = a.x0 + g * groupWidth + groupWidth * 0.1 + i * barWidth;
      const y = ys.map(bar.value);
      const color = PALETTE[i % PALETTE.length];
      parts.push(
        el("rect", {
          class: "bar",
          "data-model": bar.label,
          x: fmt(x),
          y: fmt(y),
          width: fmt(barWidth * 0.92),
          height: fmt(a.y0 - y),
          fill: color,
        }),
      );
      const cx = x + (barWidth * 0.92) / 2;
      if (bar.half > 0) {
        parts.push(
          el("line", {
            class: "whisker",
            x1: fmt(cx),
            y1: fmt(ys.map(bar.value - bar.half)),
            x2: fmt(cx),
            y2: fmt(ys.map(bar.value + bar.half)),
            stroke: "#222222",
            "stroke-width": 1.2,
          }),
        );
      }
    });
    parts.push(
      el(
        "text",
        {
          x: fmt(a.x0 + (g + 0.5) * groupWidth),
          y: a.y0 + 16,
          "text-anchor": "middle",
        },
        escapeText(bars.groups[g]),
      ),
    );
  });
  bars.perGroup[0]?.forEach((bar, i) => {
    parts.push(
      el(
        "text",
        {
          x: a.x1 - 4,
          y: a.y1 + 13 + 13 * i,
          "text-anchor": "end",
          fill: PALETTE[i % PALETTE.length],
          class: "legend",
        },
        escapeText(bar.label),
      ),
    );
  });
  return parts.join("\n");
}

export function buildFigure(
  kind: FigureKind,
  table: Table,
  opts: { facet?: string; x?: string } = {},
): FigureModel {
  switch (kind) {
    case "regret-vs-misspec":
      return buildRegretFigure(table, opts);
    case "regret-decomposition":
      return buildDecompositionFigure(table, opts);
    case "moe-bars":
      return buildMoeBarsFigure(table, opts);
    default:
      throw new Error(`unknown figure kind: ${kind}`);
  }
}
