#!/usr/bin/env node
/** tsplot --kind K --in CSV... --out FIG.svg [--facet COL] [--x COL|ratio] */

import { readFileSync, writeFileSync } from "node:fs";
import { parseCsv, Table } from "./csv.js";
import { buildFigure, FigureKind, renderFigure } from "./figures.js";

const KINDS: FigureKind[] = ["regret-vs-misspec", "regret-decomposition", "moe-bars"];

interface Args {
  kind: FigureKind;
  inputs: string[];
  out: string;
  facet?: string;
  x?: string;
}

export function parseArgs(argv: string[]): Args {
  let kind: string | undefined;
  const inputs: string[] = [];
  let out: string | undefined;
  let facet: string | undefined;
  let x: string | undefined;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) throw new Error(`${arg} needs a value`);
      return argv[++i];
    };
    if (arg === "--kind") kind = next();
    else if (arg === "--in") {
      inputs.push(next());
      while (i + 1 < argv.length && !argv[i + 1].startsWith("--")) inputs.push(argv[++i]);
    } else if (arg === "--out") out = next();
    else if (arg === "--facet") facet = next();
    else if (arg === "--x") x = next();
    else throw new Error(`unknown argument: ${arg}`);
  }
  if (!kind || !KINDS.includes(kind as FigureKind)) {
    throw new Error(`--kind must be one of ${KINDS.join(", ")}`);
  }
  if (inputs.length === 0) throw new Error("--in requires at least one CSV path");
  if (!out) throw new Error("--out is required");
  return { kind: kind as FigureKind, inputs, out, facet, x };
}

export function mergeTables(tables: Table[]): Table {
  const [first, ...rest] = tables;
  for (const t of rest) {
    if (t.columns.join(",") !== first.columns.join(",")) {
      throw new Error("input CSVs have differing columns");
    }
  }
  return { columns: first.columns, rows: tables.flatMap((t) => t.rows) };
}

export function run(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`usage error: ${(err as Error).message}`);
    return 2;
  }
  try {
    const tables = args.inputs.map((path) => parseCsv(readFileSync(path, "utf-8")));
    const model = buildFigure(args.kind, mergeTables(tables), {
      facet: args.facet,
      x: args.x,
    });
    writeFileSync(args.out, renderFigure(model));
    console.log(`wrote ${args.out} (${model.panels.length} facets)`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("cli.js") || entry.endsWith("tsplot")) {
  process.exit(run(process.argv.slice(2)));
}
