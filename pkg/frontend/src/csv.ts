/** Strict CSV reading for the experiment summary schemas (UTF-8, header row,
 *  '.' decimals, no quoting needed). */

export interface Table {
  columns: string[];
  rows: Record<string, string>[];
}

export function parseCsv(text: string): Table {
  const lines = text.split(/\r?\n/).filter((line) => line.length > 0);
  if (lines.length === 0) {
    throw new Error("empty CSV");
  }
  const columns = lines[0].split(",");
  const rows = lines.slice(1).map((line, i) => {
    const cells = line.split(",");
    if (cells.length !== columns.length) {
      throw new Error(`row ${i + 2}: expected ${columns.length} cells, got ${cells.length}`);
    }
    const row: Record<string, string> = {};
    columns.forEach((c, j) => (row[c] = cells[j]));
    return row;
  });
  return { columns, rows };
}

export function requireColumns(table: Table, needed: string[]): void {
  const missing = needed.filter((c) => !table.columns.includes(c));
  if (missing.length > 0) {
    throw new Error(`missing columns: ${missing.join(", ")}`);
  }
}

export function num(row: Record<string, string>, column: string): number {
  const value = Number(row[column]);
  if (!Number.isFinite(value)) {
    throw new Error(`non-numeric value ${JSON.stringify(row[column])} in column ${column}`);
  }
  return value;
}
