/**
 * CGM trace parsing: the core's `t_min,value` CSV format, pasted or uploaded.
 */

export const EXPECTED_POINTS = 264;

export function parseCgmCsv(text: string): number[] {
  const lines = text
    .split(/\r?\n/)
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
  if (lines.length === 0) throw new Error('empty CGM input');
  let start = 0;
  if (lines[0]!.toLowerCase().startsWith('t_min')) start = 1;
  const values: number[] = [];
  for (const line of lines.slice(start)) {
    const cells = line.split(',');
    const raw = cells.length >= 2 ? cells[1] : cells[0];
    const v = Number(raw);
    if (!Number.isFinite(v)) throw new Error(`not a number: "${raw}"`);
    values.push(v);
  }
  if (values.length !== EXPECTED_POINTS) {
    throw new Error(
      `expected ${EXPECTED_POINTS} CGM readings (22 h at 5 min), got ${values.length}`,
    );
  }
  return values;
}
