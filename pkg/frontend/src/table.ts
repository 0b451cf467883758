/**
 * Parameter summary table: median and central 95% interval for each of the
 * 17 inferred quantities, rendered exactly as returned by /infer.
 */

import type { InferResponse } from './api.js';

export const PARAM_ORDER = [
  'Gb', 'SG', 'p2', 'ka2', 'kd', 'kempt', 'SI', 'kabs',
  'G0', 'Isc1_0', 'Isc2_0', 'Ip_0', 'Qsto1_0', 'Qsto2_0', 'Qgut_0', 'X_0', 'IG_0',
] as const;

const LABELS: Record<string, string> = {
  Gb: 'basal glucose (mg/dL)',
  SG: 'glucose effectiveness (1/min)',
  p2: 'insulin action decay (1/min)',
  ka2: 'plasma absorption rate (1/min)',
  kd: 'insulin transition rate (1/min)',
  kempt: 'gastric emptying rate (1/min)',
  SI: 'insulin sensitivity (mL/uU/min)',
  kabs: 'intestinal absorption (1/min)',
  G0: 'initial plasma glucose (mg/dL)',
  Isc1_0: 'initial sc insulin 1 (uU/mL)',
  Isc2_0: 'initial sc insulin 2 (uU/mL)',
  Ip_0: 'initial plasma insulin (uU/mL)',
  Qsto1_0: 'initial stomach solid (mg/kg)',
  Qsto2_0: 'initial stomach liquid (mg/kg)',
  Qgut_0: 'initial gut glucose (mg/kg)',
  X_0: 'initial insulin action (1/min)',
  IG_0: 'initial interstitial glucose (mg/dL)',
};

function fmt(v: number): string {
  if (v === 0) return '0';
  const mag = Math.abs(v);
  if (mag >= 100) return v.toFixed(1);
  if (mag >= 1) return v.toFixed(2);
  return v.toPrecision(3);
}

export function renderParamTable(host: HTMLElement, response: InferResponse): void {
  const doc = host.ownerDocument;
  const table = doc.createElement('table');
  table.dataset.role = 'param-table';
  const head = table.createTHead().insertRow();
  for (const text of ['parameter', 'median', '95% interval']) {
    const th = doc.createElement('th');
    th.textContent = text;
    head.appendChild(th);
  }
  const body = table.createTBody();
  for (const name of PARAM_ORDER) {
    const row = response.summary[name];
    if (!row) continue;
    const tr = body.insertRow();
    tr.dataset.param = name;
    tr.insertCell().textContent = LABELS[name] ?? name;
    const med = tr.insertCell();
    med.textContent = fmt(row.median);
    med.dataset.role = 'median';
    tr.insertCell().textContent = `[${fmt(row['q2.5'])}, ${fmt(row['q97.5'])}]`;
  }
  host.replaceChildren(table);
}
