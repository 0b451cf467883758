/**
 * SVG band chart: observed CGM, replay median, 5-95% uncertainty band and
 * the 70/180 mg/dL hypo/hyper guide lines. Pure rendering: every y value is
 * a verbatim service response or the pasted observation, never recomputed.
 */

import type { SimulateResponse } from './api.js';

export interface ChartSeries {
  t: number[];
  observed: number[] | null; // on the 5-min observation grid starting at 0
  median: number[];
  q05: number[];
  q95: number[];
  hypoLine: number;
  hyperLine: number;
}

export const CHART_STYLE = {
  width: 860,
  height: 320,
  margin: { top: 12, right: 16, bottom: 28, left: 44 },
  band: '#9ecae9',
  median: '#1f77b4',
  observed: '#222222',
  guide: '#d62728',
};

export function buildSeries(
  sim: SimulateResponse,
  observed: number[] | null,
): ChartSeries {
  const n = sim.t.length;
  if (sim.median.length !== n || sim.q05.length !== n || sim.q95.length !== n) {
    throw new Error('simulate response arrays have mismatched lengths');
  }
  return {
    t: sim.t,
    observed,
    median: sim.median,
    q05: sim.q05,
    q95: sim.q95,
    hypoLine: 70,
    hyperLine: 180,
  };
}

interface Scale {
  x(t: number): number;
  y(v: number): number;
  tMax: number;
  yMin: number;
  yMax: number;
}

function makeScale(series: ChartSeries): Scale {
  const { width, height, margin } = CHART_STYLE;
  const tMax = series.t[series.t.length - 1] ?? 1;
  const all = [
    ...series.q05,
    ...series.q95,
    ...(series.observed ?? []),
    series.hypoLine,
    series.hyperLine,
  ];
  const yMin = Math.min(...all) - 10;
  const yMax = Math.max(...all) + 10;
  return {
    x: (t) => margin.left + (t / tMax) * (width - margin.left - margin.right),
    y: (v) =>
      height - margin.bottom - ((v - yMin) / (yMax - yMin)) * (height - margin.top - margin.bottom),
    tMax,
    yMin,
    yMax,
  };
}

function pathOf(ts: number[], vs: number[], s: Scale): string {
  return vs
    .map((v, i) => `${i === 0 ? 'M' : 'L'}${s.x(ts[i]!).toFixed(2)},${s.y(v).toFixed(2)}`)
    .join(' ');
}

/** Render the chart into `host`, replacing any previous chart. */
export function renderChart(host: HTMLElement, series: ChartSeries): SVGSVGElement {
  const doc = host.ownerDocument;
  const NS = 'http://www.w3.org/2000/svg';
  const scale = makeScale(series);
  const svg = doc.createElementNS(NS, 'svg') as SVGSVGElement;
  svg.setAttribute('viewBox', `0 0 ${CHART_STYLE.width} ${CHART_STYLE.height}`);
  svg.setAttribute('width', String(CHART_STYLE.width));
  svg.setAttribute('data-role', 'cgm-chart');

  // uncertainty band: q95 forward then q05 backward
  const forward = series.t.map(
    (t, i) => `${scale.x(t).toFixed(2)},${scale.y(series.q95[i]!).toFixed(2)}`,
  );
  const backward = [...series.t.keys()]
    .reverse()
    .map((i) => `${scale.x(series.t[i]!).toFixed(2)},${scale.y(series.q05[i]!).toFixed(2)}`);
  const band = doc.createElementNS(NS, 'polygon');
  band.setAttribute('points', [...forward, ...backward].join(' '));
  band.setAttribute('fill', CHART_STYLE.band);
  band.setAttribute('opacity', '0.55');
  band.setAttribute('data-role', 'band');
  svg.appendChild(band);

  for (const [value, role] of [
    [series.hypoLine, 'guide-hypo'],
    [series.hyperLine, 'guide-hyper'],
  ] as const) {
    const line = doc.createElementNS(NS, 'line');
    line.setAttribute('x1', String(scale.x(0)));
    line.setAttribute('x2', String(scale.x(scale.tMax)));
    line.setAttribute('y1', String(scale.y(value)));
    line.setAttribute('y2', String(scale.y(value)));
    line.setAttribute('stroke', CHART_STYLE.guide);
    line.setAttribute('stroke-dasharray', '4 4');
    line.setAttribute('data-role', role);
    svg.appendChild(line);
  }

  const median = doc.createElementNS(NS, 'path');
  median.setAttribute('d', pathOf(series.t, series.median, scale));
  median.setAttribute('fill', 'none');
  median.setAttribute('stroke', CHART_STYLE.median);
  median.setAttribute('stroke-width', '2');
  median.setAttribute('data-role', 'median');
  svg.appendChild(median);

  if (series.observed) {
    const obsT = series.observed.map((_, i) => i * 5);
    const obs = doc.createElementNS(NS, 'path');
    obs.setAttribute('d', pathOf(obsT, series.observed, scale));
    obs.setAttribute('fill', 'none');
    obs.setAttribute('stroke', CHART_STYLE.observed);
    obs.setAttribute('stroke-width', '1.2');
    obs.setAttribute('data-role', 'observed');
    svg.appendChild(obs);
  }

  const xLabel = doc.createElementNS(NS, 'text');
  xLabel.setAttribute('x', String(CHART_STYLE.width / 2));
  xLabel.setAttribute('y', String(CHART_STYLE.height - 6));
  xLabel.setAttribute('text-anchor', 'middle');
  xLabel.setAttribute('font-size', '11');
  xLabel.textContent = `time (min, 0 to ${scale.tMax})`;
  svg.appendChild(xLabel);

  host.replaceChildren(svg);
  return svg;
}

/** Median value at the grid point closest to `t_min` (for tests/tooltips). */
export function medianAt(series: ChartSeries, t_min: number): number {
  let best = 0;
  let bestDist = Infinity;
  series.t.forEach((t, i) => {
    const d = Math.abs(t - t_min);
    if (d < bestDist) {
      bestDist = d;
      best = i;
    }
  });
  return series.median[best]!;
}
