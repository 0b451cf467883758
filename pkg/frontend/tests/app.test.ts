/**
 * Interaction tests: inference -> table, edit -> simulate -> chart redraw,
 * request superseding, expired-posterior recovery. All service traffic is
 * served from recorded fixtures.
 */

import { describe, expect, it } from 'vitest';

import type { InferResponse, ScenarioJson, SimulateResponse } from '../src/api.js';
import { TwinClient } from '../src/api.js';
import { createApp, refreshSimulation } from '../src/app.js';
import { importScenario } from '../src/scenario.js';
import { fakeFetch, fixture, fixtureText } from './helpers.js';

const canonical = fixture<ScenarioJson>('scenario_canonical.json');
const inferResponse = fixture<InferResponse>('infer_response.json');
const simulateBase = fixture<SimulateResponse>('simulate_base.json');
const simulateDouble = fixture<SimulateResponse>('simulate_double_dinner.json');
const simulateNextDay = fixture<SimulateResponse>('simulate_next_day.json');
const simulateNoMeals = fixture<SimulateResponse>('simulate_no_meals.json');
const cgmCsv = fixtureText('cgm_trace.csv');

function appWith(routes: Parameters<typeof fakeFetch>[0]) {
  const { fn, calls } = fakeFetch(routes);
  const root = document.createElement('div');
  document.body.replaceChildren(root);
  const state = createApp(root, new TwinClient('http://svc', fn), importScenario(canonical));
  return { root, state, calls };
}

const q = (root: HTMLElement, role: string) =>
  root.querySelector(`[data-role="${role}"]`) as HTMLElement;

async function settle() {
  await new Promise((r) => setTimeout(r, 0));
  await new Promise((r) => setTimeout(r, 0));
}

describe('inference flow', () => {
  it('renders table and chart after paste + infer', async () => {
    const { root, state } = appWith({
      'POST /infer': () => ({ status: 200, body: inferResponse }),
      'POST /simulate': () => ({ status: 200, body: simulateBase }),
    });
    (q(root, 'cgm-input') as HTMLTextAreaElement).value = cgmCsv;
    q(root, 'infer-btn').click();
    await settle();
    expect(state.posteriorId).toBe(inferResponse.posterior_id);
    expect(root.querySelectorAll('[data-role="param-table"] tbody tr')).toHaveLength(17);
    expect(root.querySelector('[data-role="cgm-chart"]')).toBeTruthy();
  });

  it('uploading a CSV file fills the paste box', async () => {
    const { root } = appWith({});
    const input = q(root, 'cgm-file') as HTMLInputElement;
    const file = new File([cgmCsv], 'trace.csv', { type: 'text/csv' });
    Object.defineProperty(input, 'files', { value: [file] });
    input.dispatchEvent(new Event('change'));
    await new Promise((r) => setTimeout(r, 10));
    expect((q(root, 'cgm-input') as HTMLTextAreaElement).value).toBe(cgmCsv);
  });

  it('validates trace length locally before any request', async () => {
    const { root, calls } = appWith({});
    (q(root, 'cgm-input') as HTMLTextAreaElement).value = 't_min,value\n0,120\n5,121';
    q(root, 'infer-btn').click();
    await settle();
    expect(calls).toHaveLength(0);
    expect(q(root, 'error').hidden).toBe(false);
    expect(q(root, 'error').textContent).toMatch(/264/);
  });

  it('surfaces server errors inline with the server message', async () => {
    const { root } = appWith({
      'POST /infer': () => ({ status: 400, body: { detail: 'cgm values must be finite' } }),
    });
    (q(root, 'cgm-input') as HTMLTextAreaElement).value = cgmCsv;
    q(root, 'infer-btn').click();
    await settle();
    expect(q(root, 'error').textContent).toContain('cgm values must be finite');
  });
});

describe('what-if editing', () => {
  async function inferredApp() {
    let lastBody: { scenario: ScenarioJson; setting: string } | null = null;
    const app = appWith({
      'POST /infer': () => ({ status: 200, body: inferResponse }),
      'POST /simulate': (init) => {
        lastBody = JSON.parse(String(init?.body));
        if (lastBody!.setting === 'next_day') return { status: 200, body: simulateNextDay };
        if (lastBody!.scenario.meals.length === 0) return { status: 200, body: simulateNoMeals };
        if (lastBody!.scenario.meals[2]?.grams === 160) return { status: 200, body: simulateDouble };
        return { status: 200, body: simulateBase };
      },
    });
    (q(app.root, 'cgm-input') as HTMLTextAreaElement).value = cgmCsv;
    q(app.root, 'infer-btn').click();
    await settle();
    return { ...app, lastBody: () => lastBody };
  }

  it('doubling dinner redraws a higher post-dinner median from the service', async () => {
    const app = await inferredApp();
    const medianPath = () =>
      app.root
        .querySelector('[data-role="cgm-chart"] path[data-role="median"]')!
        .getAttribute('d')!;
    const before = medianPath();
    const gramsInput = q(app.root, 'meal-grams-2') as HTMLInputElement;
    gramsInput.value = '160';
    gramsInput.dispatchEvent(new Event('change'));
    await settle();
    expect(app.lastBody()!.scenario.meals[2]!.grams).toBe(160);
    const after = medianPath();
    expect(after).not.toBe(before);
    // the service said the post-dinner median is higher; verify the numbers
    const idx = simulateBase.t.findIndex((t) => t >= 1200);
    expect(simulateDouble.median[idx]!).toBeGreaterThan(simulateBase.median[idx]!);
  });

  it('removing all meals trends the band toward the inferred basal glucose', async () => {
    const app = await inferredApp();
    for (const i of [2, 1, 0]) {
      const btn = q(app.root, `meal-remove-${i}`) as HTMLButtonElement;
      btn.click();
      await settle();
    }
    expect(app.lastBody()!.scenario.meals).toHaveLength(0);
    const gb = inferResponse.summary['Gb']!.median;
    const median = simulateNoMeals.median;
    const finalDev = Math.abs(median[median.length - 1]! - gb);
    const initialDev = Math.abs(median[0]! - gb);
    expect(finalDev).toBeLessThan(1.0);
    expect(finalDev).toBeLessThan(initialDev);
  });

  it('next-day toggle requests setting=next_day and widens the x-axis to 46 h', async () => {
    const app = await inferredApp();
    const toggle = q(app.root, 'next-day') as HTMLInputElement;
    toggle.checked = true;
    toggle.dispatchEvent(new Event('change'));
    await settle();
    expect(app.lastBody()!.setting).toBe('next_day');
    const label = app.root.querySelector('[data-role="cgm-chart"] text')!;
    expect(label.textContent).toContain('2760');
  });

  it('invalid edits are rejected locally without a request', async () => {
    const app = await inferredApp();
    const before = app.calls.length;
    const timeInput = q(app.root, 'meal-time-2') as HTMLInputElement;
    timeInput.value = '1315'; // dinner would overrun the horizon
    timeInput.dispatchEvent(new Event('change'));
    await settle();
    expect(app.calls.length).toBe(before);
    expect(q(app.root, 'error').textContent).toMatch(/horizon/);
  });

  it('expired posterior prompts for re-inference', async () => {
    let expired = false;
    const app = appWith({
      'POST /infer': () => ({ status: 200, body: inferResponse }),
      'POST /simulate': () =>
        expired
          ? { status: 404, body: { detail: 'unknown or expired posterior_id' } }
          : { status: 200, body: simulateBase },
    });
    (q(app.root, 'cgm-input') as HTMLTextAreaElement).value = cgmCsv;
    q(app.root, 'infer-btn').click();
    await settle();
    expired = true;
    const gramsInput = q(app.root, 'meal-grams-0') as HTMLInputElement;
    gramsInput.value = '60';
    gramsInput.dispatchEvent(new Event('change'));
    await settle();
    expect(app.state.posteriorId).toBeNull();
    expect(q(app.root, 'error').textContent).toMatch(/run inference again/);
  });

  it('a newer edit supersedes the in-flight simulate request', async () => {
    const app = await inferredApp();
    const first = new AbortController();
    app.state.inflight = first;
    await refreshSimulation(app.state, q(app.root, 'chart-host'));
    expect(first.signal.aborted).toBe(true);
    expect(app.state.inflight).toBeNull();
  });
});
