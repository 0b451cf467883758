/**
 * Single-page what-if explorer.
 *
 * Flow: paste/upload a CGM trace -> /infer renders the parameter table and
 * stores the posterior id -> every committed scenario edit (grams, times,
 * boluses, next-day toggle) triggers /simulate and redraws the band chart.
 * At most one simulate request is in flight; a newer edit aborts the older
 * request so the chart always reflects the latest edit.
 */

import { ApiError, TwinClient, type ReplaySetting } from './api.js';
import { buildSeries, renderChart } from './chart.js';
import { parseCgmCsv } from './csv.js';
import {
  addBolus,
  exportScenario,
  importScenario,
  removeBolus,
  removeMeal,
  setMealGrams,
  shiftMeal,
  type UiScenario,
} from './scenario.js';
import { renderParamTable } from './table.js';

export interface AppState {
  client: TwinClient;
  scenario: UiScenario;
  observed: number[] | null;
  posteriorId: string | null;
  nextDay: boolean;
  inflight: AbortController | null;
}

export function createApp(root: HTMLElement, client: TwinClient,
                          initialScenario: UiScenario): AppState {
  const state: AppState = {
    client,
    scenario: initialScenario,
    observed: null,
    posteriorId: null,
    nextDay: false,
    inflight: null,
  };

  root.innerHTML = `
    <section class="input-panel">
      <h2>Observation</h2>
      <textarea data-role="cgm-input" rows="4"
        placeholder="paste t_min,value CSV (264 readings)"></textarea>
      <div>or upload: <input type="file" accept=".csv,text/csv" data-role="cgm-file"></div>
      <button data-role="infer-btn">Infer parameters</button>
      <div data-role="error" class="error" hidden></div>
    </section>
    <section>
      <h2>Inferred parameters</h2>
      <div data-role="param-host">run inference to see the posterior</div>
    </section>
    <section>
      <h2>What-if scenario</h2>
      <div data-role="scenario-editor"></div>
      <label><input type="checkbox" data-role="next-day"> extend to next day</label>
    </section>
    <section>
      <h2>Predicted CGM</h2>
      <div data-role="chart-host"></div>
    </section>`;

  const q = <T extends HTMLElement>(sel: string) =>
    root.querySelector(`[data-role="${sel}"]`) as T;

  const showError = (msg: string | null) => {
    const box = q<HTMLDivElement>('error');
    box.hidden = msg === null;
    box.textContent = msg ?? '';
  };

  const renderEditor = () => {
    const host = q<HTMLDivElement>('scenario-editor');
    const rows = state.scenario.meals
      .map(
        (m, i) => `
      <div class="meal-row" data-meal="${i}">
        meal at <input data-role="meal-time-${i}" type="number" step="5" value="${m.t_min}"> min,
        <input data-role="meal-grams-${i}" type="number" step="5" value="${m.grams}"> g
        <button data-role="meal-remove-${i}">remove</button>
      </div>`,
      )
      .join('');
    const boluses = state.scenario.boluses
      .map(
        (b, i) => `
      <div class="bolus-row" data-bolus="${i}">
        bolus at ${b.t_min} min, ${b.dose} U
        <button data-role="bolus-remove-${i}">remove</button>
      </div>`,
      )
      .join('');
    host.innerHTML = `${rows}${boluses}
      <div>
        add bolus: <input data-role="new-bolus-time" type="number" step="5" value="0"> min,
        <input data-role="new-bolus-dose" type="number" step="0.5" value="1"> U
        <button data-role="bolus-add">add</button>
      </div>`;

    state.scenario.meals.forEach((_, i) => {
      q<HTMLInputElement>(`meal-grams-${i}`).addEventListener('change', (ev) => {
        commitEdit(() =>
          setMealGrams(state.scenario, i, Number((ev.target as HTMLInputElement).value)));
      });
      q<HTMLInputElement>(`meal-time-${i}`).addEventListener('change', (ev) => {
        commitEdit(() =>
          shiftMeal(state.scenario, i, Number((ev.target as HTMLInputElement).value)));
      });
      q<HTMLButtonElement>(`meal-remove-${i}`).addEventListener('click', () => {
        commitEdit(() => removeMeal(state.scenario, i));
      });
    });
    state.scenario.boluses.forEach((_, i) => {
      q<HTMLButtonElement>(`bolus-remove-${i}`).addEventListener('click', () => {
        commitEdit(() => removeBolus(state.scenario, i));
      });
    });
    q<HTMLButtonElement>('bolus-add').addEventListener('click', () => {
      commitEdit(() =>
        addBolus(state.scenario,
                 Number(q<HTMLInputElement>('new-bolus-time').value),
                 Number(q<HTMLInputElement>('new-bolus-dose').value)));
    });
  };

  const commitEdit = (edit: () => UiScenario) => {
    try {
      state.scenario = edit();
      showError(null);
    } catch (err) {
      showError(err instanceof Error ? err.message : String(err));
      return;
    }
    renderEditor();
    void refreshSimulation(state, q<HTMLDivElement>('chart-host'), showError);
  };

  q<HTMLButtonElement>('infer-btn').addEventListener('click', async () => {
    let cgm: number[];
    try {
      cgm = parseCgmCsv(q<HTMLTextAreaElement>('cgm-input').value);
    } catch (err) {
      showError(err instanceof Error ? err.message : String(err));
      return;
    }
    showError(null);
    try {
      const res = await state.client.infer(cgm);
      state.observed = cgm;
      state.posteriorId = res.posterior_id;
      renderParamTable(q<HTMLDivElement>('param-host'), res);
      void refreshSimulation(state, q<HTMLDivElement>('chart-host'), showError);
    } catch (err) {
      showError(err instanceof ApiError ? `server: ${err.message}` : String(err));
    }
  });

  q<HTMLInputElement>('cgm-file').addEventListener('change', async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    q<HTMLTextAreaElement>('cgm-input').value = await readFileText(file);
  });

  q<HTMLInputElement>('next-day').addEventListener('change', (ev) => {
    state.nextDay = (ev.target as HTMLInputElement).checked;
    void refreshSimulation(state, q<HTMLDivElement>('chart-host'), showError);
  });

  renderEditor();
  return state;
}

function readFileText(file: File): Promise<string> {
  if (typeof file.text === 'function') return file.text();
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(String(reader.result));
    reader.onerror = () => reject(reader.error);
    reader.readAsText(file);
  });
}

/** Issue /simulate for the current scenario, superseding any pending call. */
export async function refreshSimulation(
  state: AppState,
  chartHost: HTMLElement,
  showError: (msg: string | null) => void = () => {},
): Promise<void> {
  if (!state.posteriorId) return;
  state.inflight?.abort();
  const controller = new AbortController();
  state.inflight = controller;
  const setting: ReplaySetting = state.nextDay ? 'next_day' : 'in_sample';
  try {
    const sim = await state.client.simulate(
      state.posteriorId,
      exportScenario(state.scenario),
      setting,
      controller.signal,
    );
    if (controller.signal.aborted) return;
    renderChart(chartHost, buildSeries(sim, state.observed));
  } catch (err) {
    if (controller.signal.aborted) return; // superseded by a newer edit
    if (err instanceof ApiError && err.status === 404) {
      state.posteriorId = null;
      showError('posterior expired; run inference again');
      return;
    }
    showError(err instanceof Error ? err.message : String(err));
  } finally {
    if (state.inflight === controller) state.inflight = null;
  }
}

export { importScenario };
