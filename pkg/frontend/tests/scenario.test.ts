import { describe, expect, it } from 'vitest';

import type { ScenarioJson } from '../src/api.js';
import {
  addBolus,
  exportScenario,
  importScenario,
  removeAllMeals,
  removeBolus,
  setMealGrams,
  shiftMeal,
} from '../src/scenario.js';
import { fixture } from './helpers.js';

const canonical = fixture<ScenarioJson>('scenario_canonical.json');

describe('scenario round trip', () => {
  it('export(import(s)) is lossless', () => {
    const ui = importScenario(canonical);
    expect(exportScenario(ui)).toEqual(canonical);
    expect(JSON.stringify(exportScenario(ui))).toBe(JSON.stringify(canonical));
  });

  it('the shipped default scenario matches the recorded fixture', async () => {
    const { readFileSync } = await import('node:fs');
    const { fileURLToPath } = await import('node:url');
    const { dirname, join } = await import('node:path');
    const here = dirname(fileURLToPath(import.meta.url));
    const shipped = JSON.parse(readFileSync(join(here, '..', 'canonical.json'), 'utf-8'));
    expect(exportScenario(importScenario(shipped))).toEqual(canonical);
  });

  it('rejects horizons off the 5-minute grid', () => {
    expect(() => importScenario({ ...canonical, horizon_min: 1321 })).toThrow();
  });
});

describe('scenario edits', () => {
  it('scaling grams changes exactly one meal and marks dirty', () => {
    const ui = importScenario(canonical);
    const edited = setMealGrams(ui, 2, 160);
    expect(edited.meals[2]!.grams).toBe(160);
    expect(edited.meals[0]!.grams).toBe(canonical.meals[0]!.grams);
    expect(edited.dirty).toBe(true);
    expect(ui.meals[2]!.grams).toBe(canonical.meals[2]!.grams); // original untouched
  });

  it('matches the recorded double-dinner scenario fixture', () => {
    const doubled = fixture<ScenarioJson>('scenario_double_dinner.json');
    const edited = setMealGrams(importScenario(canonical), 2, 160);
    expect(exportScenario(edited)).toEqual(doubled);
  });

  it('shifting a meal keeps it inside the horizon', () => {
    const ui = importScenario(canonical);
    expect(shiftMeal(ui, 0, 480).meals[0]!.t_min).toBe(480);
    expect(() => shiftMeal(ui, 2, 1310)).toThrow(/horizon/);
    expect(() => shiftMeal(ui, 0, -5)).toThrow(/horizon/);
  });

  it('bolus add/remove keeps list sorted', () => {
    let ui = importScenario(canonical);
    ui = addBolus(ui, 600, 2.5);
    expect(ui.boluses.map((b) => b.t_min)).toEqual([420, 600, 750, 1140]);
    ui = removeBolus(ui, 1);
    expect(ui.boluses.map((b) => b.t_min)).toEqual([420, 750, 1140]);
    expect(() => addBolus(ui, 100, 0)).toThrow();
  });

  it('removeAllMeals leaves boluses alone', () => {
    const ui = removeAllMeals(importScenario(canonical));
    expect(ui.meals).toHaveLength(0);
    expect(ui.boluses).toHaveLength(3);
  });
});
