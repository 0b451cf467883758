/**
 * Scenario model for the editor: a faithful mirror of the service's scenario
 * JSON plus UI-only state (selection, dirty flag). Import/export round-trips
 * losslessly so an edited scenario can be saved and reloaded byte-for-byte.
 */

import type { ScenarioJson } from './api.js';

export interface UiScenario {
  horizon_min: number;
  basal_rate: number;
  meals: { t_min: number; grams: number; duration_min: number }[];
  boluses: { t_min: number; dose: number }[];
  selected: { kind: 'meal' | 'bolus'; index: number } | null;
  dirty: boolean;
}

export function importScenario(json: ScenarioJson): UiScenario {
  if (!(json.horizon_min > 0) || json.horizon_min % 5 !== 0) {
    throw new Error('horizon_min must be a positive multiple of 5');
  }
  return {
    horizon_min: json.horizon_min,
    basal_rate: json.basal_rate,
    meals: (json.meals ?? []).map((m) => ({
      t_min: m.t_min,
      grams: m.grams,
      duration_min: m.duration_min ?? 15,
    })),
    boluses: (json.boluses ?? []).map((b) => ({ t_min: b.t_min, dose: b.dose })),
    selected: null,
    dirty: false,
  };
}

export function exportScenario(s: UiScenario): ScenarioJson {
  return {
    horizon_min: s.horizon_min,
    basal_rate: s.basal_rate,
    meals: s.meals.map((m) => ({ ...m })),
    boluses: s.boluses.map((b) => ({ ...b })),
  };
}

function assertInside(s: UiScenario, t: number, duration = 0): void {
  if (t < 0 || t + duration > s.horizon_min) {
    throw new Error(`event at t=${t} falls outside the ${s.horizon_min} min horizon`);
  }
}

export function setMealGrams(s: UiScenario, index: number, grams: number): UiScenario {
  if (!(grams > 0)) throw new Error('meal grams must be > 0');
  const meals = s.meals.map((m, i) => (i === index ? { ...m, grams } : m));
  return { ...s, meals, dirty: true };
}

export function shiftMeal(s: UiScenario, index: number, newT: number): UiScenario {
  const meal = s.meals[index];
  if (!meal) throw new Error(`no meal at index ${index}`);
  assertInside(s, newT, meal.duration_min);
  const meals = s.meals.map((m, i) => (i === index ? { ...m, t_min: newT } : m));
  return { ...s, meals, dirty: true };
}

export function addBolus(s: UiScenario, t_min: number, dose: number): UiScenario {
  if (!(dose > 0)) throw new Error('bolus dose must be > 0');
  assertInside(s, t_min);
  const boluses = [...s.boluses, { t_min, dose }].sort((a, b) => a.t_min - b.t_min);
  return { ...s, boluses, dirty: true };
}

export function removeBolus(s: UiScenario, index: number): UiScenario {
  if (index < 0 || index >= s.boluses.length) throw new Error(`no bolus at index ${index}`);
  return { ...s, boluses: s.boluses.filter((_, i) => i !== index), dirty: true };
}

export function removeMeal(s: UiScenario, index: number): UiScenario {
  if (index < 0 || index >= s.meals.length) throw new Error(`no meal at index ${index}`);
  return { ...s, meals: s.meals.filter((_, i) => i !== index), dirty: true };
}

export function removeAllMeals(s: UiScenario): UiScenario {
  return { ...s, meals: [], dirty: true };
}
