import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

const here = dirname(fileURLToPath(import.meta.url));

export function fixture<T>(name: string): T {
  return JSON.parse(readFileSync(join(here, 'fixtures', name), 'utf-8')) as T;
}

export function fixtureText(name: string): string {
  return readFileSync(join(here, 'fixtures', name), 'utf-8');
}

type Route = (init: RequestInit | undefined) => { status: number; body: unknown };

/** fetch stub that serves canned responses per (method, path) and records calls. */
export function fakeFetch(routes: Record<string, Route>) {
  const calls: { url: string; init: RequestInit | undefined }[] = [];
  const fn: typeof fetch = async (input, init) => {
    const url = String(input);
    const path = new URL(url, 'http://x').pathname;
    const key = `${init?.method ?? 'GET'} ${path}`;
    calls.push({ url, init });
    const route = routes[key];
    if (!route) {
      return new Response(JSON.stringify({ detail: `no route ${key}` }), { status: 404 });
    }
    const { status, body } = route(init);
    return new Response(JSON.stringify(body), {
      status,
      headers: { 'Content-Type': 'application/json' },
    });
  };
  return { fn, calls };
}
