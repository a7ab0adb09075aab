// Shared test plumbing: canned session payloads, a page loader that
// mirrors the real index.html, and a tiny condition waiter.

import { readFileSync } from "node:fs";

import { SessionState } from "../src/api.js";

export function fakeState(overrides: Partial<SessionState> = {}): SessionState {
    return {
        id: "f00d1234abcd5678",
        created: "2026-08-21T10:00:00+00:00",
        revision: 0,
        config: {
            depth_uk: 290,
            waist_um: 1.971,
            mass_kg: 6.801871425e-26,
            wavelength_nm: 852.0,
            prior_min_uk: null,
            prior_max_uk: null,
            prior_points: 1001,
            single_atom: false,
            mean_loading: 1.65,
            atom_cap: 7,
            time_grid: { min_us: 2.0, max_us: 200.0, step_us: 2.0 },
        },
        temperature_uk: 42.63921,
        error_uk: 18.30417,
        next_time_us: 22.0,
        shots: 0,
        trace: [],
        posterior: {
            theta_uk: [14.5, 20.0, 40.0, 80.0, 124.7],
            density: [0.004, 0.011, 0.019, 0.008, 0.003],
        },
        info_gain: {
            t_us: [2.0, 22.0, 100.0, 200.0],
            gain: [0.0003, 0.0918, 0.0441, 0.0127],
            best_time_us: 22.0,
        },
        ...overrides,
    };
}

// The real page body, so tests exercise the ids the shipped HTML has.
export function loadPage(doc: Document): void {
    const html = readFileSync(new URL("../index.html", import.meta.url), "utf8");
    const body = html.slice(html.indexOf("<body>") + "<body>".length, html.indexOf("</body>"));
    doc.body.innerHTML = body;
}

export async function waitFor(check: () => boolean, deadlineMs = 15000): Promise<void> {
    const start = Date.now();
    while (!check()) {
        if (Date.now() - start > deadlineMs) {
            throw new Error("condition not met in time");
        }
        await sleep(5);
    }
}

export function sleep(ms: number): Promise<void> {
    return new Promise(resolve => setTimeout(resolve, ms));
}
