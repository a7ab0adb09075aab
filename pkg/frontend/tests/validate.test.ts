import { describe, expect, it } from "vitest";

import { FormValues, parseOutcome, recordCsv, validateForm } from "../src/state.js";
import { fakeState } from "./helpers.js";

function values(overrides: Partial<FormValues> = {}): FormValues {
    return {
        depthUk: "290",
        waistUm: "1.971",
        priorMinUk: "",
        priorMaxUk: "",
        singleAtom: false,
        meanLoading: "1.65",
        atomCap: "7",
        ...overrides,
    };
}

describe("validateForm", () => {
    it("accepts the prefilled deep-trap defaults", () => {
        const check = validateForm(values());
        expect(check.errors.size).toBe(0);
        expect(check.config).toEqual({
            depth_uk: 290,
            waist_um: 1.971,
            mean_loading: 1.65,
            atom_cap: 7,
        });
    });

    it("leaves the prior out when both bounds are blank", () => {
        const check = validateForm(values());
        expect(check.config).not.toHaveProperty("prior_min_uk");
    });

    it("passes explicit prior bounds through", () => {
        const check = validateForm(values({ priorMinUk: "14.5", priorMaxUk: "125" }));
        expect(check.config?.prior_min_uk).toBe(14.5);
        expect(check.config?.prior_max_uk).toBe(125);
    });

    it("requires a depth", () => {
        const check = validateForm(values({ depthUk: "  " }));
        expect(check.config).toBeNull();
        expect(check.errors.get("depth_uk")).toBe("required");
    });

    it("rejects a non-positive depth", () => {
        expect(validateForm(values({ depthUk: "-3" })).errors.get("depth_uk")).toMatch(/positive/);
        expect(validateForm(values({ depthUk: "0" })).errors.get("depth_uk")).toMatch(/positive/);
        expect(validateForm(values({ depthUk: "abc" })).errors.get("depth_uk")).toMatch(/positive/);
    });

    it("rejects a one-sided prior", () => {
        const check = validateForm(values({ priorMinUk: "14.5" }));
        expect(check.config).toBeNull();
        expect(check.errors.get("prior_min_uk")).toMatch(/both/);
    });

    it("rejects an empty or inverted prior window", () => {
        const inverted = validateForm(values({ priorMinUk: "50", priorMaxUk: "20" }));
        expect(inverted.config).toBeNull();
        expect(inverted.errors.get("prior_min_uk")).toMatch(/below/);
        const empty = validateForm(values({ priorMinUk: "20", priorMaxUk: "20" }));
        expect(empty.config).toBeNull();
    });

    it("requires a mean loading unless single-atom is ticked", () => {
        const missing = validateForm(values({ meanLoading: "" }));
        expect(missing.errors.get("mean_loading")).toBe("required");
        const single = validateForm(values({ singleAtom: true, meanLoading: "" }));
        expect(single.errors.size).toBe(0);
        expect(single.config?.single_atom).toBe(true);
        expect(single.config).not.toHaveProperty("mean_loading");
    });

    it("rejects a fractional or zero atom cap", () => {
        expect(validateForm(values({ atomCap: "2.5" })).errors.get("atom_cap")).toMatch(/whole/);
        expect(validateForm(values({ atomCap: "0" })).errors.get("atom_cap")).toMatch(/whole/);
    });

    it("uses the service default when the cap is blank", () => {
        const check = validateForm(values({ atomCap: "" }));
        expect(check.errors.size).toBe(0);
        expect(check.config).not.toHaveProperty("atom_cap");
    });
});

describe("parseOutcome", () => {
    it("accepts whole counts up to the cap", () => {
        expect(parseOutcome("0", 7)).toEqual({ n: 0, error: null });
        expect(parseOutcome(" 7 ", 7)).toEqual({ n: 7, error: null });
    });

    it("rejects anything that is not a whole count", () => {
        for (const raw of ["", "2.5", "-1", "three", "1e2"]) {
            expect(parseOutcome(raw, 7).n).toBeNull();
        }
    });

    it("rejects counts over the cap", () => {
        const result = parseOutcome("8", 7);
        expect(result.n).toBeNull();
        expect(result.error).toMatch(/7/);
    });
});

describe("recordCsv", () => {
    it("writes one shot per row under the standard header", () => {
        const state = fakeState({
            trace: [
                { t_us: 22, n: 3, temperature_uk: 40.1, error_uk: 9.2 },
                { t_us: 28, n: 0, temperature_uk: 38.7, error_uk: 7.5 },
            ],
        });
        const lines = recordCsv(state).trimEnd().split("\n");
        expect(lines[2]).toBe("t_us,atoms");
        expect(lines[3]).toBe("22,3");
        expect(lines[4]).toBe("28,0");
    });

    it("keeps full float precision in the time column", () => {
        const state = fakeState({
            trace: [{ t_us: 21.999999999999996, n: 1, temperature_uk: 40, error_uk: 9 }],
        });
        expect(recordCsv(state)).toContain("21.999999999999996,1");
    });
});
