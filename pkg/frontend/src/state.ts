// Console state: form validation, the session store, and record export.
// The store holds whatever the service last said and nothing it computed
// itself; every number it exposes was copied out of a response body.

import { ApiError, SessionConfig, SessionState } from "./api.js";

export interface Api {
    create(config: SessionConfig): Promise<SessionState>;
    get(id: string): Promise<SessionState>;
    submit(id: string, tUs: number, n: number, revision: number, override?: boolean): Promise<SessionState>;
    undo(id: string): Promise<SessionState>;
    remove(id: string): Promise<void>;
}

export interface FormValues {
    depthUk: string;
    waistUm: string;
    priorMinUk: string;
    priorMaxUk: string;
    singleAtom: boolean;
    meanLoading: string;
    atomCap: string;
}

export interface FormCheck {
    config: SessionConfig | null;
    errors: Map<string, string>;
}

// Error keys follow the service's field names so a 422 body and a local
// check light up the same spot in the form.
export function validateForm(values: FormValues): FormCheck {
    const errors = new Map<string, string>();

    const depth = requirePositive(values.depthUk, "depth_uk", errors);
    const waist = requirePositive(values.waistUm, "waist_um", errors);

    const minRaw = values.priorMinUk.trim();
    const maxRaw = values.priorMaxUk.trim();
    let priorMin: number | null = null;
    let priorMax: number | null = null;
    if (minRaw !== "" || maxRaw !== "") {
        if (minRaw === "" || maxRaw === "") {
            errors.set("prior_min_uk", "set both prior bounds or neither");
        } else {
            priorMin = requirePositive(minRaw, "prior_min_uk", errors);
            priorMax = requirePositive(maxRaw, "prior_max_uk", errors);
            if (priorMin !== null && priorMax !== null && priorMin >= priorMax) {
                errors.set("prior_min_uk", "lower bound must be below the upper bound");
            }
        }
    }

    let loading: number | null = null;
    if (!values.singleAtom) {
        loading = requirePositive(values.meanLoading, "mean_loading", errors);
    }

    let cap: number | null = null;
    const capRaw = values.atomCap.trim();
    if (capRaw !== "") {
        cap = Number(capRaw);
        if (!Number.isInteger(cap) || cap < 1) {
            errors.set("atom_cap", "must be a whole number of at least 1");
            cap = null;
        }
    }

    if (errors.size > 0 || depth === null || waist === null) {
        return { config: null, errors: errors };
    }

    const config: SessionConfig = { depth_uk: depth, waist_um: waist };
    if (priorMin !== null && priorMax !== null) {
        config.prior_min_uk = priorMin;
        config.prior_max_uk = priorMax;
    }
    if (values.singleAtom) {
        config.single_atom = true;
    } else {
        config.mean_loading = loading;
    }
    if (cap !== null) {
        config.atom_cap = cap;
    }
    return { config: config, errors: errors };
}

function requirePositive(raw: string, field: string, errors: Map<string, string>): number | null {
    const text = raw.trim();
    if (text === "") {
        errors.set(field, "required");
        return null;
    }
    const value = Number(text);
    if (!Number.isFinite(value) || value <= 0) {
        errors.set(field, "must be a positive number");
        return null;
    }
    return value;
}

// Measured counts are whole atoms; anything else never reaches the wire.
export function parseOutcome(raw: string, cap: number): { n: number | null; error: string | null } {
    const text = raw.trim();
    if (text === "" || !/^\d+$/.test(text)) {
        return { n: null, error: "enter a whole atom count" };
    }
    const n = Number(text);
    if (n > cap) {
        return { n: null, error: `count cannot exceed ${cap}` };
    }
    return { n: n, error: null };
}

// Record CSV in the shape the offline tools read: shot rows only, since
// console sessions carry no zero-time calibration block.
export function recordCsv(state: SessionState): string {
    const lines = [
        `# session: ${state.id}`,
        `# created: ${state.created}`,
        "t_us,atoms",
    ];
    for (const point of state.trace) {
        lines.push(`${point.t_us},${point.n}`);
    }
    return lines.join("\n") + "\n";
}

export type Connection = "ok" | "lost";

export interface StoreOptions {
    // Interval for the read-only re-sync after a lost response.
    pollDelayMs?: number;
}

export class Store {
    session: SessionState | null = null;
    busy = false;
    notice: string | null = null;
    fieldErrors = new Map<string, string>();
    connection: Connection = "ok";

    private readonly api: Api;
    private readonly pollDelayMs: number;
    private readonly listeners: (() => void)[] = [];
    private pollTimer: ReturnType<typeof setTimeout> | null = null;
    // Revision the in-flight mutation would produce; set only while a
    // lost response leaves the outcome of that mutation unknown.
    private pendingRevision: number | null = null;

    constructor(api: Api, options: StoreOptions = {}) {
        this.api = api;
        this.pollDelayMs = options.pollDelayMs ?? 2000;
    }

    subscribe(listener: () => void): void {
        this.listeners.push(listener);
    }

    async start(config: SessionConfig): Promise<void> {
        if (this.busy) {
            return;
        }
        this.begin();
        try {
            this.adopt(await this.api.create(config));
        } catch (err) {
            if (err instanceof ApiError) {
                this.fieldErrors = err.fieldErrors();
                this.notice = this.fieldErrors.size > 0 ? "the service rejected the configuration" : String(err.message);
            } else {
                this.connection = "lost";
                this.notice = "the service is unreachable";
            }
        } finally {
            this.finish();
        }
    }

    async rehydrate(id: string): Promise<boolean> {
        try {
            this.adopt(await this.api.get(id));
            return true;
        } catch {
            return false;
        }
    }

    async submit(n: number): Promise<boolean> {
        const session = this.session;
        if (session === null || this.busy) {
            return false;
        }
        this.begin();
        try {
            // The release time sent back is the service's own
            // recommendation, byte for byte; the console never adjusts it.
            this.adopt(await this.api.submit(session.id, session.next_time_us, n, session.revision));
            return true;
        } catch (err) {
            await this.mutationFailed(err, session.revision + 1);
            return false;
        } finally {
            this.finish();
        }
    }

    async undo(): Promise<void> {
        const session = this.session;
        if (session === null || this.busy) {
            return;
        }
        this.begin();
        try {
            this.adopt(await this.api.undo(session.id));
        } catch (err) {
            await this.mutationFailed(err, session.revision - 1);
        } finally {
            this.finish();
        }
    }

    async refresh(): Promise<void> {
        if (this.session === null) {
            return;
        }
        try {
            this.adopt(await this.api.get(this.session.id));
        } catch {
            this.connection = "lost";
            this.schedulePoll();
            this.publish();
        }
    }

    async discard(): Promise<void> {
        const session = this.session;
        if (session === null || this.busy) {
            return;
        }
        this.begin();
        try {
            await this.api.remove(session.id);
        } catch {
            // The session may already be gone; dropping the view is right
            // either way.
        } finally {
            this.session = null;
            this.finish();
        }
    }

    private begin(): void {
        this.busy = true;
        this.notice = null;
        this.fieldErrors = new Map();
        this.publish();
    }

    private finish(): void {
        this.busy = false;
        this.publish();
    }

    private adopt(state: SessionState): void {
        this.session = state;
        this.connection = "ok";
        if (this.pendingRevision !== null) {
            this.notice = state.revision === this.pendingRevision
                ? "connection restored; the pending change was applied"
                : "connection restored; the pending change was lost, repeat it";
            this.pendingRevision = null;
        }
        this.publish();
    }

    private async mutationFailed(err: unknown, pendingRevision: number): Promise<void> {
        if (err instanceof ApiError) {
            if (err.status === 409) {
                // Someone else moved the session on; show their state and
                // let the operator decide whether the entry still applies.
                this.notice = `${err.message}; showing the current state, retry if the entry still applies`;
                await this.reload();
            } else {
                this.notice = String(err.message);
            }
            return;
        }
        this.connection = "lost";
        this.pendingRevision = pendingRevision;
        this.notice = "no response from the service; re-syncing in the background";
        this.schedulePoll();
    }

    private async reload(): Promise<void> {
        const notice = this.notice;
        if (this.session !== null) {
            try {
                const state = await this.api.get(this.session.id);
                this.session = state;
                this.connection = "ok";
            } catch {
                this.connection = "lost";
                this.schedulePoll();
            }
        }
        this.notice = notice;
        this.publish();
    }

    private schedulePoll(): void {
        if (this.pollTimer !== null || this.session === null) {
            return;
        }
        this.pollTimer = setTimeout(() => {
            this.pollTimer = null;
            void this.poll();
        }, this.pollDelayMs);
    }

    private async poll(): Promise<void> {
        if (this.session === null) {
            return;
        }
        try {
            this.adopt(await this.api.get(this.session.id));
        } catch (err) {
            if (err instanceof ApiError) {
                // The service answered; the session itself is the problem.
                this.notice = String(err.message);
                this.pendingRevision = null;
                this.publish();
            } else {
                this.schedulePoll();
            }
        }
    }

    private publish(): void {
        for (const listener of this.listeners) {
            listener();
        }
    }
}
