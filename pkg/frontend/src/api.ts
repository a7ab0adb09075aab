// Typed client for the session service.  Payload shapes mirror the
// server's JSON exactly: temperatures in uK, times in us, snake_case.

export interface TimeGrid {
    min_us: number;
    max_us: number;
    step_us: number;
}

export interface SessionConfig {
    depth_uk: number;
    waist_um: number;
    mass_kg?: number;
    wavelength_nm?: number;
    prior_min_uk?: number | null;
    prior_max_uk?: number | null;
    prior_points?: number;
    single_atom?: boolean;
    mean_loading?: number | null;
    atom_cap?: number;
    time_grid?: TimeGrid;
}

export interface TracePoint {
    t_us: number;
    n: number;
    temperature_uk: number;
    error_uk: number;
}

export interface PosteriorCurve {
    theta_uk: number[];
    density: number[];
}

export interface InfoGainCurve {
    t_us: number[];
    gain: number[];
    best_time_us: number;
}

export interface SessionState {
    id: string;
    created: string;
    revision: number;
    config: SessionConfig;
    temperature_uk: number;
    error_uk: number;
    next_time_us: number;
    shots: number;
    trace: TracePoint[];
    posterior: PosteriorCurve;
    info_gain: InfoGainCurve;
}

interface ValidationItem {
    loc: (string | number)[];
    msg: string;
}

export class ApiError extends Error {
    readonly status: number;
    readonly detail: unknown;

    constructor(status: number, detail: unknown) {
        super(typeof detail === "string" ? detail : `request failed with status ${status}`);
        this.name = "ApiError";
        this.status = status;
        this.detail = detail;
    }

    // Pydantic validation failures arrive as a list of {loc, msg}
    // items; flatten them to field -> message for inline display.
    fieldErrors(): Map<string, string> {
        const errors = new Map<string, string>();
        if (!Array.isArray(this.detail)) {
            return errors;
        }
        for (const item of this.detail as ValidationItem[]) {
            if (!item || !Array.isArray(item.loc)) {
                continue;
            }
            const field = item.loc.filter(part => part !== "body").join(".");
            errors.set(field, String(item.msg));
        }
        return errors;
    }
}

export class SessionApi {
    private readonly base: string;

    constructor(base = "") {
        this.base = base.replace(/\/$/, "");
    }

    create(config: SessionConfig): Promise<SessionState> {
        return this.request<SessionState>("POST", "/api/sessions", config);
    }

    get(id: string): Promise<SessionState> {
        return this.request<SessionState>("GET", `/api/sessions/${id}`);
    }

    submit(id: string, tUs: number, n: number, revision: number, override = false): Promise<SessionState> {
        return this.request<SessionState>("POST", `/api/sessions/${id}/outcomes`, {
            t_us: tUs,
            n: n,
            revision: revision,
            override: override,
        });
    }

    undo(id: string): Promise<SessionState> {
        return this.request<SessionState>("POST", `/api/sessions/${id}/undo`);
    }

    remove(id: string): Promise<void> {
        return this.request<void>("DELETE", `/api/sessions/${id}`);
    }

    infoGain(id: string): Promise<InfoGainCurve> {
        return this.request<InfoGainCurve>("GET", `/api/sessions/${id}/infogain`);
    }

    private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
        const init: RequestInit = { method: method };
        if (body !== undefined) {
            init.headers = { "Content-Type": "application/json" };
            init.body = JSON.stringify(body);
        }
        const response = await fetch(this.base + path, init);
        if (response.status === 204) {
            return undefined as T;
        }
        const payload: unknown = await response.json().catch(() => null);
        if (!response.ok) {
            throw new ApiError(response.status, extractDetail(payload));
        }
        return payload as T;
    }
}

function extractDetail(payload: unknown): unknown {
    if (payload && typeof payload === "object" && "detail" in payload) {
        return (payload as { detail: unknown }).detail;
    }
    return payload;
}
