// DOM wiring for the console page.  The page is static HTML; this module
// binds the controls by id, drives a Store, and redraws everything from
// the store on every change.  All inference stays on the service side;
// rendering is formatting and geometry only.

import { SessionConfig, SessionState, TracePoint } from "./api.js";
import { ChartSpec, MARGIN, estimateChart, fmt, infoGainChart, posteriorChart } from "./charts.js";
import { Api, FormValues, Store, parseOutcome, recordCsv, validateForm } from "./state.js";

const SESSION_KEY = "release-recapture.session";

const FORM_FIELDS = [
    "depth_uk", "waist_um", "prior_min_uk", "prior_max_uk", "mean_loading", "atom_cap",
] as const;

export interface ConsoleOptions {
    pollDelayMs?: number;
    // Pass null to keep the session id out of browser storage.
    storage?: Storage | null;
}

export class Console {
    readonly store: Store;

    private readonly doc: Document;
    private readonly storage: Storage | null;

    private readonly setupSection: HTMLElement;
    private readonly runSection: HTMLElement;
    private readonly configForm: HTMLFormElement;
    private readonly depthInput: HTMLInputElement;
    private readonly waistInput: HTMLInputElement;
    private readonly priorMinInput: HTMLInputElement;
    private readonly priorMaxInput: HTMLInputElement;
    private readonly singleAtomInput: HTMLInputElement;
    private readonly loadingInput: HTMLInputElement;
    private readonly capInput: HTMLInputElement;
    private readonly startBtn: HTMLButtonElement;
    private readonly formError: HTMLElement;

    private readonly nextTime: HTMLElement;
    private readonly estimateEl: HTMLElement;
    private readonly estimateExact: HTMLElement;
    private readonly shotCount: HTMLElement;
    private readonly statusDot: HTMLElement;
    private readonly statusText: HTMLElement;
    private readonly noticeEl: HTMLElement;

    private readonly sessionIdEl: HTMLElement;
    private readonly outcomeInput: HTMLInputElement;
    private readonly submitBtn: HTMLButtonElement;
    private readonly entryError: HTMLElement;
    private readonly undoBtn: HTMLButtonElement;
    private readonly exportBtn: HTMLButtonElement;
    private readonly endBtn: HTMLButtonElement;
    private readonly shotRows: HTMLElement;

    private readonly posteriorSvg: SVGSVGElement;
    private readonly estimateSvg: SVGSVGElement;
    private readonly infogainSvg: SVGSVGElement;

    private pendingConfig: SessionConfig | null = null;

    constructor(doc: Document, api: Api, options: ConsoleOptions = {}) {
        this.doc = doc;
        this.store = new Store(api, { pollDelayMs: options.pollDelayMs });
        this.storage = options.storage !== undefined ? options.storage : defaultStorage(doc);

        this.setupSection = this.el("setup-section");
        this.runSection = this.el("run-section");
        this.configForm = this.el("config-form");
        this.depthInput = this.el("depth-uk");
        this.waistInput = this.el("waist-um");
        this.priorMinInput = this.el("prior-min-uk");
        this.priorMaxInput = this.el("prior-max-uk");
        this.singleAtomInput = this.el("single-atom");
        this.loadingInput = this.el("mean-loading");
        this.capInput = this.el("atom-cap");
        this.startBtn = this.el("start-btn");
        this.formError = this.el("form-error");

        this.nextTime = this.el("next-time");
        this.estimateEl = this.el("estimate");
        this.estimateExact = this.el("estimate-exact");
        this.shotCount = this.el("shot-count");
        this.statusDot = this.el("status-dot");
        this.statusText = this.el("status-text");
        this.noticeEl = this.el("notice");

        this.sessionIdEl = this.el("session-id");
        this.outcomeInput = this.el("outcome-input");
        this.submitBtn = this.el("submit-btn");
        this.entryError = this.el("entry-error");
        this.undoBtn = this.el("undo-btn");
        this.exportBtn = this.el("export-btn");
        this.endBtn = this.el("end-btn");
        this.shotRows = this.el("shot-rows");

        this.posteriorSvg = this.el("posterior-svg");
        this.estimateSvg = this.el("estimate-svg");
        this.infogainSvg = this.el("infogain-svg");

        this.wire();
        this.store.subscribe(() => this.render());
        this.checkForm();
        this.render();

        const stored = this.storage?.getItem(SESSION_KEY) ?? null;
        if (stored !== null) {
            void this.store.rehydrate(stored).then(found => {
                if (found) {
                    this.outcomeInput.focus();
                } else {
                    this.storage?.removeItem(SESSION_KEY);
                }
            });
        }
    }

    private el<T extends Element = HTMLElement>(id: string): T {
        const node = this.doc.getElementById(id);
        if (node === null) {
            throw new Error(`page is missing #${id}`);
        }
        return node as unknown as T;
    }

    private wire(): void {
        for (const input of [
            this.depthInput, this.waistInput, this.priorMinInput, this.priorMaxInput,
            this.loadingInput, this.capInput,
        ]) {
            input.addEventListener("input", () => this.checkForm());
        }
        this.singleAtomInput.addEventListener("change", () => this.checkForm());

        this.configForm.addEventListener("submit", event => {
            event.preventDefault();
            void this.startSession();
        });

        this.outcomeInput.addEventListener("keydown", event => {
            if (event.key === "Enter") {
                event.preventDefault();
                void this.submitOutcome();
            } else if (event.key.length === 1 && !/\d/.test(event.key)) {
                event.preventDefault();
            }
        });
        this.submitBtn.addEventListener("click", () => void this.submitOutcome());
        this.undoBtn.addEventListener("click", () => void this.undoShot());
        this.exportBtn.addEventListener("click", () => this.exportRecord());
        this.endBtn.addEventListener("click", () => void this.endSession());

        // Stray digits anywhere on the page land in the outcome box.
        this.doc.addEventListener("keydown", event => {
            if (this.store.session === null) {
                return;
            }
            const target = event.target as Element | null;
            if (target !== null && /^(INPUT|TEXTAREA|SELECT|BUTTON)$/.test(target.tagName)) {
                return;
            }
            if (/^\d$/.test(event.key) || event.key === "Enter") {
                this.outcomeInput.focus();
            }
        });
    }

    private formValues(): FormValues {
        return {
            depthUk: this.depthInput.value,
            waistUm: this.waistInput.value,
            priorMinUk: this.priorMinInput.value,
            priorMaxUk: this.priorMaxInput.value,
            singleAtom: this.singleAtomInput.checked,
            meanLoading: this.loadingInput.value,
            atomCap: this.capInput.value,
        };
    }

    private checkForm(): void {
        const check = validateForm(this.formValues());
        this.pendingConfig = check.config;
        this.startBtn.disabled = check.config === null || this.store.busy;
        this.loadingInput.disabled = this.singleAtomInput.checked;
        this.showFieldErrors(check.errors);
    }

    private showFieldErrors(errors: Map<string, string>): void {
        for (const field of FORM_FIELDS) {
            const span = this.el(field.replace(/_/g, "-") + "-error");
            span.textContent = errors.get(field) ?? "";
        }
        this.formError.textContent = errors.get("") ?? "";
    }

    private async startSession(): Promise<void> {
        if (this.pendingConfig === null) {
            return;
        }
        await this.store.start(this.pendingConfig);
        const session = this.store.session;
        if (session !== null) {
            this.storage?.setItem(SESSION_KEY, session.id);
            this.outcomeInput.focus();
        }
    }

    private async submitOutcome(): Promise<void> {
        const session = this.store.session;
        if (session === null || this.store.busy) {
            return;
        }
        const parsed = parseOutcome(this.outcomeInput.value, outcomeCap(session));
        if (parsed.n === null) {
            this.entryError.textContent = parsed.error ?? "";
            this.outcomeInput.focus();
            return;
        }
        this.entryError.textContent = "";
        const recorded = await this.store.submit(parsed.n);
        if (recorded) {
            this.outcomeInput.value = "";
        }
        this.outcomeInput.focus();
    }

    private async undoShot(): Promise<void> {
        await this.store.undo();
        this.outcomeInput.focus();
    }

    private async endSession(): Promise<void> {
        await this.store.discard();
        this.storage?.removeItem(SESSION_KEY);
    }

    private exportRecord(): void {
        const session = this.store.session;
        if (session === null) {
            return;
        }
        const url = URL.createObjectURL(new Blob([recordCsv(session)], { type: "text/csv" }));
        const anchor = this.doc.createElement("a");
        anchor.href = url;
        anchor.download = `record-${session.id.slice(0, 8)}.csv`;
        anchor.click();
        URL.revokeObjectURL(url);
    }

    private render(): void {
        const session = this.store.session;

        this.statusDot.className = "dot " + (this.store.connection === "ok" ? "ok" : "lost");
        this.statusText.textContent = this.store.connection === "ok" ? "connected" : "connection lost";
        this.noticeEl.textContent = this.store.notice ?? "";
        this.noticeEl.hidden = this.store.notice === null;
        if (this.store.fieldErrors.size > 0) {
            this.showFieldErrors(this.store.fieldErrors);
        }

        this.setupSection.hidden = session !== null;
        this.runSection.hidden = session === null;

        if (session === null) {
            this.nextTime.textContent = "next release: —";
            this.estimateEl.textContent = "T = —";
            this.estimateExact.textContent = "";
            this.shotCount.textContent = "";
            this.startBtn.disabled = this.pendingConfig === null || this.store.busy;
            return;
        }

        this.sessionIdEl.textContent = session.id;
        this.nextTime.textContent = `next release: ${fmt(session.next_time_us)} µs`;
        this.estimateEl.textContent =
            `T = ${fmt(session.temperature_uk)} ± ${fmt(session.error_uk)} µK`;
        // Full-precision readout for cross-checks against offline tools;
        // template interpolation keeps the exact shortest float repr.
        this.estimateExact.textContent =
            `${session.temperature_uk} ± ${session.error_uk} µK`;
        this.shotCount.textContent = `${session.shots} shots · revision ${session.revision}`;
        this.submitBtn.disabled = this.store.busy;
        this.undoBtn.disabled = this.store.busy || session.revision === 0;

        drawChart(this.posteriorSvg, posteriorChart(session.posterior, session.temperature_uk));
        drawChart(this.estimateSvg, estimateChart(session.trace));
        drawChart(this.infogainSvg, infoGainChart(session.info_gain));
        this.renderLog(session.trace);
    }

    private renderLog(trace: TracePoint[]): void {
        const rows: string[] = [];
        for (let i = trace.length - 1; i >= 0; i--) {
            const point = trace[i]!;
            rows.push(
                `<tr><td>${i + 1}</td><td>${fmt(point.t_us)}</td><td>${point.n}</td>` +
                `<td>${fmt(point.temperature_uk)} ± ${fmt(point.error_uk)}</td></tr>`,
            );
        }
        this.shotRows.innerHTML = rows.join("");
    }
}

function outcomeCap(session: SessionState): number {
    if (session.config.single_atom) {
        return 1;
    }
    return session.config.atom_cap ?? 7;
}

function defaultStorage(doc: Document): Storage | null {
    try {
        return doc.defaultView?.localStorage ?? null;
    } catch {
        return null;
    }
}

function drawChart(svg: SVGSVGElement, spec: ChartSpec): void {
    svg.setAttribute("viewBox", `0 0 ${spec.width} ${spec.height}`);
    svg.innerHTML = chartMarkup(spec);
}

function chartMarkup(spec: ChartSpec): string {
    const x0 = MARGIN.left;
    const x1 = spec.width - MARGIN.right;
    const y0 = spec.height - MARGIN.bottom;
    const y1 = MARGIN.top;
    const parts: string[] = [];
    parts.push(`<line class="axis" x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}"/>`);
    parts.push(`<line class="axis" x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}"/>`);
    for (const tick of spec.xTicks) {
        parts.push(`<line class="tick" x1="${tick.pos}" y1="${y0}" x2="${tick.pos}" y2="${y0 + 4}"/>`);
        parts.push(`<text class="tick-label" x="${tick.pos}" y="${y0 + 16}" text-anchor="middle">${tick.label}</text>`);
    }
    for (const tick of spec.yTicks) {
        parts.push(`<line class="tick" x1="${x0 - 4}" y1="${tick.pos}" x2="${x0}" y2="${tick.pos}"/>`);
        parts.push(`<text class="tick-label" x="${x0 - 7}" y="${tick.pos + 4}" text-anchor="end">${tick.label}</text>`);
    }
    if (spec.band !== null) {
        parts.push(`<path class="chart-band" d="${spec.band}"/>`);
    }
    if (spec.line !== "") {
        parts.push(`<path class="chart-line" d="${spec.line}"/>`);
    }
    if (spec.rule !== null) {
        parts.push(`<line class="chart-rule" x1="${spec.rule}" y1="${y0}" x2="${spec.rule}" y2="${y1}"/>`);
    }
    if (spec.marker !== null) {
        parts.push(`<circle class="chart-marker" cx="${spec.marker.x}" cy="${spec.marker.y}" r="3.5"/>`);
    }
    parts.push(
        `<text class="axis-label" x="${(x0 + x1) / 2}" y="${spec.height - 4}" text-anchor="middle">${spec.xLabel}</text>`,
    );
    parts.push(
        `<text class="axis-label" transform="rotate(-90 12 ${(y0 + y1) / 2})" x="12" y="${(y0 + y1) / 2}" text-anchor="middle">${spec.yLabel}</text>`,
    );
    return parts.join("");
}

export function bootstrap(doc: Document, api: Api, options: ConsoleOptions = {}): Console {
    return new Console(doc, api, options);
}
