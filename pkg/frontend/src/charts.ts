// Pure chart geometry: each builder turns one service payload into SVG
// path data and tick positions.  Nothing here rescans or refits the
// numbers; curves are drawn point for point as the service sent them,
// and reference lines sit at service-reported values.

import { InfoGainCurve, PosteriorCurve, TracePoint } from "./api.js";

export interface Tick {
    pos: number;
    label: string;
}

export interface ChartSpec {
    width: number;
    height: number;
    line: string;
    band: string | null;
    // x position of a vertical reference line, if the chart has one.
    rule: number | null;
    marker: { x: number; y: number } | null;
    xTicks: Tick[];
    yTicks: Tick[];
    xLabel: string;
    yLabel: string;
}

export const MARGIN = { left: 52, right: 12, top: 10, bottom: 30 };

export type Scale = (value: number) => number;

export function linearScale(lo: number, hi: number, outLo: number, outHi: number): Scale {
    if (hi === lo) {
        const pad = lo === 0 ? 1 : Math.abs(lo) * 0.05;
        lo -= pad;
        hi += pad;
    }
    const slope = (outHi - outLo) / (hi - lo);
    return value => outLo + (value - lo) * slope;
}

export function logScale(lo: number, hi: number, outLo: number, outHi: number): Scale {
    const inner = linearScale(Math.log10(lo), Math.log10(hi), outLo, outHi);
    return value => inner(Math.log10(value));
}

// Tick values at 1/2/5 steps covering [lo, hi].
export function linearTicks(lo: number, hi: number, target = 5): number[] {
    if (!(hi > lo)) {
        return [lo];
    }
    const rawStep = (hi - lo) / target;
    const magnitude = Math.pow(10, Math.floor(Math.log10(rawStep)));
    let step = magnitude * 10;
    for (const unit of [1, 2, 5]) {
        if (unit * magnitude >= rawStep) {
            step = unit * magnitude;
            break;
        }
    }
    const ticks: number[] = [];
    for (let v = Math.ceil(lo / step) * step; v <= hi + step * 1e-9; v += step) {
        ticks.push(Math.abs(v) < step * 1e-9 ? 0 : v);
    }
    return ticks;
}

// Decade ticks, with 2 and 5 filled in when the span is short.
export function logTicks(lo: number, hi: number): number[] {
    const ticks: number[] = [];
    const decades = Math.log10(hi / lo);
    const mantissas = decades > 2.5 ? [1] : [1, 2, 5];
    for (let exp = Math.floor(Math.log10(lo)); exp <= Math.ceil(Math.log10(hi)); exp++) {
        for (const m of mantissas) {
            const v = m * Math.pow(10, exp);
            if (v >= lo * 0.999 && v <= hi * 1.001) {
                ticks.push(v);
            }
        }
    }
    return ticks;
}

export function fmt(value: number): string {
    if (value === 0) {
        return "0";
    }
    return String(Number(value.toPrecision(4)));
}

export function linePath(xs: number[], ys: number[], sx: Scale, sy: Scale): string {
    const parts: string[] = [];
    for (let i = 0; i < xs.length; i++) {
        const cmd = i === 0 ? "M" : "L";
        parts.push(`${cmd}${round(sx(xs[i]!))},${round(sy(ys[i]!))}`);
    }
    return parts.join(" ");
}

// Closed region between two curves: along the upper edge, back along the
// lower one.
export function bandPath(xs: number[], lows: number[], highs: number[], sx: Scale, sy: Scale): string {
    const parts: string[] = [];
    for (let i = 0; i < xs.length; i++) {
        const cmd = i === 0 ? "M" : "L";
        parts.push(`${cmd}${round(sx(xs[i]!))},${round(sy(highs[i]!))}`);
    }
    for (let i = xs.length - 1; i >= 0; i--) {
        parts.push(`L${round(sx(xs[i]!))},${round(sy(lows[i]!))}`);
    }
    return parts.join(" ") + " Z";
}

// Path coordinates carry two decimals: enough for crisp lines, short
// enough to keep a 256-point path a few kilobytes.
function round(value: number): number {
    return Math.round(value * 100) / 100;
}

function frame(width: number, height: number) {
    return {
        x0: MARGIN.left,
        x1: width - MARGIN.right,
        y0: height - MARGIN.bottom,
        y1: MARGIN.top,
    };
}

function emptySpec(width: number, height: number, xLabel: string, yLabel: string): ChartSpec {
    return {
        width: width,
        height: height,
        line: "",
        band: null,
        rule: null,
        marker: null,
        xTicks: [],
        yTicks: [],
        xLabel: xLabel,
        yLabel: yLabel,
    };
}

// Posterior density over temperature.  The grid is log-spaced, so the x
// axis is logarithmic; the reference line marks the service's estimate.
export function posteriorChart(curve: PosteriorCurve, estimateUk: number, width = 440, height = 240): ChartSpec {
    const xLabel = "temperature (µK)";
    const yLabel = "posterior density (1/µK)";
    if (curve.theta_uk.length === 0) {
        return emptySpec(width, height, xLabel, yLabel);
    }
    const f = frame(width, height);
    const lo = curve.theta_uk[0]!;
    const hi = curve.theta_uk[curve.theta_uk.length - 1]!;
    const top = Math.max(...curve.density);
    const sx = logScale(lo, hi, f.x0, f.x1);
    const sy = linearScale(0, top > 0 ? top : 1, f.y0, f.y1);
    return {
        width: width,
        height: height,
        line: linePath(curve.theta_uk, curve.density, sx, sy),
        band: null,
        rule: round(sx(estimateUk)),
        marker: null,
        xTicks: logTicks(lo, hi).map(v => ({ pos: round(sx(v)), label: fmt(v) })),
        yTicks: linearTicks(0, top > 0 ? top : 1, 4).map(v => ({ pos: round(sy(v)), label: fmt(v) })),
        xLabel: xLabel,
        yLabel: yLabel,
    };
}

// Estimate against shot number, banded by the reported error bar.
export function estimateChart(trace: TracePoint[], width = 440, height = 240): ChartSpec {
    const xLabel = "shots";
    const yLabel = "estimate (µK)";
    if (trace.length === 0) {
        return emptySpec(width, height, xLabel, yLabel);
    }
    const f = frame(width, height);
    const shots = trace.map((_, i) => i + 1);
    const mids = trace.map(p => p.temperature_uk);
    const lows = trace.map(p => p.temperature_uk - p.error_uk);
    const highs = trace.map(p => p.temperature_uk + p.error_uk);
    const sx = linearScale(1, Math.max(shots.length, 2), f.x0, f.x1);
    const sy = linearScale(Math.min(...lows), Math.max(...highs), f.y0, f.y1);
    const last = trace[trace.length - 1]!;
    return {
        width: width,
        height: height,
        line: linePath(shots, mids, sx, sy),
        band: bandPath(shots, lows, highs, sx, sy),
        rule: null,
        marker: { x: round(sx(shots.length)), y: round(sy(last.temperature_uk)) },
        xTicks: linearTicks(1, Math.max(shots.length, 2), 6).map(v => ({ pos: round(sx(v)), label: fmt(v) })),
        yTicks: linearTicks(Math.min(...lows), Math.max(...highs), 4).map(v => ({ pos: round(sy(v)), label: fmt(v) })),
        xLabel: xLabel,
        yLabel: yLabel,
    };
}

// Expected gain of the next shot at each candidate release time; the
// reference line sits at the service's recommended time.
export function infoGainChart(curve: InfoGainCurve, width = 440, height = 240): ChartSpec {
    const xLabel = "release time (µs)";
    const yLabel = "expected gain";
    if (curve.t_us.length === 0) {
        return emptySpec(width, height, xLabel, yLabel);
    }
    const f = frame(width, height);
    const lo = curve.t_us[0]!;
    const hi = curve.t_us[curve.t_us.length - 1]!;
    const top = Math.max(...curve.gain);
    const sx = linearScale(lo, hi, f.x0, f.x1);
    const sy = linearScale(0, top > 0 ? top : 1, f.y0, f.y1);
    let bestIndex = curve.t_us.indexOf(curve.best_time_us);
    if (bestIndex < 0) {
        bestIndex = nearestIndex(curve.t_us, curve.best_time_us);
    }
    return {
        width: width,
        height: height,
        line: linePath(curve.t_us, curve.gain, sx, sy),
        band: null,
        rule: round(sx(curve.best_time_us)),
        marker: { x: round(sx(curve.best_time_us)), y: round(sy(curve.gain[bestIndex]!)) },
        xTicks: linearTicks(lo, hi, 5).map(v => ({ pos: round(sx(v)), label: fmt(v) })),
        yTicks: linearTicks(0, top > 0 ? top : 1, 4).map(v => ({ pos: round(sy(v)), label: fmt(v) })),
        xLabel: xLabel,
        yLabel: yLabel,
    };
}

function nearestIndex(values: number[], target: number): number {
    let best = 0;
    for (let i = 1; i < values.length; i++) {
        if (Math.abs(values[i]! - target) < Math.abs(values[best]! - target)) {
            best = i;
        }
    }
    return best;
}
