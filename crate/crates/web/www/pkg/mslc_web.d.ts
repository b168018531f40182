/* tslint:disable */
/* eslint-disable */

export class DemoRun {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `method` is `"mslc"` or `"ce"`.
     */
    constructor(method: string, noise_ratio: number, seed: number);
    /**
     * Flattened `[x0, x1, observed, corrected]` rows.
     */
    points(): Float64Array;
    /**
     * One epoch; returns the epoch record as JSON.
     */
    step(): string;
    readonly finished: boolean;
}

export function blendLabel(y: number, y_hat: Float64Array, y_prev: Float64Array, alpha: number, beta: number): string;

/**
 * Seed the page starts with.
 */
export function defaultSeed(): number;

export function noiseTransition(kind: string, ratio: number, classes: number, include_self: boolean, samples: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demorun_free: (a: number, b: number) => void;
    readonly blendLabel: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly defaultSeed: () => number;
    readonly demorun_finished: (a: number) => number;
    readonly demorun_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demorun_points: (a: number) => [number, number, number, number];
    readonly demorun_step: (a: number) => [number, number, number, number];
    readonly noiseTransition: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
