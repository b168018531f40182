/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demorun_free: (a: number, b: number) => void;
export const blendLabel: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const defaultSeed: () => number;
export const demorun_finished: (a: number) => number;
export const demorun_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const demorun_points: (a: number) => [number, number, number, number];
export const demorun_step: (a: number) => [number, number, number, number];
export const noiseTransition: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
