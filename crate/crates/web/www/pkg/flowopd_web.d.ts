/* tslint:disable */
/* eslint-disable */

/**
 * Row-major `n × n` reward grid over `[-extent, extent]²`, top row first.
 */
export function reward_field(task: string, component: number, n: number, extent: number): Float64Array;

/**
 * `n` SDE paths from noise to data as flat `[x, y]` points, `steps + 1`
 * per path. `component` < 0 samples the whole mixture.
 */
export function sample_paths(noise_level: number, steps: number, n: number, component: number, seed: bigint): Float64Array;

/**
 * Flat `[t, σ_t, w(t), …]` triples over an evaluation grid of `steps` steps.
 */
export function weight_curve(noise_level: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly reward_field: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly sample_paths: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly weight_curve: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
