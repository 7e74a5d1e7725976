/* tslint:disable */
/* eslint-disable */

/**
 * Farthest-point sampling order over flat `x y z` triples.
 */
export function fps_order(xyz: Float64Array, k: number): Uint32Array;

/**
 * Angular-margin loss of one unit descriptor against two unit class
 * columns, with the true class at cosine `cos_true` and the other at
 * `cos_other`, for each margin in `margins`.
 */
export function margin_curve(cos_true: number, cos_other: number, scale: number, margins: Float64Array): Float64Array;

/**
 * Depth images of a synthetic shape: `views × resolution × resolution`
 * values in [0, 1], view-major.
 */
export function render_shape(shape: string, views: number, resolution: number, seed: bigint): Float64Array;

/**
 * A synthetic cloud of `points` points as flat `x y z` triples.
 */
export function shape_cloud(shape: string, points: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly fps_order: (a: number, b: number, c: number) => [number, number, number, number];
    readonly margin_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly render_shape: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly shape_cloud: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
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
