/* tslint:disable */
/* eslint-disable */

/**
 * A short synthetic clip (drifting sky gradient, sensor noise, one small
 * moving target) and its sparse residual after robust PCA.
 */
export class BackgroundDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Detections in frame `k` as a flat `[u0, v0, u1, v1, ...]`.
     */
    detections(k: number): Float64Array;
    /**
     * Row-major input frame.
     */
    frame(k: number): Float64Array;
    frame_count(): number;
    height(): number;
    iterations(): number;
    /**
     * `contrast` is the target's brightness step; negative for a dark
     * target against the sky.
     */
    constructor(seed: bigint, frame_count: number, contrast: number, noise: number);
    /**
     * Row-major sparse component of frame `k`.
     */
    sparse(k: number): Float64Array;
    width(): number;
}

/**
 * Minimum-cost assignment of a row-major `rows × cols` cost matrix.
 * Pairs costing more than `gate` are never made. Returns the column chosen
 * for each row, or -1.
 */
export function assign(costs: Float64Array, rows: number, cols: number, gate: number): Int32Array;

/**
 * Localize an emitter at `target` (x, y, z in metres) from receivers given
 * as flat `[x, y, z, ...]` triples. TDOAs are exact plus uniform timing
 * error of up to `jitter_ns`. With four or more receivers spherical
 * intersection is used; with three, the altitude-constrained ML fit with
 * the true altitude as prior.
 *
 * Returns `[x, y, z, method]`, method 0 for spherical intersection and 1
 * for the ML fit.
 */
export function localize(sensors: Float64Array, target: Float64Array, jitter_ns: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_backgrounddemo_free: (a: number, b: number) => void;
    readonly assign: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly backgrounddemo_detections: (a: number, b: number) => [number, number];
    readonly backgrounddemo_frame: (a: number, b: number) => [number, number];
    readonly backgrounddemo_frame_count: (a: number) => number;
    readonly backgrounddemo_height: (a: number) => number;
    readonly backgrounddemo_iterations: (a: number) => number;
    readonly backgrounddemo_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly backgrounddemo_sparse: (a: number, b: number) => [number, number];
    readonly backgrounddemo_width: (a: number) => number;
    readonly localize: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
