/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_backgrounddemo_free: (a: number, b: number) => void;
export const assign: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const backgrounddemo_detections: (a: number, b: number) => [number, number];
export const backgrounddemo_frame: (a: number, b: number) => [number, number];
export const backgrounddemo_frame_count: (a: number) => number;
export const backgrounddemo_height: (a: number) => number;
export const backgrounddemo_iterations: (a: number) => number;
export const backgrounddemo_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const backgrounddemo_sparse: (a: number, b: number) => [number, number];
export const backgrounddemo_width: (a: number) => number;
export const localize: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
