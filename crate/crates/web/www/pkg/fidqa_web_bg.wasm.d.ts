/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_explorer_free: (a: number, b: number) => void;
export const explorer_fromJsonl: (a: number, b: number) => [number, number, number];
export const explorer_new: (a: number, b: bigint) => [number, number, number];
export const explorer_search: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const explorer_size: (a: number) => number;
export const recallCurve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: bigint) => [number, number, number, number];
export const scoreAnswer: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
