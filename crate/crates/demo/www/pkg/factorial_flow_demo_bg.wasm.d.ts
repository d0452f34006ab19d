/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demosession_free: (a: number, b: number) => void;
export const demosession_epochsDone: (a: number) => number;
export const demosession_labels: (a: number, b: number) => [number, number];
export const demosession_manipulate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demosession_new: (a: number, b: number, c: number) => [number, number, number];
export const demosession_projection: (a: number, b: number, c: number) => [number, number, number, number];
export const demosession_scores: (a: number, b: number, c: number) => [number, number, number, number];
export const demosession_testNll: (a: number) => [number, number, number];
export const demosession_train: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
