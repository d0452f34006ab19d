/* tslint:disable */
/* eslint-disable */

export class DemoSession {
    free(): void;
    [Symbol.dispose](): void;
    epochsDone(): number;
    labels(factor: number): Uint32Array;
    manipulate(factor: string, from: number, to: number): Float64Array;
    /**
     * `regime` is `nf`, `dnf` or `fdnf`.
     */
    constructor(seed: number, regime: string);
    projection(space: string): Float64Array;
    /**
     * `[target_before, target_after, other_before, other_after]`.
     */
    scores(factor: string): Float64Array;
    testNll(): number;
    train(epochs: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demosession_free: (a: number, b: number) => void;
    readonly demosession_epochsDone: (a: number) => number;
    readonly demosession_labels: (a: number, b: number) => [number, number];
    readonly demosession_manipulate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demosession_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demosession_projection: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demosession_scores: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demosession_testNll: (a: number) => [number, number, number];
    readonly demosession_train: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
