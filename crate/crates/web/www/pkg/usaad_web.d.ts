/* tslint:disable */
/* eslint-disable */

export class BlurView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    blurred(): Uint8Array;
    kernel(): Uint8Array;
    sharp(): Uint8Array;
    readonly psnr: number;
    readonly size: number;
    readonly support: number;
}

export class Scores {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly nr_score: number;
    /**
     * `undefined` when the image is too small for PIQE.
     */
    readonly piqe: number | undefined;
}

/**
 * Attention weights for two equal-length descriptor vectors.
 */
export function attention(v_hi: Float64Array, v_lo: Float64Array): Float64Array;

/**
 * Blur a synthetic scene with a sampled camera-shake kernel.
 */
export function blur_scene(scene_seed: number, size: number, kernel_seed: number, kernel_size: number, intensity: number): BlurView;

/**
 * Side of the square kernel preview returned by [`BlurView::kernel`].
 */
export function kernel_view(): number;

/**
 * No-reference quality of canvas pixels (RGBA); lower is better.
 */
export function quality(rgba: Uint8Array, width: number, height: number): Scores;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_blurview_free: (a: number, b: number) => void;
    readonly __wbg_scores_free: (a: number, b: number) => void;
    readonly attention: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly blur_scene: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly blurview_blurred: (a: number) => [number, number];
    readonly blurview_kernel: (a: number) => [number, number];
    readonly blurview_psnr: (a: number) => number;
    readonly blurview_sharp: (a: number) => [number, number];
    readonly blurview_size: (a: number) => number;
    readonly blurview_support: (a: number) => number;
    readonly kernel_view: () => number;
    readonly quality: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scores_nr_score: (a: number) => number;
    readonly scores_piqe: (a: number) => [number, number];
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
