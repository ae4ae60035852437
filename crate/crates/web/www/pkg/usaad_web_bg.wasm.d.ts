/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_blurview_free: (a: number, b: number) => void;
export const __wbg_scores_free: (a: number, b: number) => void;
export const attention: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const blur_scene: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const blurview_blurred: (a: number) => [number, number];
export const blurview_kernel: (a: number) => [number, number];
export const blurview_psnr: (a: number) => number;
export const blurview_sharp: (a: number) => [number, number];
export const blurview_size: (a: number) => number;
export const blurview_support: (a: number) => number;
export const kernel_view: () => number;
export const quality: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scores_nr_score: (a: number) => number;
export const scores_piqe: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
