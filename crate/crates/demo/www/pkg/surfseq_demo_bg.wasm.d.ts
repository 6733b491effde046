/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_viewer_free: (a: number, b: number) => void;
export const viewer_channels: (a: number) => [number, number];
export const viewer_face_patch: (a: number) => [number, number];
export const viewer_mpp_states: (a: number, b: bigint) => [number, number];
export const viewer_new: (a: number, b: number) => number;
export const viewer_order: (a: number) => number;
export const viewer_patch_count: (a: number) => number;
export const viewer_patch_order: (a: number) => number;
export const viewer_patch_size: (a: number) => number;
export const viewer_positions: (a: number) => [number, number];
export const viewer_rotated_field: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const viewer_triangles: (a: number) => [number, number];
export const viewer_vertex_count: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
