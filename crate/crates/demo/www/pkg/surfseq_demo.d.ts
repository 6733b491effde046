/* tslint:disable */
/* eslint-disable */

export class Viewer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Names of the synthetic channels, comma separated.
     */
    channels(): string;
    /**
     * The patch each face belongs to.
     */
    face_patch(): Uint32Array;
    /**
     * Corruption state of every patch for one MPP draw.
     */
    mpp_states(seed: bigint): Uint8Array;
    /**
     * Grid of order `order` (at most 5) cut into patches from the faces of
     * an order-`patch_order` icosphere (below `order`).
     */
    constructor(order: number, patch_order: number);
    order(): number;
    patch_count(): number;
    patch_order(): number;
    patch_size(): number;
    /**
     * Vertex coordinates, xyz interleaved.
     */
    positions(): Float32Array;
    /**
     * One synthetic channel rotated about `axis` ("x", "y" or "z") by
     * `degrees` and resampled back onto the grid. An unknown axis or
     * channel leaves the field unrotated or picks channel 0.
     */
    rotated_field(channel: number, axis: string, degrees: number): Float32Array;
    /**
     * Triangle corner indices, three per face.
     */
    triangles(): Uint32Array;
    vertex_count(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_viewer_free: (a: number, b: number) => void;
    readonly viewer_channels: (a: number) => [number, number];
    readonly viewer_face_patch: (a: number) => [number, number];
    readonly viewer_mpp_states: (a: number, b: bigint) => [number, number];
    readonly viewer_new: (a: number, b: number) => number;
    readonly viewer_order: (a: number) => number;
    readonly viewer_patch_count: (a: number) => number;
    readonly viewer_patch_order: (a: number) => number;
    readonly viewer_patch_size: (a: number) => number;
    readonly viewer_positions: (a: number) => [number, number];
    readonly viewer_rotated_field: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly viewer_triangles: (a: number) => [number, number];
    readonly viewer_vertex_count: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
