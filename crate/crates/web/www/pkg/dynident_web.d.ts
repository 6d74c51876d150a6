/* tslint:disable */
/* eslint-disable */

/**
 * Settles the pose under PD, then holds it open loop with the scaled
 * compensator. Returns the report as TOML.
 */
export function drift_check(q1: number, q2: number, q3: number, moment_scale: number, hold: number): string;

/**
 * Motor gravity torques at a pose of the first three joints.
 */
export function gravity_torque(q1: number, q2: number, q3: number): Float64Array;

/**
 * Position RMSE of joints 1 to 3 for pid, pid+gravity and pid+ctff, in that
 * order, over `duration` seconds of the sinusoidal test trajectory.
 */
export function tracking_rmse(duration: number, moment_scale: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly drift_check: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly gravity_torque: (a: number, b: number, c: number) => [number, number, number, number];
    readonly tracking_rmse: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
