"""1-D transport kernels of the splitting scheme, with their exact adjoints.

Velocity space uses a conservative finite-volume update: van-Leer-limited
Lax-Wendroff-type face values integrated with a two-stage (Heun) step (the
single-stage variable-coefficient form is first order in time; the friction
part of the speed varies across cells).  Fluxes telescope, so interior mass
is conserved to round-off.

Spatial transport is semi-Lagrangian with constant displacement per velocity
cell: a flux-form remap equal to cubic Hermite interpolation (Catmull-Rom
tangents) of the cumulative mass differenced at displaced faces, which
reduces to a four-tap stencil with unit weight sum.  Interior transport is
conservative to round-off; cubic undershoot is clipped at zero with the
clipped amount debited from the positive cells of the same line.
Characteristics leaving the domain read zeros.

Every kernel has a hand-written vector-Jacobian product so the backward
solve can transpose the exact discrete forward map, limiter switches
included (differentiated almost everywhere).
"""

from __future__ import annotations

import numpy as np

from ..model import Array

_EPS_JUMP = 1e-300


def van_leer_limiter(r: Array) -> Array:
    return (r + np.abs(r)) / (1.0 + np.abs(r))


def limited_divergence(arr: Array, a: Array, dv: float) -> Array:
    """Flux divergence of the limited upwind face reconstruction (last axis).

    ``arr`` has n cells and ``a`` the speeds on the n + 1 faces; the face
    value is the upwind cell corrected by half the limited jump.
    """
    n = arr.shape[-1]
    padded = np.zeros(arr.shape[:-1] + (n + 4,))
    padded[..., 2:-2] = arr
    f_ll = padded[..., :-3]
    f_l = padded[..., 1:-2]
    f_r = padded[..., 2:-1]
    f_rr = padded[..., 3:]
    jump = f_r - f_l
    up = np.where(a >= 0, f_l - f_ll, f_rr - f_r)
    valid = np.abs(jump) > _EPS_JUMP
    ratio = np.where(valid, up / np.where(valid, jump, 1.0), 0.0)
    flux = np.maximum(a, 0.0) * f_l + np.minimum(a, 0.0) * f_r
    flux += 0.5 * np.abs(a) * van_leer_limiter(ratio) * jump
    return (flux[..., 1:] - flux[..., :-1]) / dv


def limited_divergence_vjp(arr: Array, a: Array, dv: float,
                           cot: Array) -> tuple[Array, Array]:
    """Cotangents of :func:`limited_divergence` wrt the field and the speeds."""
    n = arr.shape[-1]
    padded = np.zeros(arr.shape[:-1] + (n + 4,))
    padded[..., 2:-2] = arr
    f_ll = padded[..., :-3]
    f_l = padded[..., 1:-2]
    f_r = padded[..., 2:-1]
    f_rr = padded[..., 3:]
    jump = f_r - f_l
    pos = a >= 0
    up = np.where(pos, f_l - f_ll, f_rr - f_r)
    valid = np.abs(jump) > _EPS_JUMP
    safe_jump = np.where(valid, jump, 1.0)
    ratio = np.where(valid, up / safe_jump, 0.0)
    phi = van_leer_limiter(ratio)
    abs_a = np.abs(a)

    flux_cot = np.zeros(arr.shape[:-1] + (n + 1,))
    flux_cot[..., 1:] += cot / dv
    flux_cot[..., :-1] -= cot / dv

    cot_fl = np.where(pos, a, 0.0) * flux_cot
    cot_fr = np.where(pos, 0.0, a) * flux_cot
    anti = 0.5 * abs_a * flux_cot
    cot_jump = anti * phi
    dphi = np.where(ratio > 0.0, 2.0 / (1.0 + np.abs(ratio)) ** 2, 0.0)
    cot_ratio = anti * dphi * jump
    cot_up = np.where(valid, cot_ratio / safe_jump, 0.0)
    cot_jump += np.where(valid, -cot_ratio * up / safe_jump**2, 0.0)
    cot_fr += cot_jump
    cot_fl -= cot_jump
    cot_fll = np.where(pos, -cot_up, 0.0)
    cot_fl += np.where(pos, cot_up, 0.0)
    cot_frr = np.where(pos, 0.0, cot_up)
    cot_fr -= np.where(pos, 0.0, cot_up)

    cot_a = flux_cot * (np.where(pos, f_l, f_r) + 0.5 * np.sign(a) * phi * jump)

    cot_padded = np.zeros_like(padded)
    cot_padded[..., :-3] += cot_fll
    cot_padded[..., 1:-2] += cot_fl
    cot_padded[..., 2:-1] += cot_fr
    cot_padded[..., 3:] += cot_frr
    return cot_padded[..., 2:-2], cot_a


def heun_sweep(arr: Array, a: Array, delta: float, dv: float) -> Array:
    """Two-stage update of the limited divergence along the last axis."""
    d0 = limited_divergence(arr, a, dv)
    stage = arr - delta * d0
    d1 = limited_divergence(stage, a, dv)
    return arr - 0.5 * delta * (d0 + d1)


def heun_sweep_vjp(arr: Array, a: Array, delta: float, dv: float,
                   cot: Array) -> tuple[Array, Array]:
    d0 = limited_divergence(arr, a, dv)
    stage = arr - delta * d0
    cot_arr = cot.copy()
    cot_stage, cot_a = limited_divergence_vjp(stage, a, dv, -0.5 * delta * cot)
    cot_arr += cot_stage
    back, cot_a2 = limited_divergence_vjp(arr, a, dv,
                                          -delta * cot_stage - 0.5 * delta * cot)
    cot_arr += back
    return cot_arr, cot_a + cot_a2


def sweep_velocity(f: Array, axis: int, face_speeds: Array, dt: float, dv: float,
                   chunk: int = 0) -> Array:
    """One conservative limited update along ``axis``; see :func:`heun_sweep`.

    Requires max|a| dt / dv <= 1/2 (the caller subcycles below that); the
    optional chunking bounds temporary memory on big grids.
    """
    if chunk and f.shape[0] > chunk:
        out = np.empty_like(f)
        for lo in range(0, f.shape[0], chunk):
            hi = min(lo + chunk, f.shape[0])
            speeds = face_speeds[lo:hi] if face_speeds.shape[0] == f.shape[0] else face_speeds
            out[lo:hi] = sweep_velocity(f[lo:hi], axis, speeds, dt, dv)
        return out
    arr = np.moveaxis(f, axis, -1)
    a = np.moveaxis(face_speeds, axis, -1)
    return np.moveaxis(heun_sweep(arr, a, dt, dv), -1, axis)


def fir_taps(offset: float) -> tuple[int, Array]:
    """Base index and four-tap weights of the constant-offset mass remap.

    Derived by differencing the cubic Hermite interpolant of the cumulative
    mass at faces displaced by ``offset`` cells; the weights sum to one.
    """
    base = int(np.floor(-offset))
    theta = float(-offset - base)
    t2, t3 = theta * theta, theta**3
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + theta
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    coeffs = np.array([-0.5 * h10, h00 - 0.5 * h11, h01 + 0.5 * h10, 0.5 * h11])
    return base, coeffs


def tap_last(arr: Array, k: int) -> Array:
    """arr indexed at i + k along the last axis, zero outside."""
    n = arr.shape[-1]
    out = np.zeros_like(arr)
    if k >= n or k <= -n:
        return out
    if k >= 0:
        out[..., : n - k] = arr[..., k:]
    else:
        out[..., -k:] = arr[..., : n + k]
    return out


def remap_fir(arr: Array, offset: float) -> Array:
    """Raw conservative shift along the last axis (may undershoot)."""
    base, coeffs = fir_taps(offset)
    out = np.zeros_like(arr)
    for k in range(4):
        out += coeffs[k] * tap_last(arr, base + k - 1)
    return out


def repair_negatives(raw: Array) -> Array:
    """Clip negatives at zero, debiting the clipped mass within each line."""
    if not (raw < 0.0).any():
        return raw
    positive = np.maximum(raw, 0.0)
    raw_sum = raw.sum(axis=-1, keepdims=True)
    pos_sum = positive.sum(axis=-1, keepdims=True)
    scale = np.divide(np.maximum(raw_sum, 0.0), pos_sum,
                      out=np.zeros_like(pos_sum), where=pos_sum > 0.0)
    return positive * scale


def repair_negatives_vjp(raw: Array, cot: Array) -> Array:
    if not (raw < 0.0).any():
        return cot
    chi = raw > 0.0
    positive = np.where(chi, raw, 0.0)
    raw_sum = raw.sum(axis=-1, keepdims=True)
    pos_sum = positive.sum(axis=-1, keepdims=True)
    ok = (pos_sum > 0.0) & (raw_sum > 0.0)
    inv_pos = np.divide(1.0, pos_sum, out=np.zeros_like(pos_sum), where=pos_sum > 0.0)
    scale = np.where(ok, raw_sum * inv_pos, 0.0)
    weighted = (cot * positive).sum(axis=-1, keepdims=True)
    out = np.where(chi, cot * scale - weighted * scale * inv_pos, 0.0)
    out += np.where(ok, weighted * inv_pos, 0.0)
    return out


def remap_axis_vjp(arr: Array, offset: float, cot: Array) -> Array:
    """Cotangent through repair(remap_fir(arr)) along the last axis."""
    raw = remap_fir(arr, offset)
    cot_raw = repair_negatives_vjp(raw, cot)
    base, coeffs = fir_taps(offset)
    out = np.zeros_like(cot_raw)
    for k in range(4):
        out += coeffs[k] * tap_last(cot_raw, -(base + k - 1))
    return out


def conservative_shift(arr: Array, offset: float, axis: int) -> tuple[Array, float, float]:
    """Repaired conservative shift along ``axis``.

    Returns (shifted, boundary_outflow, clipped_mass) with the floats in
    value-sum units.
    """
    work = np.moveaxis(arr, axis, -1)
    raw = remap_fir(work, offset)
    outflow = float(work.sum() - raw.sum())
    out = repair_negatives(raw)
    clipped = float(-np.minimum(raw, 0.0).sum())
    return np.moveaxis(out, -1, axis), outflow, clipped


def catmull_rom_weights(theta: float) -> tuple[float, float, float, float]:
    t, t2, t3 = theta, theta * theta, theta**3
    return (
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    )


def _tap(arr: Array, k: int, axis: int) -> Array:
    work = np.moveaxis(arr, axis, -1)
    return np.moveaxis(tap_last(work, k), -1, axis)


def shift_interpolate(arr: Array, offset: float, axis: int,
                      clamp: bool = True) -> tuple[Array, float]:
    """Pointwise Catmull-Rom sampling of ``arr`` at index - offset.

    The quasi-monotone clamp keeps values inside the bracketing cell range;
    the returned float is the net value-sum change it introduced.  Used for
    signed fields where flux-form conservation is not meaningful.
    """
    base = int(np.floor(-offset))
    theta = float(-offset - base)
    if theta == 0.0:
        return _tap(arr, base, axis), 0.0
    w_m1, w_0, w_1, w_2 = catmull_rom_weights(theta)
    lo_cell = _tap(arr, base, axis)
    hi_cell = _tap(arr, base + 1, axis)
    raw = (
        w_m1 * _tap(arr, base - 1, axis)
        + w_0 * lo_cell
        + w_1 * hi_cell
        + w_2 * _tap(arr, base + 2, axis)
    )
    if not clamp:
        return raw, 0.0
    lo = np.minimum(lo_cell, hi_cell)
    hi = np.maximum(lo_cell, hi_cell)
    clamped = np.clip(raw, lo, hi)
    return clamped, float(clamped.sum() - raw.sum())
