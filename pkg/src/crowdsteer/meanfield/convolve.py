"""Nonlocal interaction terms on the spatial grid.

Both the forward force (K * rho)(x) and the adjoint coupling term are
discrete correlations with the translation-invariant kernel grad(phi) sampled
at cell-center offsets:

    out(t) = sum_s K(t - s) . in(s) * dx^2

Evaluation is by direct summation over cell pairs via a strided window view
of the offset kernel (exact, no wrap-around).  An FFT path computing the same
zero-padded linear correlation is available for large grids; it matches the
direct sum to round-off and stays off unless requested.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..model import Array, PotentialParams, force_from_displacement
from .grid import PhaseGrid


def offset_kernel(p: PotentialParams, grid: PhaseGrid) -> Array:
    """grad(phi) at all inter-cell offsets, shape (2n-1, 2n-1, 2); zero at 0."""
    n = grid.n_x
    offs = grid.dx * np.arange(-(n - 1), n)
    d1, d2 = np.meshgrid(offs, offs, indexing="ij")
    delta = np.stack([d1, d2], axis=-1)
    return force_from_displacement(p, delta)


def _windows(kernel: Array, n: int) -> Array:
    # windows[a, b, k, c, d] = kernel[a + c, b + d, k]
    return sliding_window_view(kernel, (n, n), axis=(0, 1))


def convolve_force(rho: Array, kernel: Array, dx: float, method: str = "direct") -> Array:
    """(K * rho)(x) on the spatial grid: out[t] = sum_s K(t-s) rho(s) dx^2."""
    n = rho.shape[0]
    if method == "direct":
        win = _windows(kernel, n)
        flip = rho[::-1, ::-1]
        return np.einsum("abkcd,cd->abk", win, flip) * dx**2
    if method == "fft":
        return _fft_correlate(kernel, rho[..., None], n) * dx**2
    raise ValueError(f"unknown convolution method {method!r}")


def convolve_adjoint_source(w_field: Array, kernel: Array, dx: float,
                            method: str = "direct") -> Array:
    """Scalar field sum_s K(t-s) . W(s) dx^2 for a spatial vector field W."""
    n = w_field.shape[0]
    if method == "direct":
        win = _windows(kernel, n)
        flip = w_field[::-1, ::-1]
        return np.einsum("abkcd,cdk->ab", win, flip) * dx**2
    if method == "fft":
        return _fft_correlate(kernel, w_field, n).sum(axis=-1) * dx**2
    raise ValueError(f"unknown convolution method {method!r}")


def _fft_correlate(kernel: Array, field: Array, n: int) -> Array:
    """Zero-padded linear correlation, central n x n block, per component.

    kernel: (2n-1, 2n-1, K); field: (n, n, C).  Pairs component k of the
    kernel with component min(k, C-1) of the field (C == 1 broadcasts).
    """
    size = 3 * n - 2
    fk = np.fft.rfft2(kernel, s=(size, size), axes=(0, 1))
    ff = np.fft.rfft2(field, s=(size, size), axes=(0, 1))
    ncomp = kernel.shape[2]
    out = np.empty((n, n, ncomp))
    for k in range(ncomp):
        fc = k if field.shape[2] > 1 else 0
        full = np.fft.irfft2(fk[..., k] * ff[..., fc], s=(size, size))
        out[..., k] = full[n - 1: 2 * n - 1, n - 1: 2 * n - 1]
    return out


def agent_force_field(grid: PhaseGrid, agents: Array, p: PotentialParams) -> Array:
    """(1/M) sum_m grad(phi2)(x - d_m) at spatial cell centers, shape (n, n, 2)."""
    agents = np.atleast_2d(np.asarray(agents, dtype=float))
    x1, x2 = grid.spatial_mesh()
    centers = np.stack([x1, x2], axis=-1)  # (n, n, 2)
    delta = centers[:, :, None, :] - agents[None, None, :, :]  # (n, n, M, 2)
    return force_from_displacement(p, delta).sum(axis=2) / agents.shape[0]
