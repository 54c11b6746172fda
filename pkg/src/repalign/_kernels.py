"""Numba kernels for cost-matrix construction and log-domain Sinkhorn passes.

The Sinkhorn state lives in exponent units: T_ij = exp(phi_i + psi_j +
rho * E_ij) where E = -cost * scale / eps is materialized once per solve and
rho rescales it during epsilon annealing. Row and column passes stream E once
per update; E is float32 on the align hot path (cost entries are data, so the
rounding is a fixed, negligible problem perturbation) and float64 on the
public path. Pass arithmetic is float64 either way.

Every kernel parallelizes over rows or column blocks with a fixed reduction
order inside each row/column, so results are deterministic for a fixed
thread count.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

_EXP_FLOOR = -46.0  # exp(-46) ~ 1e-20; truncated tails are far below tolerance


def configure_threads():
    """Apply the REPALIGN_THREADS cap, returning the active thread count."""
    env = os.environ.get("REPALIGN_THREADS")
    if env:
        try:
            want = max(1, int(env))
        except ValueError:
            want = 0
        if want:
            numba.set_num_threads(min(want, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


def thread_count():
    return numba.get_num_threads()


# ---------------------------------------------------------------------------
# cost entries


@njit(parallel=True, cache=True, fastmath=True)
def build_cost(a_rgb, a_d, a_px, a_py, b_rgb, b_d, b_px, b_py, alpha, beta, gamma, out):
    """Fill out[i, j] with the weighted channel distances; returns the sum."""
    n = a_rgb.shape[0]
    m = b_rgb.shape[0]
    total = 0.0
    for i in prange(n):
        r0 = a_rgb[i, 0]
        r1 = a_rgb[i, 1]
        r2 = a_rgb[i, 2]
        d = a_d[i]
        x = a_px[i]
        y = a_py[i]
        acc = 0.0
        for j in range(m):
            c0 = r0 - b_rgb[j, 0]
            c1 = r1 - b_rgb[j, 1]
            c2 = r2 - b_rgb[j, 2]
            c = alpha * np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
            c += beta * abs(d - b_d[j])
            dx = x - b_px[j]
            dy = y - b_py[j]
            c += gamma * np.sqrt(dx * dx + dy * dy)
            out[i, j] = c
            acc += c
        total += acc
    return total


@njit(parallel=True, cache=True, fastmath=True)
def build_exponent(a_rgb, a_d, a_px, a_py, b_rgb, b_d, b_px, b_py, alpha, beta, gamma,
                   minus_k, out):
    """Fill out[i, j] = minus_k * c_ij (the Sinkhorn exponent matrix)."""
    n = a_rgb.shape[0]
    m = b_rgb.shape[0]
    for i in prange(n):
        r0 = a_rgb[i, 0]
        r1 = a_rgb[i, 1]
        r2 = a_rgb[i, 2]
        d = a_d[i]
        x = a_px[i]
        y = a_py[i]
        for j in range(m):
            c0 = r0 - b_rgb[j, 0]
            c1 = r1 - b_rgb[j, 1]
            c2 = r2 - b_rgb[j, 2]
            c = alpha * np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
            c += beta * abs(d - b_d[j])
            dx = x - b_px[j]
            dy = y - b_py[j]
            c += gamma * np.sqrt(dx * dx + dy * dy)
            out[i, j] = minus_k * c
    return 0


@njit(parallel=True, cache=True, fastmath=True)
def rgb_distance_sum(a_rgb, b_rgb):
    """Sum of pairwise color distances, used by the decomposed cost mean."""
    n = a_rgb.shape[0]
    m = b_rgb.shape[0]
    total = 0.0
    for i in prange(n):
        r0 = a_rgb[i, 0]
        r1 = a_rgb[i, 1]
        r2 = a_rgb[i, 2]
        acc = 0.0
        for j in range(m):
            c0 = r0 - b_rgb[j, 0]
            c1 = r1 - b_rgb[j, 1]
            c2 = r2 - b_rgb[j, 2]
            acc += np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
        total += acc
    return total


@njit(parallel=True, cache=True, fastmath=True)
def pos_distance_sum(a_px, a_py, b_px, b_py):
    n = a_px.shape[0]
    m = b_px.shape[0]
    total = 0.0
    for i in prange(n):
        x = a_px[i]
        y = a_py[i]
        acc = 0.0
        for j in range(m):
            dx = x - b_px[j]
            dy = y - b_py[j]
            acc += np.sqrt(dx * dx + dy * dy)
        total += acc
    return total


# ---------------------------------------------------------------------------
# log-domain Sinkhorn passes over the exponent matrix


@njit(parallel=True, cache=True)
def row_pass(e_mat, rho, phi, psi, loga, new_phi, err, sigma):
    """Row update in exponent units.

    err[i] is the pre-update row-marginal deviation |sum_j T_ij - a|;
    sigma[i] is the argmax of row i of T under the updated psi (ties to the
    lowest index), which extract_assignment relies on.
    """
    n, m = e_mat.shape
    for i in prange(n):
        best = -np.inf
        for j in range(m):
            v = rho * np.float64(e_mat[i, j]) + psi[j]
            if v > best:
                best = v
        acc = 0.0
        bj = -1
        for j in range(m):
            v = rho * np.float64(e_mat[i, j]) + psi[j]
            if bj < 0 and v == best:
                bj = j
            e = v - best
            if e > _EXP_FLOOR:
                acc += np.exp(e)
        lse = best + np.log(acc)
        arg = phi[i] + lse
        if arg > 700.0:
            arg = 700.0
        err[i] = abs(np.exp(arg) - np.exp(loga))
        new_phi[i] = loga - lse
        sigma[i] = bj


@njit(parallel=True, cache=True)
def col_pass(e_mat, rho, phi, psi, logb, new_psi, err, blk_max, blk_sum):
    """Column update; blocked column-range traversal keeps reads row-major."""
    n, m = e_mat.shape
    nb = blk_max.shape[0]
    step = (m + nb - 1) // nb
    for blk in prange(nb):
        j0 = blk * step
        j1 = min(m, j0 + step)
        if j0 >= j1:
            continue
        mx = blk_max[blk]
        sm = blk_sum[blk]
        width = j1 - j0
        for k in range(width):
            mx[k] = -np.inf
            sm[k] = 0.0
        for i in range(n):
            fi = phi[i]
            for j in range(j0, j1):
                v = rho * np.float64(e_mat[i, j]) + fi
                k = j - j0
                if v > mx[k]:
                    mx[k] = v
        for i in range(n):
            fi = phi[i]
            for j in range(j0, j1):
                v = rho * np.float64(e_mat[i, j]) + fi
                k = j - j0
                e = v - mx[k]
                if e > _EXP_FLOOR:
                    sm[k] += np.exp(e)
        for j in range(j0, j1):
            k = j - j0
            lse = mx[k] + np.log(sm[k])
            arg = psi[j] + lse
            if arg > 700.0:
                arg = 700.0
            err[j] = abs(np.exp(arg) - np.exp(logb))
            new_psi[j] = logb - lse
