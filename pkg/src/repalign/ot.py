"""Long-range appearance matching: multi-channel cost matrix, entropic optimal
transport via log-domain Sinkhorn, one-to-one assignment extraction, the
matched-cost appearance loss, and its gradient through frozen assignments.

Cost entries combine color, depth, and normalized screen position:

    c_ij = alpha * |rgb_i - rgb_ref_j|_2
         + beta  * |depth_i - depth_ref_j|_2
         + gamma * |pos_i - pos_j|_2

Rendered and reference buffers are box-downsampled to the OT grid first.
Positions are grid coordinates normalized per axis so opposite grid corners
sit at 0 and 1 (adjacent cells of a 2x2 grid are at distance 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .raster import GBuffer
from .scene import LayoutGradient

HUNGARIAN_CAP = 256
DEFAULT_OT_RES = 64
DEFAULT_EPSILON = 0.01
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6
_STALL_WINDOW = 25
_STALL_RATIO = 0.995


class TransportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# OT-grid cell buffers


@dataclass
class CellBuffers:
    """Downsampled per-cell rgb/depth plus normalized grid positions."""

    rgb: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,)
    pos: np.ndarray  # (N, 2), normalized to [0, 1] per axis
    grid: tuple  # (rows, cols)

    @property
    def count(self):
        return len(self.rgb)


def grid_positions(rows, cols):
    """Normalized cell positions: x = col/(cols-1), y = row/(rows-1); a
    degenerate axis collapses to 0.5."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = cc / (cols - 1) if cols > 1 else np.full_like(cc, 0.5, dtype=np.float64)
    y = rr / (rows - 1) if rows > 1 else np.full_like(rr, 0.5, dtype=np.float64)
    return np.stack([x.reshape(-1), y.reshape(-1)], axis=1).astype(np.float64)


def downsample_cells(rgb, depth, ot_res=None):
    """Box-average image buffers onto the OT grid.

    ot_res None keeps the pixel grid as-is; otherwise both image dimensions
    must be divisible by ot_res.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    h, w = rgb.shape[:2]
    if depth.shape != (h, w):
        raise TransportError(f"depth shape {depth.shape} does not match rgb {(h, w)}")
    if ot_res is None or (h == ot_res and w == ot_res):
        gh, gw = h, w
        cell_rgb = rgb.reshape(-1, 3)
        cell_depth = depth.reshape(-1)
    else:
        gh = gw = int(ot_res)
        if gh < 2:
            raise TransportError("OT resolution must be at least 2")
        if h % gh or w % gw:
            raise TransportError(
                f"resolution {w}x{h} is not divisible by the OT grid {gw}x{gh}"
            )
        bh, bw = h // gh, w // gw
        cell_rgb = rgb.reshape(gh, bh, gw, bw, 3).mean(axis=(1, 3)).reshape(-1, 3)
        cell_depth = depth.reshape(gh, bh, gw, bw).mean(axis=(1, 3)).reshape(-1)
    return CellBuffers(
        rgb=cell_rgb, depth=cell_depth, pos=grid_positions(gh, gw), grid=(gh, gw)
    )


def _render_buffers(render):
    if isinstance(render, GBuffer):
        return render.rgb, render.depth
    rgb, depth = render
    return np.asarray(rgb, dtype=np.float64), np.asarray(depth, dtype=np.float64)


# ---------------------------------------------------------------------------
# cost matrix


@dataclass
class CostMatrix:
    """Dense nonnegative transport costs plus the channel weights that built
    them."""

    c: np.ndarray  # (N, N)
    n: int
    channels: tuple  # (alpha, beta, gamma)

    def __post_init__(self):
        self.c = np.asarray(self.c)
        if self.c.ndim != 2:
            raise TransportError(f"cost matrix must be 2-d, got {self.c.shape}")
        if not np.isfinite(self.c).all():
            raise TransportError("cost matrix contains non-finite entries")
        if (self.c < 0).any():
            raise TransportError("cost matrix contains negative entries")

    @property
    def shape(self):
        return self.c.shape


def build_cost_matrix(
    render,
    reference,
    hp,
    ot_res=DEFAULT_OT_RES,
    dtype=np.float64,
    max_bytes=2**31,
):
    """Assemble the weighted channel-distance matrix between the rendered and
    reference buffers, both box-downsampled to the OT grid.

    render is a GBuffer or an (rgb, depth) pair; reference is an (rgb, depth)
    pair at the same resolution. hp supplies (alpha, beta, gamma).
    """
    r_rgb, r_depth = _render_buffers(render)
    t_rgb, t_depth = _render_buffers(reference)
    if r_rgb.shape != t_rgb.shape or r_depth.shape != t_depth.shape:
        raise TransportError(
            f"render {r_rgb.shape} and reference {t_rgb.shape} resolutions differ"
        )
    cells_r = downsample_cells(r_rgb, r_depth, ot_res)
    cells_t = downsample_cells(t_rgb, t_depth, ot_res)
    n = cells_r.count
    need = n * n * np.dtype(dtype).itemsize
    if need > max_bytes:
        raise TransportError(
            f"cost matrix of {n}x{n} {np.dtype(dtype).name} needs {need} bytes "
            f"(cap {max_bytes})"
        )
    out = np.empty((n, n), dtype=dtype)
    _kernels.build_cost(
        cells_r.rgb, cells_r.depth, cells_r.pos[:, 0], cells_r.pos[:, 1],
        cells_t.rgb, cells_t.depth, cells_t.pos[:, 0], cells_t.pos[:, 1],
        float(hp.alpha), float(hp.beta), float(hp.gamma), out,
    )
    return CostMatrix(c=out, n=n, channels=(hp.alpha, hp.beta, hp.gamma))


def matched_cost(cells_r, cells_t, sigma, weights):
    """Mean matched cost (1/N) sum_i c_{i, sigma(i)} evaluated directly from
    cell buffers in float64."""
    alpha, beta, gamma = weights
    idx = np.asarray(sigma, dtype=np.int64)
    d_rgb = np.linalg.norm(cells_r.rgb - cells_t.rgb[idx], axis=1)
    d_dep = np.abs(cells_r.depth - cells_t.depth[idx])
    d_pos = np.linalg.norm(cells_r.pos - cells_t.pos[idx], axis=1)
    return float(np.mean(alpha * d_rgb + beta * d_dep + gamma * d_pos))


# ---------------------------------------------------------------------------
# Sinkhorn


@dataclass
class TransportPlan:
    """Entropic transport plan in potential form: T = exp((f + g - C)/eps).

    marginal_error is the exact max row/column-sum deviation from the uniform
    marginal measured on the returned potentials; converged reports whether it
    is below the requested tolerance. T materializes the dense plan on demand.
    """

    epsilon: float
    iterations_run: int
    converged: bool
    marginal_error: float
    f: np.ndarray
    g: np.ndarray
    cost: np.ndarray = field(repr=False)
    objective_trace: list | None = None
    _t_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.f)

    @property
    def T(self):
        if self._t_cache is None:
            a = (self.f[:, None] + self.g[None, :] - self.cost) / self.epsilon
            self._t_cache = np.exp(a)
        return self._t_cache

    def marginals(self):
        t = self.T
        return t.sum(axis=1), t.sum(axis=0)


def _primal_dual_objective(cost, f, g, eps, n, m):
    t = np.exp((f[:, None] + g[None, :] - cost) / eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(t > 0.0, t * (np.log(t) - 1.0), 0.0)
    primal = float((t * cost).sum() + eps * ent.sum())
    dual = float(f.sum() / n + g.sum() / m - eps * t.sum())
    return primal, dual


class _MatrixProblem:
    """Kernel adapter for a materialized cost matrix (scale premultiplied)."""

    def __init__(self, cost, scale):
        self.cost = cost
        self.scale = float(scale)
        n, m = cost.shape
        self.n, self.m = n, m
        nt = _kernels.thread_count()
        self._scratch = np.empty((nt, m), dtype=cost.dtype)
        nb = nt * 4
        step = (m + nb - 1) // nb
        self._blk_max = np.empty((nb, step), dtype=cost.dtype)
        self._blk_sum = np.empty((nb, step), dtype=np.float64)
        self._sigma = np.empty(n, dtype=np.int64)

    def row_pass(self, f, g, inv_eps, loga, new_f, err):
        _kernels.row_pass_matrix(
            self.cost, self.scale, inv_eps, f, g, loga, new_f, err,
            self._sigma, self._scratch,
        )

    def col_pass(self, f, g, inv_eps, logb, new_g, err):
        _kernels.col_pass_matrix(
            self.cost, self.scale, inv_eps, f, g, logb, new_g, err,
            self._blk_max, self._blk_sum,
        )

    @property
    def sigma(self):
        return self._sigma


class _FusedProblem:
    """Kernel adapter recomputing cost entries from float32 cell buffers."""

    def __init__(self, cells_r, cells_t, weights, scale):
        self.scale = float(scale)
        self.weights = tuple(float(w) for w in weights)
        self._a = tuple(
            np.ascontiguousarray(arr, dtype=np.float32)
            for arr in (cells_r.rgb, cells_r.depth, cells_r.pos[:, 0], cells_r.pos[:, 1])
        )
        self._b = tuple(
            np.ascontiguousarray(arr, dtype=np.float32)
            for arr in (cells_t.rgb, cells_t.depth, cells_t.pos[:, 0], cells_t.pos[:, 1])
        )
        self.n = cells_r.count
        self.m = cells_t.count
        nt = _kernels.thread_count()
        self._scratch = np.empty((nt, self.m), dtype=np.float32)
        nb = nt * 4
        step = (self.m + nb - 1) // nb
        self._blk_max = np.empty((nb, step), dtype=np.float32)
        self._blk_sum = np.empty((nb, step), dtype=np.float64)
        self._sigma = np.empty(self.n, dtype=np.int64)

    def row_pass(self, f, g, inv_eps, loga, new_f, err):
        alpha, beta, gamma = self.weights
        _kernels.row_pass_fused(
            *self._a, *self._b,
            np.float32(alpha), np.float32(beta), np.float32(gamma),
            np.float32(self.scale), np.float32(inv_eps),
            f, g.astype(np.float32), loga, new_f, err, self._sigma, self._scratch,
        )

    def col_pass(self, f, g, inv_eps, logb, new_g, err):
        alpha, beta, gamma = self.weights
        _kernels.col_pass_fused(
            *self._a, *self._b,
            np.float32(alpha), np.float32(beta), np.float32(gamma),
            np.float32(self.scale), np.float32(inv_eps),
            f.astype(np.float32), g, logb, new_g, err, self._blk_max, self._blk_sum,
        )

    @property
    def sigma(self):
        return self._sigma


@dataclass
class _LoopResult:
    f: np.ndarray
    g: np.ndarray
    iterations: int
    loop_error: float
    sigma: np.ndarray


def _sinkhorn_loop(problem, epsilon, max_iters, tol, warm_start, anneal_from, objective_cb=None):
    """Alternating column/row log-domain updates until the pre-update marginal
    deviation drops below tol, the budget runs out, or progress stalls.

    Ends on a row pass, so row marginals of the returned potentials are exact
    and the assignment extracted from the final row pass uses the final g.
    """
    n, m = problem.n, problem.m
    loga = float(np.log(1.0 / n))
    logb = float(np.log(1.0 / m))
    if warm_start is not None:
        f = np.array(warm_start[0], dtype=np.float64)
        g = np.array(warm_start[1], dtype=np.float64)
    else:
        f = np.zeros(n)
        g = np.zeros(m)
    new_f = np.empty(n)
    new_g = np.empty(m)
    err_f = np.empty(n)
    err_g = np.empty(m)
    it = 0

    def pair(eps):
        nonlocal f, g, new_f, new_g, it
        inv_eps = 1.0 / eps
        problem.col_pass(f, g, inv_eps, logb, new_g, err_g)
        g, new_g = new_g, g
        problem.row_pass(f, g, inv_eps, loga, new_f, err_f)
        f, new_f = new_f, f
        it += 1
        return max(float(err_f.max()), float(err_g.max()))

    if warm_start is None and anneal_from > epsilon:
        cur = float(anneal_from)
        while cur > epsilon and it < max_iters:
            cur = max(cur * 0.5, epsilon)
            for _ in range(5):
                if it >= max_iters:
                    break
                pair(cur)
                if objective_cb:
                    objective_cb(it, cur, f, g)

    best = np.inf
    stall = 0
    loop_err = np.inf
    while it < max_iters:
        loop_err = pair(epsilon)
        if objective_cb:
            objective_cb(it, epsilon, f, g)
        if loop_err < tol:
            break
        if loop_err < best * _STALL_RATIO:
            best = loop_err
            stall = 0
        else:
            stall += 1
            if stall >= _STALL_WINDOW:
                break
    return _LoopResult(f=f, g=g, iterations=it, loop_error=loop_err, sigma=problem.sigma.copy())


def sinkhorn(cost, epsilon=DEFAULT_EPSILON, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
             warm_start=None, anneal=True, objective_every=0):
    """Solve entropy-regularized transport with uniform marginals 1/N.

    epsilon is taken relative to the cost matrix as given (callers wanting the
    mean-normalized convention scale epsilon by the cost mean). When anneal is
    set, a cold start walks epsilon down from the cost scale, which is what
    makes small-epsilon solves converge in practice.

    Returns a TransportPlan whose marginal_error is measured exactly on the
    final potentials.
    """
    c = cost.c if isinstance(cost, CostMatrix) else np.asarray(cost)
    if c.ndim != 2:
        raise TransportError(f"cost must be a matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise TransportError("cost matrix contains non-finite entries")
    if epsilon <= 0:
        raise TransportError("epsilon must be positive")
    if max_iters < 1:
        raise TransportError("max_iters must be at least 1")
    n, m = c.shape
    problem = _MatrixProblem(c, 1.0)
    mean = float(c.mean())
    anneal_from = mean if (anneal and mean > 0) else epsilon

    trace = [] if objective_every else None

    def objective_cb(it, cur_eps, f, g):
        if objective_every and it % objective_every == 0:
            primal, dual = _primal_dual_objective(c, f, g, cur_eps, n, m)
            trace.append({"iteration": it, "epsilon": cur_eps, "primal": primal, "dual": dual})

    res = _sinkhorn_loop(
        problem, float(epsilon), int(max_iters), float(tol), warm_start, anneal_from,
        objective_cb if objective_every else None,
    )

    # exact marginal deviation of the returned potentials
    inv_eps = 1.0 / float(epsilon)
    loga = float(np.log(1.0 / n))
    logb = float(np.log(1.0 / m))
    chk_f = np.empty(n)
    chk_g = np.empty(m)
    err_f = np.empty(n)
    err_g = np.empty(m)
    problem.row_pass(res.f, res.g, inv_eps, loga, chk_f, err_f)
    problem.col_pass(res.f, res.g, inv_eps, logb, chk_g, err_g)
    marginal_error = max(float(err_f.max()), float(err_g.max()))

    return TransportPlan(
        epsilon=float(epsilon),
        iterations_run=res.iterations,
        converged=bool(marginal_error < tol),
        marginal_error=marginal_error,
        f=res.f,
        g=res.g,
        cost=c,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# assignment extraction and the appearance loss


@dataclass
class Assignment:
    """Rendered-cell index i -> reference-cell index sigma[i]."""

    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.int64)

    def __len__(self):
        return len(self.sigma)


def extract_assignment(plan):
    """Row argmax of the transport plan, ties broken toward the lowest index.

    This is the standard relaxation of the one-to-one mapping: entropic plans
    are dense, and the Hungarian oracle bounds the relaxation's matched cost
    in tests.
    """
    return Assignment(np.argmax(plan.T, axis=1))


def appearance_loss(cost, assignment):
    """Mean matched cost (1/N) sum_i c_{i, sigma(i)}."""
    c = cost.c if isinstance(cost, CostMatrix) else np.asarray(cost)
    sigma = assignment.sigma if isinstance(assignment, Assignment) else np.asarray(assignment)
    n = c.shape[0]
    return float(c[np.arange(n), sigma].mean())


def hungarian_oracle(cost):
    """Exact minimum-cost bijection via the Jonker-Volgenant solver; the test
    oracle for extract_assignment. Capped at N=256."""
    c = cost.c if isinstance(cost, CostMatrix) else np.asarray(cost)
    if c.shape[0] > HUNGARIAN_CAP or c.shape[1] > HUNGARIAN_CAP:
        raise TransportError(f"hungarian oracle capped at N={HUNGARIAN_CAP}, got {c.shape}")
    rows, cols = linear_sum_assignment(c)
    sigma = np.empty(c.shape[0], dtype=np.int64)
    sigma[rows] = cols
    return Assignment(sigma)


# ---------------------------------------------------------------------------
# appearance gradient


def _norm_upstream(diff, weight, n):
    """d(weight * |diff|_2)/d(diff) / n with the zero-difference case pinned
    to zero."""
    if diff.ndim == 1:
        norms = np.abs(diff)
        safe = np.where(norms > 0.0, norms, 1.0)
        return np.where(norms > 0.0, weight * diff / safe / n, 0.0)
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where((norms > 0.0)[:, None], weight * diff / safe[:, None] / n, 0.0)


def _matched_grad(assignment, cells_r, cells_t, jac, weights, image_shape, n_objects):
    """Core of appearance_grad operating on prebuilt cell buffers."""
    alpha, beta, gamma = weights
    sigma = assignment.sigma if isinstance(assignment, Assignment) else np.asarray(assignment)
    n = cells_r.count
    gh, gw = cells_r.grid
    h, w = image_shape
    bh, bw = h // gh, w // gw
    ppc = bh * bw

    up_rgb = _norm_upstream(cells_r.rgb - cells_t.rgb[sigma], alpha, n)  # (N, 3)
    up_dep = _norm_upstream(cells_r.depth - cells_t.depth[sigma], beta, n)  # (N,)
    up_pos = _norm_upstream(cells_r.pos - cells_t.pos[sigma], gamma, n)  # (N, 2)

    # cell position is the box mean of per-pixel shading positions mapped to
    # normalized grid coordinates: x_norm = (x_px / bw - 0.5) / (gw - 1)
    px_factor = 1.0 / (bw * (gw - 1)) if gw > 1 else 0.0
    py_factor = 1.0 / (bh * (gh - 1)) if gh > 1 else 0.0

    # expand cell upstreams to pixels (box mean spreads 1/ppc to each pixel)
    cell_row = (jac.rows // bh).astype(np.int64)
    cell_col = (jac.cols // bw).astype(np.int64)
    cell_id = cell_row * gw + cell_col
    w_rgb = up_rgb[cell_id] / ppc  # (M, 3)
    w_dep = up_dep[cell_id] / ppc  # (M,)
    w_pos = up_pos[cell_id] / ppc * np.array([px_factor, py_factor])  # (M, 2)

    contrib = (
        np.einsum("mc,mck->mk", w_rgb, jac.dI)
        + w_dep[:, None] * jac.dD
        + np.einsum("mc,mck->mk", w_pos, jac.dP)
    )
    out = np.zeros((max(n_objects, 1), 9))
    np.add.at(out, jac.owner, contrib)
    return LayoutGradient(out)


def appearance_grad(assignment, render, reference, jac, hp, ot_res=DEFAULT_OT_RES):
    """Gradient of the matched appearance cost w.r.t. layout parameters, with
    the assignment held constant.

    Chains the per-cell norm derivatives through box downsampling onto the
    per-pixel interior jacobians and accumulates per owning object.
    """
    r_rgb, r_depth = _render_buffers(render)
    t_rgb, t_depth = _render_buffers(reference)
    cells_r = downsample_cells(r_rgb, r_depth, ot_res)
    cells_t = downsample_cells(t_rgb, t_depth, ot_res)
    n_objects = int(jac.owner.max()) + 1 if jac.count else 0
    return _matched_grad(
        assignment, cells_r, cells_t, jac, (hp.alpha, hp.beta, hp.gamma),
        r_rgb.shape[:2], n_objects,
    )


# ---------------------------------------------------------------------------
# fused align-loop solver (cost matrix never materialized)


def _pairwise_abs_sum(a, b):
    """Exact sum_ij |a_i - b_j| in O(N log N) via sorting."""
    bs = np.sort(np.asarray(b, dtype=np.float64))
    pre = np.concatenate([[0.0], np.cumsum(bs)])
    total = pre[-1]
    k = np.searchsorted(bs, a, side="right")
    below = a * k - pre[k]
    above = (total - pre[k]) - a * (len(bs) - k)
    return float(np.sum(below + above))


def position_mean(cells_r, cells_t):
    """Mean pairwise position distance; constant per grid pair, cached by the
    align loop."""
    return float(
        _kernels.pos_distance_sum(
            cells_r.pos[:, 0].copy(), cells_r.pos[:, 1].copy(),
            cells_t.pos[:, 0].copy(), cells_t.pos[:, 1].copy(),
        )
        / (cells_r.count * cells_t.count)
    )


def cost_mean(cells_r, cells_t, weights, pos_mean_cached=None):
    """Exact mean cost using the channel decomposition: a fused kernel for the
    color term, a sort-based pairwise sum for depth, and the cached position
    term."""
    alpha, beta, gamma = weights
    n, m = cells_r.count, cells_t.count
    total = 0.0
    if alpha:
        total += alpha * _kernels.rgb_distance_sum(cells_r.rgb, cells_t.rgb) / (n * m)
    if beta:
        total += beta * _pairwise_abs_sum(cells_r.depth, cells_t.depth) / (n * m)
    if gamma:
        pm = pos_mean_cached if pos_mean_cached is not None else position_mean(cells_r, cells_t)
        total += gamma * pm
    return total


@dataclass
class FusedPlan:
    """Result of the fused solve: assignment plus plan diagnostics."""

    sigma: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations_run: int
    converged: bool
    marginal_error: float
    mean_cost: float


def solve_fused(cells_r, cells_t, weights, epsilon=DEFAULT_EPSILON,
                max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL, warm_start=None,
                pos_mean_cached=None):
    """Sinkhorn + assignment extraction with cost entries recomputed on the
    fly (mean-normalized costs, so epsilon follows the documented convention).

    Numerically interchangeable with build_cost_matrix + sinkhorn +
    extract_assignment up to float32 rounding of cost entries; the align loop
    uses it to keep the per-iteration cost matrix out of memory.
    """
    mean = cost_mean(cells_r, cells_t, weights, pos_mean_cached)
    scale = 1.0 / mean if mean > 1e-30 else 1.0
    problem = _FusedProblem(cells_r, cells_t, weights, scale)
    anneal_from = 1.0 if warm_start is None else epsilon  # normalized costs have mean 1
    res = _sinkhorn_loop(problem, float(epsilon), int(max_iters), float(tol),
                         warm_start, anneal_from)
    return FusedPlan(
        sigma=res.sigma,
        f=res.f,
        g=res.g,
        iterations_run=res.iterations,
        converged=bool(res.loop_error < tol),
        marginal_error=float(res.loop_error),
        mean_cost=mean,
    )
