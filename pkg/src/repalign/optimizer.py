"""Outer alignment loop: total-loss assembly, masked Adam updates over layout
parameters, convergence tracing, and the single-evaluation loss entry point.

Each iteration renders the scene, solves the transport problem against the
fixed reference, assembles the appearance and semantic gradients through the
frozen attribution, and applies one bias-corrected Adam step to the unmasked
parameter blocks. The transport plan and assignment are recomputed every
iteration and treated as constants inside the gradient.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .ot import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERS,
    DEFAULT_OT_RES,
    DEFAULT_TOL,
    Assignment,
    _matched_grad,
    downsample_cells,
    matched_cost,
    position_mean,
    solve_fused,
)
from .raster import interior_gradients, rasterize
from .scene import PARAM_BLOCKS, HyperParams, LayoutGradient, SceneError
from .semantic import GridStatExtractor, semantic_grad, semantic_loss

SCALE_FLOOR = 1e-3
LITERAL_DECAY = 0.999


class AlignAbort(RuntimeError):
    """Raised on non-finite losses or gradients; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class AlignConfig:
    """Everything the alignment loop needs beyond the scene and reference.

    Defaults: learning rate 0.02 with 500 iterations, Adam moments (0.9,
    0.999), mask {t, s} with rotation frozen, appearance-dominant lam 0.8,
    OT at 64x64 cells with epsilon 0.01 on mean-normalized costs.
    """

    hp: HyperParams = field(default_factory=HyperParams)
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    iterations: int = 500
    param_mask: frozenset = frozenset({"t", "s"})
    epsilon: float = DEFAULT_EPSILON
    ot_res: int = DEFAULT_OT_RES
    ot_max_iters: int = DEFAULT_MAX_ITERS
    ot_tol: float = DEFAULT_TOL
    use_ot: bool = True
    extractor_grid: int = 8
    seed: int = 0
    literal_weight_decay: bool = False
    record_timing: bool = False

    def __post_init__(self):
        self.param_mask = frozenset(self.param_mask)
        if self.lr <= 0:
            raise SceneError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise SceneError("Adam moment coefficients must lie in [0, 1)")
        if self.iterations < 1:
            raise SceneError("iterations must be >= 1")
        if not self.param_mask:
            raise SceneError("parameter mask must be nonempty")
        if not self.param_mask <= {"t", "s", "r"}:
            raise SceneError(f"unknown parameter blocks in mask: {self.param_mask}")

    def mask_vector(self):
        mask = np.zeros(9, dtype=bool)
        for block in self.param_mask:
            mask[PARAM_BLOCKS[block]] = True
        return mask

    def weights(self):
        return (self.hp.alpha, self.hp.beta, self.hp.gamma)


def total_loss(l_a, l_s, lam):
    """Loss mix: lam * appearance + (1 - lam) * semantic."""
    if not (0.0 <= lam <= 1.0):
        raise SceneError(f"lam must lie in [0, 1], got {lam}")
    return lam * l_a + (1.0 - lam) * l_s


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_objects):
        return cls(m=np.zeros((n_objects, 9)), v=np.zeros((n_objects, 9)))


def adam_step(params, grads, state, lr, beta1, beta2, eps_adam,
              mask=None, literal_weight_decay=False):
    """One bias-corrected Adam update on the (n_objects, 9) parameter matrix.

    Only unmasked columns change; updated scale components are clamped to the
    1e-3 floor to keep scales from collapsing through zero. Moments track all
    components so unmasking later behaves like standard Adam.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        raise AlignAbort("non-finite gradient passed to adam_step")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps_adam)
    if mask is None:
        mask = np.ones(9, dtype=bool)
    cols = np.flatnonzero(mask)
    if literal_weight_decay:
        params[:, cols] *= LITERAL_DECAY
    params[:, cols] -= update[:, cols]
    scale_cols = cols[(cols >= 3) & (cols < 6)]
    if scale_cols.size:
        params[:, scale_cols] = np.maximum(params[:, scale_cols], SCALE_FLOOR)
    return params, state


@dataclass
class TraceRecord:
    iteration: int
    loss: float
    loss_appearance: float
    loss_semantic: float
    params: list
    grad_norm_t: float
    grad_norm_s: float
    grad_norm_r: float
    sinkhorn_iterations: int
    sinkhorn_converged: bool
    sinkhorn_marginal_error: float
    wall_time: float | None = None

    def to_dict(self, include_timing=False):
        doc = {
            "iteration": self.iteration,
            "loss": self.loss,
            "loss_appearance": self.loss_appearance,
            "loss_semantic": self.loss_semantic,
            "params": self.params,
            "grad_norm_t": self.grad_norm_t,
            "grad_norm_s": self.grad_norm_s,
            "grad_norm_r": self.grad_norm_r,
            "sinkhorn_iterations": self.sinkhorn_iterations,
            "sinkhorn_converged": self.sinkhorn_converged,
            "sinkhorn_marginal_error": self.sinkhorn_marginal_error,
        }
        if include_timing and self.wall_time is not None:
            doc["wall_time"] = self.wall_time
        return doc


@dataclass
class AlignTrace:
    """Per-iteration records; serialized as newline-delimited JSON.

    Timing is kept out of the serialized form unless explicitly requested so
    that repeated seeded runs produce bit-identical trace files.
    """

    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def to_ndjson(self, include_timing=False):
        return "".join(
            json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n"
            for r in self.records
        )

    def write(self, path, include_timing=False):
        with open(path, "w") as fh:
            fh.write(self.to_ndjson(include_timing))


def _config_echo(config):
    return {
        "lr": config.lr,
        "beta1": config.beta1,
        "beta2": config.beta2,
        "iterations": config.iterations,
        "param_mask": sorted(config.param_mask),
        "alpha": config.hp.alpha,
        "beta": config.hp.beta,
        "gamma": config.hp.gamma,
        "lambda": config.hp.lam,
        "epsilon": config.epsilon,
        "ot_res": config.ot_res,
        "ot_max_iters": config.ot_max_iters,
        "ot_tol": config.ot_tol,
        "use_ot": config.use_ot,
        "extractor_grid": config.extractor_grid,
        "seed": config.seed,
        "literal_weight_decay": config.literal_weight_decay,
    }


class _AlignContext:
    """Per-run cached state: reference cells and features, grid geometry, the
    extractor, and the position-distance mean."""

    def __init__(self, scene, reference, config):
        ref_rgb, ref_depth = reference
        self.ref_rgb = np.asarray(ref_rgb, dtype=np.float64)
        self.ref_depth = np.asarray(ref_depth, dtype=np.float64)
        cam = scene.camera
        if self.ref_rgb.shape != (cam.height, cam.width, 3):
            raise SceneError(
                f"reference rgb {self.ref_rgb.shape} does not match camera "
                f"resolution {(cam.height, cam.width, 3)}"
            )
        if self.ref_depth.shape != (cam.height, cam.width):
            raise SceneError(
                f"reference depth {self.ref_depth.shape} does not match camera "
                f"resolution {(cam.height, cam.width)}"
            )
        self.config = config
        # downsample_cells validates divisibility
        self.ref_cells = downsample_cells(self.ref_rgb, self.ref_depth, config.ot_res)
        self.pos_mean = (
            position_mean(self.ref_cells, self.ref_cells) if config.hp.gamma else 0.0
        )
        self.extractor = GridStatExtractor(config.extractor_grid)
        self.ref_feats = self.extractor.evaluate(self.ref_rgb)
        self.identity_sigma = np.arange(self.ref_cells.count, dtype=np.int64)

    def forward(self, scene, warm_start=None):
        """One full forward pass; returns everything the loop records."""
        config = self.config
        gbuffer = rasterize(scene)
        cells_r = downsample_cells(gbuffer.rgb, gbuffer.depth, config.ot_res)
        if config.use_ot:
            plan = solve_fused(
                cells_r,
                self.ref_cells,
                config.weights(),
                epsilon=config.epsilon,
                max_iters=config.ot_max_iters,
                tol=config.ot_tol,
                warm_start=warm_start,
                pos_mean_cached=self.pos_mean,
            )
            sigma = plan.sigma
            plan_stats = (plan.iterations_run, plan.converged, plan.marginal_error)
            warm = (plan.f, plan.g)
        else:
            sigma = self.identity_sigma
            plan_stats = (0, True, 0.0)
            warm = None
        l_a = matched_cost(cells_r, self.ref_cells, sigma, config.weights())
        feats = self.extractor.evaluate(gbuffer.rgb)
        l_s = semantic_loss(feats, self.ref_feats)
        loss = total_loss(l_a, l_s, config.hp.lam)
        return gbuffer, cells_r, sigma, plan_stats, warm, l_a, l_s, loss


def loss_eval(scene, reference, config=None):
    """Single forward evaluation of (L, L_a, L_s) without any update; shares
    the align loop's code path, so it matches align's iteration-0 record."""
    config = config or AlignConfig()
    ctx = _AlignContext(scene, reference, config)
    *_, l_a, l_s, loss = ctx.forward(scene)
    return loss, l_a, l_s


def align(scene, reference, config=None, on_iteration=None):
    """Run the full alignment loop and return (optimized scene, trace).

    reference is an (rgb, depth) pair at the camera resolution. The input
    scene is left untouched; exactly config.iterations steps run, each
    recording the pre-update state. Aborts with AlignAbort (partial trace
    attached) on non-finite losses or gradients.
    """
    config = config or AlignConfig()
    ctx = _AlignContext(scene, reference, config)
    scene = scene.copy()
    n_objects = len(scene.objects)
    params = scene.params_matrix()
    adam = AdamState.zeros(n_objects)
    mask9 = config.mask_vector()
    trace = AlignTrace(config=_config_echo(config))
    warm = None
    lam = config.hp.lam

    for it in range(config.iterations):
        t0 = time.perf_counter() if config.record_timing else None
        gbuffer, cells_r, sigma, plan_stats, warm, l_a, l_s, loss = ctx.forward(scene, warm)
        jac = interior_gradients(gbuffer, scene)
        grad = LayoutGradient.zeros(n_objects)
        if lam > 0.0:
            g_a = _matched_grad(
                Assignment(sigma), cells_r, ctx.ref_cells, jac, config.weights(),
                (gbuffer.height, gbuffer.width), n_objects,
            )
            grad = grad + g_a.scaled(lam)
        if lam < 1.0:
            g_s = semantic_grad(
                gbuffer, ctx.ref_rgb, ctx.extractor, jac,
                feats_ref=ctx.ref_feats, n_objects=n_objects,
            )
            grad = grad + g_s.scaled(1.0 - lam)
        grad.data[:, ~mask9] = 0.0

        record = TraceRecord(
            iteration=it,
            loss=loss,
            loss_appearance=l_a,
            loss_semantic=l_s,
            params=[[float(x) for x in row] for row in params],
            grad_norm_t=float(np.linalg.norm(grad.g_t)),
            grad_norm_s=float(np.linalg.norm(grad.g_s)),
            grad_norm_r=float(np.linalg.norm(grad.g_r)),
            sinkhorn_iterations=plan_stats[0],
            sinkhorn_converged=plan_stats[1],
            sinkhorn_marginal_error=plan_stats[2],
            wall_time=(time.perf_counter() - t0) if t0 is not None else None,
        )
        trace.records.append(record)

        if not np.isfinite(loss):
            raise AlignAbort(f"non-finite loss at iteration {it}", trace=trace)
        if not grad.all_finite():
            raise AlignAbort(f"non-finite gradient at iteration {it}", trace=trace)

        params, adam = adam_step(
            params, grad.data, adam, config.lr, config.beta1, config.beta2,
            config.eps_adam, mask9, config.literal_weight_decay,
        )
        scene.set_params_matrix(params)
        if on_iteration is not None:
            on_iteration(it, scene, gbuffer)

    return scene, trace
