"""High-level semantic alignment: a pluggable differentiable feature
extractor, the mean feature-distance loss, and its gradient chain through the
renderer's interior jacobians.

The built-in extractor replaces a pretrained backbone with grid statistics
that are exactly linear in pixel values: per cell, mean RGB plus mean
horizontal/vertical Sobel response per channel (9 dims). Linearity keeps the
feature-to-image derivative exact, so the whole chain is testable against
finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import LayoutGradient

# Sobel kernels scaled to unit response range on [0, 1] images
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.T.copy()

_FEATURE_MAGIC = b"RAFE"


class SemanticError(ValueError):
    pass


@dataclass
class FeatureMap:
    """K embeddings of dimension C laid out on a square G x G grid (K = G^2)."""

    embeddings: np.ndarray  # (K, C)
    grid: tuple  # (G, G)
    extractor_id: str

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise SemanticError(f"embeddings must be (K, C), got {self.embeddings.shape}")
        g0, g1 = self.grid
        if g0 * g1 != len(self.embeddings):
            raise SemanticError(
                f"grid {self.grid} does not match embedding count {len(self.embeddings)}"
            )
        if not np.isfinite(self.embeddings).all():
            raise SemanticError("embeddings contain non-finite values")

    @property
    def count(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings.shape[1]


def _conv3_replicate(channel, kernel):
    """Same-size 3x3 convolution with replicate padding (constant inputs give
    an exactly zero Sobel response, borders included)."""
    padded = np.pad(channel, 1, mode="edge")
    out = np.zeros_like(channel)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + channel.shape[0], dj : dj + channel.shape[1]]
    return out


def _conv3_replicate_adjoint(grad, kernel, shape):
    """Adjoint of _conv3_replicate: correlate into the padded frame, then fold
    the padding rows/columns back onto the edge pixels."""
    h, w = shape
    padded = np.zeros((h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            padded[di : di + h, dj : dj + w] += kernel[di, dj] * grad
    out = padded[1 : 1 + h, 1 : 1 + w].copy()
    out[0, :] += padded[0, 1 : 1 + w]
    out[-1, :] += padded[h + 1, 1 : 1 + w]
    out[:, 0] += padded[1 : 1 + h, 0]
    out[:, -1] += padded[1 : 1 + h, w + 1]
    out[0, 0] += padded[0, 0]
    out[0, -1] += padded[0, w + 1]
    out[-1, 0] += padded[h + 1, 0]
    out[-1, -1] += padded[h + 1, w + 1]
    return out


def _pad_to_grid(image, grid):
    """Replicate-pad so both dimensions divide the grid size."""
    h, w = image.shape[:2]
    ph = (-h) % grid
    pw = (-w) % grid
    if ph == 0 and pw == 0:
        return image, (h, w)
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge"), (h, w)


def _fold_pad_adjoint(grad_padded, orig_shape):
    h, w = orig_shape
    out = grad_padded[:h, :w].copy()
    if grad_padded.shape[0] > h:
        out[h - 1, : out.shape[1]] += grad_padded[h:, :w].sum(axis=0)
    if grad_padded.shape[1] > w:
        out[:, w - 1] += grad_padded[:h, w:].sum(axis=1)
    if grad_padded.shape[0] > h and grad_padded.shape[1] > w:
        out[h - 1, w - 1] += grad_padded[h:, w:].sum()
    return out


class GridStatExtractor:
    """Mean-RGB plus mean-Sobel grid features; deterministic and linear.

    Embedding layout per cell: (mean r, mean g, mean b, mean sobel-x per
    channel, mean sobel-y per channel), C = 9.
    """

    dim = 9

    def __init__(self, grid_size=8):
        if grid_size < 1:
            raise SemanticError("grid size must be >= 1")
        self.grid_size = int(grid_size)
        self.extractor_id = f"gridstat{self.grid_size}"

    def _cell_mean(self, channel):
        g = self.grid_size
        h, w = channel.shape
        return channel.reshape(g, h // g, g, w // g).mean(axis=(1, 3))

    def evaluate(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise SemanticError(f"expected (H, W, 3) image, got {image.shape}")
        g = self.grid_size
        padded, _ = _pad_to_grid(image, g)
        feats = np.empty((g * g, 9))
        for ch in range(3):
            plane = padded[:, :, ch]
            feats[:, ch] = self._cell_mean(plane).reshape(-1)
            feats[:, 3 + ch] = self._cell_mean(_conv3_replicate(plane, _SOBEL_X)).reshape(-1)
            feats[:, 6 + ch] = self._cell_mean(_conv3_replicate(plane, _SOBEL_Y)).reshape(-1)
        return FeatureMap(embeddings=feats, grid=(g, g), extractor_id=self.extractor_id)

    def input_gradient(self, image, upstream):
        """Adjoint of evaluate: maps d(loss)/d(features) (K, 9) back to
        d(loss)/d(image) (H, W, 3)."""
        image = np.asarray(image, dtype=np.float64)
        upstream = np.asarray(upstream, dtype=np.float64)
        g = self.grid_size
        if upstream.shape != (g * g, 9):
            raise SemanticError(f"upstream must be ({g * g}, 9), got {upstream.shape}")
        padded, orig = _pad_to_grid(image, g)
        ph, pw = padded.shape[:2]
        bh, bw = ph // g, pw // g
        inv_cell = 1.0 / (bh * bw)
        grad = np.zeros_like(image)
        for ch in range(3):
            # spread each cell's upstream uniformly over its pixel block
            mean_up = np.repeat(
                np.repeat(upstream[:, ch].reshape(g, g), bh, axis=0), bw, axis=1
            ) * inv_cell
            sx_up = np.repeat(
                np.repeat(upstream[:, 3 + ch].reshape(g, g), bh, axis=0), bw, axis=1
            ) * inv_cell
            sy_up = np.repeat(
                np.repeat(upstream[:, 6 + ch].reshape(g, g), bh, axis=0), bw, axis=1
            ) * inv_cell
            plane = mean_up
            plane = plane + _conv3_replicate_adjoint(sx_up, _SOBEL_X, (ph, pw))
            plane = plane + _conv3_replicate_adjoint(sy_up, _SOBEL_Y, (ph, pw))
            grad[:, :, ch] = _fold_pad_adjoint(plane, orig)
        return grad


def extract_features_gridstat(image, grid_size=8):
    """One-shot grid-statistics feature map of an (H, W, 3) image."""
    return GridStatExtractor(grid_size).evaluate(image)


def semantic_loss(f, f_ref):
    """Mean embedding distance (1/K) sum_i |f_i - f_ref_i|_2, paired by cell
    index."""
    if f.embeddings.shape != f_ref.embeddings.shape:
        raise SemanticError(
            f"feature shapes differ: {f.embeddings.shape} vs {f_ref.embeddings.shape}"
        )
    if f.extractor_id != f_ref.extractor_id:
        raise SemanticError(
            f"feature maps come from different extractors: "
            f"{f.extractor_id!r} vs {f_ref.extractor_id!r}"
        )
    return float(np.mean(np.linalg.norm(f.embeddings - f_ref.embeddings, axis=1)))


def semantic_loss_upstream(f, f_ref):
    """d(semantic_loss)/d(f): (K, C), zero rows at zero-difference pairs."""
    diff = f.embeddings - f_ref.embeddings
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where((norms > 0.0)[:, None], diff / safe[:, None] / len(diff), 0.0)


def semantic_grad(render, reference_image, extractor, jac, feats_ref=None, n_objects=None):
    """Gradient of the semantic loss w.r.t. layout parameters with frozen
    attribution: feature upstream -> extractor adjoint -> per-pixel color
    jacobians, accumulated per owning object.

    feats_ref short-circuits re-extracting the (fixed) reference features.
    """
    feats = extractor.evaluate(render.rgb)
    if feats_ref is None:
        feats_ref = extractor.evaluate(np.asarray(reference_image, dtype=np.float64))
    upstream = semantic_loss_upstream(feats, feats_ref)
    pixel_grad = extractor.input_gradient(render.rgb, upstream)  # (H, W, 3)
    per_record = pixel_grad[jac.rows, jac.cols]  # (M, 3)
    contrib = np.einsum("mc,mck->mk", per_record, jac.dI)
    if n_objects is None:
        n_objects = int(jac.owner.max()) + 1 if jac.count else 0
    out = np.zeros((max(n_objects, 1), 9))
    np.add.at(out, jac.owner, contrib)
    return LayoutGradient(out)


# ---------------------------------------------------------------------------
# external-feature files (out-of-process backbones; evaluation only)


def save_features(feature_map, path):
    """Binary feature file: magic, uint32 K, uint32 C, then K*C little-endian
    float32 values in row-major order."""
    emb = np.ascontiguousarray(feature_map.embeddings, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        fh.write(emb.tobytes())


def load_features(path):
    """Read a feature file back; K must be a perfect square (grid layout)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _FEATURE_MAGIC:
        raise SemanticError(f"{path}: not a feature file")
    k, c = struct.unpack("<II", raw[4:12])
    data = np.frombuffer(raw, dtype="<f4", count=k * c, offset=12)
    if data.size != k * c:
        raise SemanticError(f"{path}: truncated feature payload")
    g = int(round(k**0.5))
    if g * g != k:
        raise SemanticError(f"{path}: embedding count {k} is not a square grid")
    return FeatureMap(
        embeddings=data.reshape(k, c).astype(np.float64),
        grid=(g, g),
        extractor_id="external",
    )
