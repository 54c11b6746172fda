"""Forward rasterization with per-pixel attribution, plus analytic interior
gradients of pixel color, depth, and screen position w.r.t. layout params.

Gradients are "interior": the attribution (which object/triangle/barycentric
point produced each pixel) is frozen, so visibility and silhouette changes
carry no gradient. Per-pixel quantities are defined through that frozen
attribution:

  - position/depth follow the material point m = b1*m1 + b2*m2 + b3*m3 carried
    by the triangle (its screen projection is the shading-point position);
  - color follows the fixed pixel ray re-intersected with the moving triangle,
    so the interpolation barycentrics change while vertex colors stay fixed.

Rasterization stores perspective-correct barycentrics, which makes the
attributed material point lie exactly on the pixel-center ray at render time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scene import transform_jacobians, transform_points

_DEGENERATE_AREA = 1e-12
_DEGENERATE_DET = 1e-12


class RasterError(ValueError):
    pass


class Projection(NamedTuple):
    x: float
    y: float
    z: float
    projectable: bool


def project(camera, world_point):
    """Project a world point through the pinhole camera.

    Returns screen coordinates in pixels plus camera-space z. Points at or
    behind the near plane are flagged non-projectable (screen coords are then
    meaningless).
    """
    p = camera.world_to_camera(np.asarray(world_point, dtype=np.float64).reshape(3))
    z = float(p[2])
    if z <= camera.near:
        return Projection(float("nan"), float("nan"), z, False)
    return Projection(
        camera.fx * float(p[0]) / z + camera.cx,
        camera.fy * float(p[1]) / z + camera.cy,
        z,
        True,
    )


@dataclass
class GBuffer:
    """Per-pixel render output and attribution from one rasterization pass.

    obj_index/tri_index are -1 for background pixels; bary holds perspective-
    correct barycentric weights; raw_z is camera-space depth (inf at
    background); depth is raw_z normalized to [0, 1] with background at 1.
    """

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) in [0, 1]
    raw_z: np.ndarray  # (H, W), inf where background
    obj_index: np.ndarray  # (H, W) int32
    tri_index: np.ndarray  # (H, W) int32
    bary: np.ndarray  # (H, W, 3)

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    def attributed_mask(self):
        return self.obj_index >= 0

    def attributed_count(self, object_index=None):
        if object_index is None:
            return int((self.obj_index >= 0).sum())
        return int((self.obj_index == object_index).sum())


def _camera_vertices(scene, obj):
    world = transform_points(obj.layout, obj.mesh.vertices)
    return scene.camera.world_to_camera(world)


def rasterize(scene):
    """Z-buffered rasterization of the scene at the camera resolution.

    One sample per pixel at the pixel center; color is the barycentric mix of
    vertex colors; ties at equal depth go to the lower object index, then the
    lower triangle index (triangles are processed in that order with a strict
    depth test). Triangles with any vertex at or behind the near plane are
    skipped entirely rather than clipped.
    """
    cam = scene.camera
    w, h = cam.width, cam.height
    rgb = np.tile(scene.background, (h, w, 1))
    depth = np.ones((h, w))
    raw_z = np.full((h, w), np.inf)
    obj_index = np.full((h, w), -1, dtype=np.int32)
    tri_index = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3))
    inv_range = 1.0 / (cam.far - cam.near)

    for oi, obj in enumerate(scene.objects):
        vc = _camera_vertices(scene, obj)
        zs = vc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = cam.fx * vc[:, 0] / zs + cam.cx
            py = cam.fy * vc[:, 1] / zs + cam.cy
        colors = obj.mesh.colors
        for ti, tri in enumerate(obj.mesh.triangles):
            z1, z2, z3 = zs[tri]
            if z1 <= cam.near or z2 <= cam.near or z3 <= cam.near:
                continue
            x1, x2, x3 = px[tri]
            y1, y2, y3 = py[tri]
            area = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1)
            if abs(area) < _DEGENERATE_AREA:
                continue
            # pixel centers sit at (col + 0.5, row + 0.5)
            c0 = max(0, int(np.ceil(min(x1, x2, x3) - 0.5)))
            c1 = min(w - 1, int(np.floor(max(x1, x2, x3) - 0.5)))
            r0 = max(0, int(np.ceil(min(y1, y2, y3) - 0.5)))
            r1 = min(h - 1, int(np.floor(max(y1, y2, y3) - 0.5)))
            if c0 > c1 or r0 > r1:
                continue
            xs = np.arange(c0, c1 + 1) + 0.5
            ys = np.arange(r0, r1 + 1) + 0.5
            gx, gy = np.meshgrid(xs, ys)
            lam1 = ((x3 - x2) * (gy - y2) - (y3 - y2) * (gx - x2)) / area
            lam2 = ((x1 - x3) * (gy - y3) - (y1 - y3) * (gx - x3)) / area
            lam3 = 1.0 - lam1 - lam2
            inside = (lam1 >= 0.0) & (lam2 >= 0.0) & (lam3 >= 0.0)
            if not inside.any():
                continue
            inv_z = lam1 / z1 + lam2 / z2 + lam3 / z3
            z_int = 1.0 / inv_z
            zblock = raw_z[r0 : r1 + 1, c0 : c1 + 1]
            take = inside & (z_int < zblock)
            if not take.any():
                continue
            b1 = (lam1 / z1) * z_int
            b2 = (lam2 / z2) * z_int
            b3 = np.maximum(1.0 - b1 - b2, 0.0)
            col = (
                b1[..., None] * colors[tri[0]]
                + b2[..., None] * colors[tri[1]]
                + b3[..., None] * colors[tri[2]]
            )
            zblock[take] = z_int[take]
            depth[r0 : r1 + 1, c0 : c1 + 1][take] = np.clip(
                (z_int[take] - cam.near) * inv_range, 0.0, 1.0
            )
            rgb[r0 : r1 + 1, c0 : c1 + 1][take] = col[take]
            obj_index[r0 : r1 + 1, c0 : c1 + 1][take] = oi
            tri_index[r0 : r1 + 1, c0 : c1 + 1][take] = ti
            bb = bary[r0 : r1 + 1, c0 : c1 + 1]
            bb[take, 0] = b1[take]
            bb[take, 1] = b2[take]
            bb[take, 2] = b3[take]

    return GBuffer(
        rgb=rgb,
        depth=depth,
        raw_z=raw_z,
        obj_index=obj_index,
        tri_index=tri_index,
        bary=bary,
    )


def shading_point_position(gbuffer, scene, pixel):
    """Screen position of the pixel's shading point under the scene's current
    layout parameters, with the attribution frozen from gbuffer.

    pixel is (row, col). At the render-time parameters this reproduces the
    pixel center; evaluating after changing layout params gives the moved
    projection, which is what makes the position differentiable.
    """
    row, col = int(pixel[0]), int(pixel[1])
    oi = int(gbuffer.obj_index[row, col])
    if oi < 0:
        raise RasterError(f"pixel ({row}, {col}) is background; no shading point")
    obj = scene.objects[oi]
    tri = obj.mesh.triangles[int(gbuffer.tri_index[row, col])]
    b = gbuffer.bary[row, col]
    local = b @ obj.mesh.vertices[tri]
    world = transform_points(obj.layout, local[None, :])[0]
    proj = project(scene.camera, world)
    if not proj.projectable:
        raise RasterError(f"shading point of pixel ({row}, {col}) moved behind the camera")
    return proj.x, proj.y


@dataclass
class PixelJacobians:
    """Analytic derivatives for every attributed pixel, frozen attribution.

    Record m belongs to pixel (rows[m], cols[m]) owned by object owner[m];
    entries for every other object are structurally zero. Jacobian columns
    follow scene.PARAM_NAMES (t, s, r). index_map gives the record index per
    pixel, -1 for background.
    """

    rows: np.ndarray  # (M,)
    cols: np.ndarray  # (M,)
    owner: np.ndarray  # (M,)
    dP: np.ndarray  # (M, 2, 9) screen-position jacobian
    dD: np.ndarray  # (M, 9) normalized-depth jacobian
    dI: np.ndarray  # (M, 3, 9) rgb jacobian
    index_map: np.ndarray  # (H, W) int32

    @property
    def count(self):
        return len(self.rows)

    def record(self, row, col):
        idx = int(self.index_map[row, col])
        if idx < 0:
            raise RasterError(f"pixel ({row}, {col}) is background; no jacobian record")
        return idx


def camera_space_jacobians(scene, obj):
    """Per-vertex (V, 3, 9) jacobians of camera-frame positions w.r.t. the
    owning object's layout parameters."""
    jac_world = transform_jacobians(obj.layout, obj.mesh.vertices)
    rot = scene.camera.rotation
    return np.einsum("ij,vjk->vik", rot, jac_world)


def interior_gradients(gbuffer, scene):
    """Assemble dP, dD, dI for all attributed pixels of a gbuffer that was
    rasterized from this scene in its current state.

    dP and dD chain the pinhole projection through the frozen material point;
    dI follows the ray-reintersection rule (fixed pixel ray, moving triangle).
    """
    cam = scene.camera
    rows, cols = np.nonzero(gbuffer.obj_index >= 0)
    m_total = len(rows)
    owner = gbuffer.obj_index[rows, cols].astype(np.int32)
    dP = np.zeros((m_total, 2, 9))
    dD = np.zeros((m_total, 9))
    dI = np.zeros((m_total, 3, 9))
    index_map = np.full((gbuffer.height, gbuffer.width), -1, dtype=np.int32)
    index_map[rows, cols] = np.arange(m_total, dtype=np.int32)
    inv_range = 1.0 / (cam.far - cam.near)

    for oi, obj in enumerate(scene.objects):
        sel = np.nonzero(owner == oi)[0]
        if sel.size == 0:
            continue
        verts_cam = _camera_vertices(scene, obj)
        jac_cam = camera_space_jacobians(scene, obj)
        r_sel = rows[sel]
        c_sel = cols[sel]
        vidx = obj.mesh.triangles[gbuffer.tri_index[r_sel, c_sel]]  # (M, 3)
        b = gbuffer.bary[r_sel, c_sel]  # (M, 3)
        tv = verts_cam[vidx]  # (M, 3 verts, 3)
        tj = jac_cam[vidx]  # (M, 3 verts, 3, 9)
        point = np.einsum("mv,mvi->mi", b, tv)
        jpix = np.einsum("mv,mvik->mik", b, tj)  # (M, 3, 9)
        x, y, z = point[:, 0], point[:, 1], point[:, 2]
        jx, jy, jz = jpix[:, 0, :], jpix[:, 1, :], jpix[:, 2, :]
        inv_z = 1.0 / z
        dP[sel, 0, :] = cam.fx * (jx * inv_z[:, None] - (x * inv_z**2)[:, None] * jz)
        dP[sel, 1, :] = cam.fy * (jy * inv_z[:, None] - (y * inv_z**2)[:, None] * jz)
        # depth clamps at far; the clamp zeroes the gradient
        unclamped = (z < cam.far)[:, None]
        dD[sel] = np.where(unclamped, jz * inv_range, 0.0)

        # ray reintersection: A u' = jpix with A = [d | v1-v2 | v1-v3]
        ray = np.stack(
            [
                (c_sel + 0.5 - cam.cx) / cam.fx,
                (r_sel + 0.5 - cam.cy) / cam.fy,
                np.ones(sel.size),
            ],
            axis=1,
        )
        a_mat = np.stack([ray, tv[:, 0] - tv[:, 1], tv[:, 0] - tv[:, 2]], axis=2)
        det = np.linalg.det(a_mat)
        good = np.abs(det) > _DEGENERATE_DET
        if good.any():
            du = np.zeros_like(jpix)
            du[good] = np.linalg.solve(a_mat[good], jpix[good])
            db2 = du[:, 1, :]
            db3 = du[:, 2, :]
            db1 = -(db2 + db3)
            cols3 = obj.mesh.colors[vidx]  # (M, 3 verts, 3)
            dI[sel] = (
                cols3[:, 0, :, None] * db1[:, None, :]
                + cols3[:, 1, :, None] * db2[:, None, :]
                + cols3[:, 2, :, None] * db3[:, None, :]
            )

    return PixelJacobians(
        rows=rows.astype(np.int32),
        cols=cols.astype(np.int32),
        owner=owner,
        dP=dP,
        dD=dD,
        dI=dI,
        index_map=index_map,
    )


@dataclass
class SurrogateBuffers:
    """Frozen-attribution per-pixel values for arbitrary layout parameters.

    Background pixels keep background color, depth 1, and their pixel-center
    position; attributed pixels move with the frozen attribution. This is the
    smooth function the analytic interior gradients differentiate, and the
    object of every finite-difference check.
    """

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    pos: np.ndarray  # (H, W, 2) screen positions in pixels


def surrogate_buffers(gbuffer, scene):
    """Evaluate the frozen-attribution surrogate render for the scene's
    current layout parameters (typically a perturbation of the render-time
    ones)."""
    cam = scene.camera
    h, w = gbuffer.height, gbuffer.width
    rgb = np.tile(scene.background, (h, w, 1))
    depth = np.ones((h, w))
    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pos = np.stack([gx, gy], axis=2)
    inv_range = 1.0 / (cam.far - cam.near)

    rows, cols = np.nonzero(gbuffer.obj_index >= 0)
    owner = gbuffer.obj_index[rows, cols]
    for oi, obj in enumerate(scene.objects):
        sel = np.nonzero(owner == oi)[0]
        if sel.size == 0:
            continue
        verts_cam = _camera_vertices(scene, obj)
        r_sel = rows[sel]
        c_sel = cols[sel]
        vidx = obj.mesh.triangles[gbuffer.tri_index[r_sel, c_sel]]
        b = gbuffer.bary[r_sel, c_sel]
        tv = verts_cam[vidx]  # (M, 3, 3)
        point = np.einsum("mv,mvi->mi", b, tv)
        z = point[:, 2]
        pos[r_sel, c_sel, 0] = cam.fx * point[:, 0] / z + cam.cx
        pos[r_sel, c_sel, 1] = cam.fy * point[:, 1] / z + cam.cy
        depth[r_sel, c_sel] = np.clip((z - cam.near) * inv_range, 0.0, 1.0)

        ray = np.stack(
            [
                (c_sel + 0.5 - cam.cx) / cam.fx,
                (r_sel + 0.5 - cam.cy) / cam.fy,
                np.ones(sel.size),
            ],
            axis=1,
        )
        a_mat = np.stack([ray, tv[:, 0] - tv[:, 1], tv[:, 0] - tv[:, 2]], axis=2)
        det = np.linalg.det(a_mat)
        good = np.abs(det) > _DEGENERATE_DET
        b_new = b.copy()
        if good.any():
            sol = np.linalg.solve(a_mat[good], tv[good, 0, :, None])[:, :, 0]
            b_new[good, 1] = sol[:, 1]
            b_new[good, 2] = sol[:, 2]
            b_new[good, 0] = 1.0 - sol[:, 1] - sol[:, 2]
        cols3 = obj.mesh.colors[vidx]
        rgb[r_sel, c_sel] = np.einsum("mv,mvc->mc", b_new, cols3)

    return SurrogateBuffers(rgb=rgb, depth=depth, pos=pos)
