"""Tile-based Gaussian splatting of color, identity features and opacity.

A splat contributes to a pixel only inside its 3-sigma ellipse (Mahalanobis
distance <= 3). That makes the footprint independent of how pixels are grouped
into tiles, so the tiled kernel and the untiled reference in
:mod:`objsplat.checks` must agree up to floating point.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange
from scipy import sparse

from .scene import Camera, Codebook, DimensionError, Gaussian, GaussianScene

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV_REG = 0.3
SIGMA_CUTOFF = 3.0


def set_threads(n: int | None) -> int:
    """Cap rasterizer worker threads; returns the effective count."""
    if n is None:
        n = int(os.environ.get("OBJSPLAT_THREADS", numba.config.NUMBA_NUM_THREADS))
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions, shape (..., 4), to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


@dataclass
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float


def _pixel_range(center: float, half: float, size: int) -> tuple[int, int]:
    lo = max(int(np.ceil(center - half - 0.5)), 0)
    hi = min(int(np.floor(center + half - 0.5)), size - 1)
    return lo, hi


def project_gaussian(g: Gaussian, cam: Camera, index: int = 0) -> Splat2D | None:
    """EWA projection of a single Gaussian; ``None`` when culled."""
    t = cam.rotation @ np.asarray(g.position, dtype=np.float64) + cam.translation
    x, y, z = t
    if not cam.near < z < cam.far:
        return None
    rot = quat_to_rotmat(g.rotation)
    m = rot * np.asarray(g.scale, dtype=np.float64)
    cov_cam = cam.rotation @ (m @ m.T) @ cam.rotation.T
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    cov2d = jac @ cov_cam @ jac.T + COV_REG * np.eye(2)
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    c0, c1 = _pixel_range(mean2d[0], SIGMA_CUTOFF * np.sqrt(cov2d[0, 0]), cam.width)
    r0, r1 = _pixel_range(mean2d[1], SIGMA_CUTOFF * np.sqrt(cov2d[1, 1]), cam.height)
    if c0 > c1 or r0 > r1:
        return None
    radius = SIGMA_CUTOFF * np.sqrt(np.linalg.eigvalsh(cov2d)[-1])
    return Splat2D(index, mean2d, cov2d, float(z), float(radius))


@dataclass
class Projection:
    """Column-wise projection of all Gaussians that survive culling."""

    index: np.ndarray      # (P,) gaussian indices
    means: np.ndarray      # (P, 2)
    cov2d: np.ndarray      # (P, 2, 2)
    conics: np.ndarray     # (P, 3) inverse covariance (a, b, c)
    depths: np.ndarray     # (P,)
    bounds: np.ndarray     # (P, 4) inclusive pixel box: col_lo, col_hi, row_lo, row_hi


@njit(parallel=True, cache=True)
def _project_kernel(pos, scales, quats, rot, trans, fx, fy, cx, cy, near, far, width, height,
                    means, cov2d, conics, depths, bounds, keep):
    for i in prange(pos.shape[0]):
        tc = np.empty(3)
        for r in range(3):
            tc[r] = rot[r, 0] * pos[i, 0] + rot[r, 1] * pos[i, 1] + rot[r, 2] * pos[i, 2] + trans[r]
        z = tc[2]
        keep[i] = False
        if not (near < z < far):
            continue
        w, x, y, q3 = quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3]
        rq = np.empty((3, 3))
        rq[0, 0] = 1 - 2 * (y * y + q3 * q3)
        rq[0, 1] = 2 * (x * y - w * q3)
        rq[0, 2] = 2 * (x * q3 + w * y)
        rq[1, 0] = 2 * (x * y + w * q3)
        rq[1, 1] = 1 - 2 * (x * x + q3 * q3)
        rq[1, 2] = 2 * (y * q3 - w * x)
        rq[2, 0] = 2 * (x * q3 - w * y)
        rq[2, 1] = 2 * (y * q3 + w * x)
        rq[2, 2] = 1 - 2 * (x * x + y * y)
        # camera-frame factor M = R_cam R(q) diag(s), so Sigma_cam = M M^T
        m = np.empty((3, 3))
        for r in range(3):
            for c in range(3):
                m[r, c] = (rot[r, 0] * rq[0, c] + rot[r, 1] * rq[1, c] + rot[r, 2] * rq[2, c]) * scales[i, c]
        j00 = fx / z
        j02 = -fx * tc[0] / (z * z)
        j11 = fy / z
        j12 = -fy * tc[1] / (z * z)
        u0 = np.empty(3)
        u1 = np.empty(3)
        for c in range(3):
            u0[c] = j00 * m[0, c] + j02 * m[2, c]
            u1[c] = j11 * m[1, c] + j12 * m[2, c]
        a = u0[0] * u0[0] + u0[1] * u0[1] + u0[2] * u0[2] + COV_REG
        b = u0[0] * u1[0] + u0[1] * u1[1] + u0[2] * u1[2]
        d = u1[0] * u1[0] + u1[1] * u1[1] + u1[2] * u1[2] + COV_REG
        mx = fx * tc[0] / z + cx
        my = fy * tc[1] / z + cy
        hx = SIGMA_CUTOFF * np.sqrt(a)
        hy = SIGMA_CUTOFF * np.sqrt(d)
        c0 = max(np.ceil(mx - hx - 0.5), 0.0)
        c1 = min(np.floor(mx + hx - 0.5), width - 1.0)
        r0 = max(np.ceil(my - hy - 0.5), 0.0)
        r1 = min(np.floor(my + hy - 0.5), height - 1.0)
        if c0 > c1 or r0 > r1:
            continue
        keep[i] = True
        means[i, 0] = mx
        means[i, 1] = my
        cov2d[i, 0, 0] = a
        cov2d[i, 0, 1] = b
        cov2d[i, 1, 0] = b
        cov2d[i, 1, 1] = d
        det = a * d - b * b
        conics[i, 0] = d / det
        conics[i, 1] = -b / det
        conics[i, 2] = a / det
        depths[i] = z
        bounds[i, 0] = np.int64(c0)
        bounds[i, 1] = np.int64(c1)
        bounds[i, 2] = np.int64(r0)
        bounds[i, 3] = np.int64(r1)


def project_scene(scene: GaussianScene, cam: Camera) -> Projection:
    """EWA projection of every Gaussian (compiled, one Gaussian per loop step)."""
    n = len(scene)
    means = np.empty((n, 2))
    cov2d = np.empty((n, 2, 2))
    conics = np.empty((n, 3))
    depths = np.empty(n)
    bounds = np.empty((n, 4), dtype=np.int64)
    keep = np.empty(n, dtype=np.bool_)
    _project_kernel(scene.positions, scene.scales, scene.rotations, np.ascontiguousarray(cam.rotation),
                    np.ascontiguousarray(cam.translation, dtype=np.float64), float(cam.fx), float(cam.fy),
                    float(cam.cx), float(cam.cy), float(cam.near), float(cam.far), cam.width, cam.height,
                    means, cov2d, conics, depths, bounds, keep)
    idx = np.nonzero(keep)[0]
    return Projection(idx, means[idx], cov2d[idx], conics[idx], depths[idx], bounds[idx])


@dataclass
class RenderOutput:
    color: np.ndarray       # H x W x 3
    feature: np.ndarray     # H x W x D (D = 0 when features were not rendered)
    alpha: np.ndarray       # H x W
    offsets: np.ndarray | None = None   # (H*W + 1,) CSR row pointer into the weight lists
    indices: np.ndarray | None = None   # gaussian index per blend term
    values: np.ndarray | None = None    # blend weight w = alpha_i * prod_{t<i}(1 - alpha_t)
    n_gaussians: int = 0

    @property
    def has_weights(self) -> bool:
        return self.offsets is not None

    def weights(self, row: int, col: int) -> list[tuple[int, float]]:
        """Depth-ordered (gaussian_index, w) pairs of one pixel."""
        if not self.has_weights:
            raise ValueError("render was made without capture_weights")
        p = row * self.alpha.shape[1] + col
        lo, hi = self.offsets[p], self.offsets[p + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.values[lo:hi].tolist()))

    def weight_matrix(self) -> sparse.csr_matrix:
        """Sparse (H*W) x N matrix with ``feature.reshape(-1, D) == W @ features``."""
        if not self.has_weights:
            raise ValueError("render was made without capture_weights")
        npix = self.alpha.size
        return sparse.csr_matrix((self.values, self.indices, self.offsets), shape=(npix, self.n_gaussians))


@njit(cache=True)
def _bin_tiles(bounds, tiles_x, n_tiles):
    # bounds arrive depth-sorted, so a stable fill keeps every tile list sorted
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for s in range(bounds.shape[0]):
        for ty in range(bounds[s, 2] // TILE, bounds[s, 3] // TILE + 1):
            for tx in range(bounds[s, 0] // TILE, bounds[s, 1] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    fill = counts[:-1].copy()
    out = np.empty(counts[n_tiles], dtype=np.int64)
    for s in range(bounds.shape[0]):
        for ty in range(bounds[s, 2] // TILE, bounds[s, 3] // TILE + 1):
            for tx in range(bounds[s, 0] // TILE, bounds[s, 1] // TILE + 1):
                t = ty * tiles_x + tx
                out[fill[t]] = s
                fill[t] += 1
    return counts, out


@njit(inline="always")
def _splat_alpha(dx, dy, ca, cb, cc, o):
    maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if maha > 9.0:
        return 0.0
    a = o * np.exp(-0.5 * maha)
    if a > ALPHA_MAX:
        a = ALPHA_MAX
    if a < ALPHA_MIN:
        return 0.0
    return a


@njit(inline="always")
def _tile_span(bounds, s, x0, x1, y0, y1):
    # pixel box of splat s clipped to the tile [x0, x1) x [y0, y1)
    return max(bounds[s, 0], x0), min(bounds[s, 1], x1 - 1), max(bounds[s, 2], y0), min(bounds[s, 3], y1 - 1)


@njit(parallel=True, cache=True)
def _count_kernel(height, width, tiles_x, tile_start, tile_list, means, conics, opac, bounds, counts):
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        y0 = (t // tiles_x) * TILE
        x0 = (t % tiles_x) * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        trans = np.ones(TILE * TILE)
        done = np.zeros(TILE * TILE, dtype=np.bool_)
        n = np.zeros(TILE * TILE, dtype=np.int64)
        live = (y1 - y0) * (x1 - x0)
        # splat-major walk: each pixel still sees its splats in depth order
        for j in range(tile_start[t], tile_start[t + 1]):
            if live == 0:
                break
            s = tile_list[j]
            xa, xb, ya, yb = _tile_span(bounds, s, x0, x1, y0, y1)
            mx, my = means[s, 0], means[s, 1]
            ca, cb, cc, o = conics[s, 0], conics[s, 1], conics[s, 2], opac[s]
            for py in range(ya, yb + 1):
                dy = py + 0.5 - my
                for px in range(xa, xb + 1):
                    p = (py - y0) * TILE + (px - x0)
                    if done[p]:
                        continue
                    a = _splat_alpha(px + 0.5 - mx, dy, ca, cb, cc, o)
                    if a == 0.0:
                        continue
                    n[p] += 1
                    trans[p] *= 1.0 - a
                    if trans[p] < T_MIN:
                        done[p] = True
                        live -= 1
        for py in range(y0, y1):
            for px in range(x0, x1):
                counts[py * width + px] = n[(py - y0) * TILE + (px - x0)]


@njit(parallel=True, cache=True)
def _blend_kernel(height, width, tiles_x, tile_start, tile_list, means, conics, opac, bounds, gidx,
                  colors, feats, out_color, out_feat, out_alpha, capture, offsets, w_idx, w_val):
    n_tiles = tile_start.shape[0] - 1
    d = feats.shape[1]
    nc = colors.shape[1]
    for t in prange(n_tiles):
        y0 = (t // tiles_x) * TILE
        x0 = (t % tiles_x) * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        trans = np.ones(TILE * TILE)
        done = np.zeros(TILE * TILE, dtype=np.bool_)
        acc_c = np.zeros((TILE * TILE, nc))
        acc_f = np.zeros((TILE * TILE, d))
        slot = np.zeros(TILE * TILE, dtype=np.int64)
        if capture:
            for py in range(y0, y1):
                for px in range(x0, x1):
                    slot[(py - y0) * TILE + (px - x0)] = offsets[py * width + px]
        live = (y1 - y0) * (x1 - x0)
        for j in range(tile_start[t], tile_start[t + 1]):
            if live == 0:
                break
            s = tile_list[j]
            xa, xb, ya, yb = _tile_span(bounds, s, x0, x1, y0, y1)
            mx, my = means[s, 0], means[s, 1]
            ca, cb, cc, o = conics[s, 0], conics[s, 1], conics[s, 2], opac[s]
            g = gidx[s]
            for py in range(ya, yb + 1):
                dy = py + 0.5 - my
                for px in range(xa, xb + 1):
                    p = (py - y0) * TILE + (px - x0)
                    if done[p]:
                        continue
                    a = _splat_alpha(px + 0.5 - mx, dy, ca, cb, cc, o)
                    if a == 0.0:
                        continue
                    w = a * trans[p]
                    for k in range(nc):
                        acc_c[p, k] += w * colors[s, k]
                    for k in range(d):
                        acc_f[p, k] += w * feats[s, k]
                    if capture:
                        w_idx[slot[p]] = g
                        w_val[slot[p]] = w
                        slot[p] += 1
                    trans[p] *= 1.0 - a
                    if trans[p] < T_MIN:
                        done[p] = True
                        live -= 1
        for py in range(y0, y1):
            for px in range(x0, x1):
                p = (py - y0) * TILE + (px - x0)
                for k in range(nc):
                    out_color[py, px, k] = acc_c[p, k]
                for k in range(d):
                    out_feat[py, px, k] = acc_f[p, k]
                out_alpha[py, px] = 1.0 - trans[p]


def depth_order(proj: Projection) -> np.ndarray:
    """Ascending view-space depth, ties broken by gaussian index."""
    return np.lexsort((proj.index, proj.depths))


def rasterize(
    scene: GaussianScene,
    cam: Camera,
    capture_weights: bool = False,
    render_features: bool = True,
    features: np.ndarray | None = None,
    colors: np.ndarray | None = None,
    d_code: int | None = None,
) -> RenderOutput:
    """Front-to-back alpha blending of colors and identity features.

    ``features`` / ``colors`` override the scene's per-Gaussian attributes
    (same geometry); ``d_code`` asserts the expected feature width.
    """
    feats = scene.features if features is None else np.asarray(features, dtype=np.float64)
    cols = scene.colors if colors is None else np.asarray(colors, dtype=np.float64)
    if feats.shape[0] != len(scene) or cols.shape[0] != len(scene):
        raise DimensionError("per-Gaussian attribute arrays must have one row per Gaussian")
    if d_code is not None and feats.shape[1] != d_code:
        raise DimensionError(f"scene carries d_code={feats.shape[1]}, requested {d_code}")
    if not render_features:
        feats = feats[:, :0]

    proj = project_scene(scene, cam)
    order = depth_order(proj)
    gidx = proj.index[order]
    means = np.ascontiguousarray(proj.means[order])
    conics = np.ascontiguousarray(proj.conics[order])
    bounds = np.ascontiguousarray(proj.bounds[order])
    opac = np.ascontiguousarray(scene.opacities[gidx])
    sfeat = np.ascontiguousarray(feats[gidx])
    scol = np.ascontiguousarray(cols[gidx])

    h, w = cam.height, cam.width
    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tile_start, tile_list = _bin_tiles(bounds, tiles_x, tiles_x * tiles_y)

    out_color = np.zeros((h, w, cols.shape[1]))
    out_feat = np.zeros((h, w, sfeat.shape[1]))
    out_alpha = np.zeros((h, w))
    if capture_weights:
        counts = np.zeros(h * w, dtype=np.int64)
        _count_kernel(h, w, tiles_x, tile_start, tile_list, means, conics, opac, bounds, counts)
        offsets = np.zeros(h * w + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        w_idx = np.empty(offsets[-1], dtype=np.int64)
        w_val = np.empty(offsets[-1])
    else:
        offsets = np.zeros(1, dtype=np.int64)
        w_idx = np.zeros(0, dtype=np.int64)
        w_val = np.zeros(0)
    _blend_kernel(h, w, tiles_x, tile_start, tile_list, means, conics, opac, bounds, gidx, scol, sfeat,
                  out_color, out_feat, out_alpha, capture_weights, offsets, w_idx, w_val)
    if not capture_weights:
        return RenderOutput(out_color, out_feat, out_alpha, n_gaussians=len(scene))
    return RenderOutput(out_color, out_feat, out_alpha, offsets, w_idx, w_val, len(scene))


def render_ids_image(feature: np.ndarray, alpha: np.ndarray, codebook: Codebook):
    """Per-pixel code index; thin wrapper over :func:`objsplat.metrics.assign_ids`."""
    from .metrics import assign_ids

    return assign_ids(feature, alpha, codebook)
