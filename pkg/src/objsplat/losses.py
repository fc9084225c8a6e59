"""Training losses on identity features and colors, with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .scene import Codebook, DimensionError, GaussianScene

PROB_FLOOR = 1e-8
OPACITY_ELIGIBLE = 0.1
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class DegenerateInputError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossReport:
    l_rend: float
    l_feature: float
    l_3d: float
    total: float
    lambda_feature: float = 1.0
    lambda_3d: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(l_rend: float, l_feature: float, l_3d: float,
               lambda_feature: float = 1.0, lambda_3d: float = 1.0) -> LossReport:
    for name, v in (("l_rend", l_rend), ("l_feature", l_feature), ("l_3d", l_3d)):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is not finite ({v})")
    total = l_rend + lambda_feature * l_feature + lambda_3d * l_3d
    return LossReport(float(l_rend), float(l_feature), float(l_3d), float(total),
                      float(lambda_feature), float(lambda_3d))


# ---------------------------------------------------------------------------
# feature supervision


def feature_loss(F: np.ndarray, F_star: np.ndarray, covered: np.ndarray | None = None,
                 include_background: bool = True) -> tuple[float, np.ndarray]:
    """Mean over pixels in the loss domain of the squared L2 feature error.

    The domain is every pixel with ``include_background``, otherwise only the
    covered ones. Returns the loss and dL/dF.
    """
    if F.shape != F_star.shape:
        raise DimensionError(f"rendered {F.shape} and target {F_star.shape} differ")
    diff = F - F_star
    if include_background or covered is None:
        n = diff.shape[0] * diff.shape[1]
        if n == 0:
            raise DegenerateInputError("loss domain is empty")
        loss = float(np.einsum("hwd,hwd->", diff, diff)) / n
        return loss, diff * (2.0 / n)
    n = int(np.count_nonzero(covered))
    if n == 0:
        raise DegenerateInputError("no covered pixels in the loss domain")
    diff = diff * covered[..., None]
    loss = float(np.einsum("hwd,hwd->", diff, diff)) / n
    return loss, diff * (2.0 / n)


# ---------------------------------------------------------------------------
# class probabilities and 3D regularization


def _cosine(f: np.ndarray, codes: np.ndarray):
    fn = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(fn <= 1e-12):
        raise DegenerateInputError("identity feature has zero norm; cosine similarity is undefined")
    en = np.linalg.norm(codes, axis=1)
    if np.any(en <= 1e-12):
        raise DegenerateInputError("codebook contains a zero row")
    f_hat = f / fn
    e_hat = codes / en[:, None]
    return f_hat @ e_hat.T, f_hat, fn, e_hat


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(f: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Softmax over cosine similarities to the C object codes (background excluded).

    Accepts a single feature (D,) or a batch (..., D).
    """
    s, *_ = _cosine(np.asarray(f, dtype=np.float64), codebook.codes)
    return _softmax(s)


@dataclass
class NeighborIndex:
    """Top-k nearest neighbors by center distance, self excluded, ties by index."""

    neighbors: np.ndarray   # (N, k) gaussian indices, -1 where a point is not a candidate
    k: int

    def __getitem__(self, i: int) -> np.ndarray:
        return self.neighbors[i]


def build_neighbor_index(positions: np.ndarray, k: int, candidates: np.ndarray | None = None) -> NeighborIndex:
    """k-NN lists over ``candidates`` (boolean mask; default all points).

    Non-candidate rows are filled with -1.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    cand = np.arange(n) if candidates is None else np.nonzero(candidates)[0]
    if len(cand) < k + 1:
        raise DegenerateInputError(f"need at least {k + 1} candidate Gaussians, have {len(cand)}")
    pts = positions[cand]
    tree = cKDTree(pts)
    out = np.full((n, k), -1, dtype=np.int64)
    q = min(k + 4, len(cand))
    dist, loc = tree.query(pts, k=q)
    dist = np.atleast_2d(dist)
    loc = np.atleast_2d(loc)
    for row in range(len(cand)):
        # exact sort key: squared distance recomputed, then global index
        others = loc[row][loc[row] != row]
        d2 = np.sum((pts[others] - pts[row]) ** 2, axis=1)
        order = np.lexsort((cand[others], d2))
        if q < len(cand) and d2[order[k - 1]] >= np.max(d2) * (1 - 1e-12):
            # ties may extend past the queried set: fall back to a radius query
            r = math.sqrt(d2[order[k - 1]]) * (1 + 1e-9) + 1e-300
            others = np.array([j for j in tree.query_ball_point(pts[row], r) if j != row])
            d2 = np.sum((pts[others] - pts[row]) ** 2, axis=1)
            order = np.lexsort((cand[others], d2))
        out[cand[row]] = cand[others[order[:k]]]
    return NeighborIndex(out, k)


def sample_regularizer(opacities: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Indices of ``m`` Gaussians drawn uniformly among those with opacity > 0.1."""
    eligible = np.nonzero(opacities > OPACITY_ELIGIBLE)[0]
    if len(eligible) == 0:
        raise DegenerateInputError("no Gaussian has opacity above 0.1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(eligible, size=m, replace=m > len(eligible)))


def _probs_and_backward(f: np.ndarray, codebook: Codebook):
    s, f_hat, fn, e_hat = _cosine(f, codebook.codes)
    p = _softmax(s)

    def backward(g_p: np.ndarray) -> np.ndarray:
        g_s = p * (g_p - np.sum(g_p * p, axis=-1, keepdims=True))
        g_fhat = g_s @ e_hat
        return (g_fhat - np.sum(g_fhat * f_hat, axis=-1, keepdims=True) * f_hat) / fn

    return p, backward


def reg3d_loss(scene: GaussianScene, codebook: Codebook, index: NeighborIndex, m: int, k: int,
               seed: int, features: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean KL(p_i || p_j) between sampled Gaussians and their k nearest neighbors.

    Returns the loss and a dense N x D gradient (zero for untouched Gaussians).
    The codebook receives no gradient.
    """
    feats = scene.features if features is None else np.asarray(features, dtype=np.float64)
    if k > index.k:
        raise DegenerateInputError(f"index holds {index.k} neighbors, {k} requested")
    eligible = scene.opacities > OPACITY_ELIGIBLE
    if np.count_nonzero(eligible) < k + 1:
        raise DegenerateInputError(f"need at least {k + 1} Gaussians with opacity > 0.1")
    src = sample_regularizer(scene.opacities, m, seed)
    nbr = index.neighbors[src, :k]
    if np.any(nbr < 0):
        raise DegenerateInputError("a sampled Gaussian has no neighbor list")

    touched, inverse = np.unique(np.concatenate([src, nbr.ravel()]), return_inverse=True)
    p, backward = _probs_and_backward(feats[touched], codebook)
    pi = p[inverse[: len(src)]][:, None, :]          # m x 1 x C
    pj = p[inverse[len(src):]].reshape(len(src), k, -1)  # m x k x C
    li = np.log(np.maximum(pi, PROB_FLOOR))
    lj = np.log(np.maximum(pj, PROB_FLOOR))
    scale = 1.0 / (len(src) * k)
    loss = float(np.sum(pi * (li - lj))) * scale

    g_pi = ((li - lj) + (pi >= PROB_FLOOR)).sum(axis=1) * scale     # m x C
    g_pj = (-pi / np.maximum(pj, PROB_FLOOR) * (pj >= PROB_FLOOR)) * scale
    g_p = np.zeros_like(p)
    np.add.at(g_p, inverse[: len(src)], g_pi)
    np.add.at(g_p, inverse[len(src):], g_pj.reshape(-1, g_pj.shape[-1]))
    grad = np.zeros_like(feats)
    grad[touched] = backward(g_p)
    return loss, grad


# ---------------------------------------------------------------------------
# image rendering loss


def gaussian_kernel_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


def _filter(x: np.ndarray, g: np.ndarray, mode: str = "reflect") -> np.ndarray:
    # the 2D window is separable
    return ndimage.correlate1d(ndimage.correlate1d(x, g, axis=0, mode=mode), g, axis=1, mode=mode)


def ssim(img: np.ndarray, ref: np.ndarray, return_grad: bool = False):
    """Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5), data range 1.

    Border pixels within 5 px of the edge are excluded from the mean. With
    ``return_grad`` also returns dSSIM/d``img``.
    """
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DimensionError(f"image shapes differ: {img.shape} vs {ref.shape}")
    squeeze = img.ndim == 2
    if squeeze:
        img, ref = img[..., None], ref[..., None]
    win = gaussian_kernel_1d()
    pad = win.shape[0] // 2
    h, w, nc = img.shape
    if h <= 2 * pad or w <= 2 * pad:
        raise DimensionError(f"images must exceed {2 * pad + 1} px per side for SSIM")
    crop = (slice(pad, h - pad), slice(pad, w - pad))
    n_valid = (h - 2 * pad) * (w - 2 * pad) * nc
    total = 0.0
    grad = np.zeros_like(img) if return_grad else None
    for ch in range(nc):
        x, y = img[..., ch], ref[..., ch]
        mx, my = _filter(x, win), _filter(y, win)
        exx, eyy, exy = _filter(x * x, win), _filter(y * y, win), _filter(x * y, win)
        a1 = 2 * mx * my + SSIM_C1
        a2 = 2 * (exy - mx * my) + SSIM_C2
        b1 = mx * mx + my * my + SSIM_C1
        b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
        smap = (a1 * a2) / (b1 * b2)
        total += float(smap[crop].sum())
        if return_grad:
            sel = np.zeros_like(x)
            sel[crop] = 1.0 / n_valid
            d_mx = smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) * sel
            d_exx = -smap / b2 * sel
            d_exy = 2 * smap / a2 * sel
            # window is symmetric and the cropped map never reads padding,
            # so the adjoint of the filter is a zero-padded correlation
            grad[..., ch] = (_filter(d_mx, win, "constant") + 2 * x * _filter(d_exx, win, "constant")
                             + y * _filter(d_exy, win, "constant"))
    value = total / n_valid
    if return_grad:
        return value, grad[..., 0] if squeeze else grad
    return value


def render_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2,
                return_grad: bool = False):
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if not return_grad:
        return (1 - lambda_ssim) * l1 + lambda_ssim * (1 - ssim(rendered, target))
    s, g_s = ssim(rendered, target, return_grad=True)
    g = (1 - lambda_ssim) * np.sign(diff) / diff.size - lambda_ssim * g_s
    return (1 - lambda_ssim) * l1 + lambda_ssim * (1 - s), g
