"""Reference implementations and numerical self-checks.

The brute-force renderer here shares no code path with the tiled kernel
beyond :func:`objsplat.rasterizer.project_gaussian`: every pixel blends every
projected splat after one global depth sort. The finite-difference checks
perturb one identity-feature coordinate at a time and re-render.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .losses import build_neighbor_index, feature_loss, reg3d_loss
from .rasterizer import ALPHA_MAX, ALPHA_MIN, SIGMA_CUTOFF, T_MIN, project_gaussian, rasterize
from .scene import Camera, Codebook, GaussianScene
from .supervision import MaskBundle, build_target


@dataclass
class ReferenceRender:
    color: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray   # (H*W) x N dense blend weights


def reference_render(scene: GaussianScene, cam: Camera, features: np.ndarray | None = None) -> ReferenceRender:
    """Untiled front-to-back blending, vectorized over pixels."""
    feats = scene.features if features is None else np.asarray(features, dtype=np.float64)
    h, w = cam.height, cam.width
    splats = [s for i, g in enumerate(scene.gaussians) if (s := project_gaussian(g, cam, i)) is not None]
    splats.sort(key=lambda s: (s.depth, s.gaussian_index))

    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = px.ravel() + 0.5, py.ravel() + 0.5
    trans = np.ones(h * w)
    color = np.zeros((h * w, 3))
    feature = np.zeros((h * w, feats.shape[1]))
    weights = np.zeros((h * w, len(scene)))
    for s in splats:
        inv = np.linalg.inv(s.cov2d)
        dx, dy = px - s.mean2d[0], py - s.mean2d[1]
        maha = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        a = np.minimum(scene.opacities[s.gaussian_index] * np.exp(-0.5 * maha), ALPHA_MAX)
        live = (maha <= SIGMA_CUTOFF**2) & (a >= ALPHA_MIN) & (trans >= T_MIN)
        a = np.where(live, a, 0.0)
        wgt = a * trans
        weights[:, s.gaussian_index] = wgt
        color += wgt[:, None] * scene.colors[s.gaussian_index]
        feature += wgt[:, None] * feats[s.gaussian_index]
        trans *= 1.0 - a
    return ReferenceRender(color.reshape(h, w, 3), feature.reshape(h, w, -1),
                           (1.0 - trans).reshape(h, w), weights)


def random_scene(n: int, d_code: int, seed: int, depth=(2.0, 5.0), scale_range=(0.03, 0.3),
                 opacity_range=(0.05, 1.0)) -> GaussianScene:
    """Seeded Gaussians scattered inside the view of :func:`check_camera`."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(*depth, size=n)
    xy = rng.uniform(-0.35, 0.35, size=(n, 2)) * z[:, None]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        positions=np.column_stack([xy, z]),
        scales=np.exp(rng.uniform(*np.log(scale_range), size=(n, 3))),
        rotations=q,
        opacities=rng.uniform(*opacity_range, size=n),
        colors=rng.uniform(size=(n, 3)),
        features=rng.normal(size=(n, d_code)),
    )


def check_camera(size: int = 64) -> Camera:
    """Camera at the origin looking down +z with a ~53 degree field of view."""
    return Camera(size, size, float(size), float(size), size / 2, size / 2, np.eye(4))


def random_bundle(shape, K: int, C: int, seed: int) -> MaskBundle:
    """Soft, non-overlapping masks (per-pixel mass <= 1) and row-stochastic gamma."""
    rng = np.random.default_rng(seed)
    raw = rng.uniform(size=(K + 1,) + tuple(shape)) ** 3
    masks = (raw / raw.sum(axis=0))[:K]
    gamma = rng.dirichlet(np.ones(C), size=K)
    return MaskBundle(masks, gamma)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)

    def to_dict(self) -> dict:
        return dict(asdict(self), passed=self.passed)


def oracle_equivalence(n: int = 100, size: int = 64, d_code: int = 8, seed: int = 0) -> dict:
    """Max abs difference between tiled and brute-force renders, per channel."""
    scene = random_scene(n, d_code, seed)
    cam = check_camera(size)
    out = rasterize(scene, cam, capture_weights=True)
    ref = reference_render(scene, cam)
    return {
        "color": float(np.abs(out.color - ref.color).max()),
        "feature": float(np.abs(out.feature - ref.feature).max()),
        "alpha": float(np.abs(out.alpha - ref.alpha).max()),
        "weights": float(np.abs(out.weight_matrix().toarray() - ref.weights).max()),
    }


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def feature_gradient_error(seed: int, n: int = 50, d_code: int = 8, C: int = 5, size: int = 24,
                           eps: float = 1e-3, include_background: bool = True) -> float:
    """Relative error of the pulled-back feature-loss gradient against central differences."""
    scene = random_scene(n, d_code, seed)
    cam = check_camera(size)
    rng = np.random.default_rng([seed, 1])
    codebook = Codebook(rng.normal(size=(C, d_code)))
    F_star, covered = build_target(random_bundle((size, size), 3, C, seed), codebook)

    def loss(f):
        return feature_loss(rasterize(scene, cam, features=f).feature, F_star, covered, include_background)

    out = rasterize(scene, cam, capture_weights=True)
    _, dF = loss(scene.features)
    analytic = out.weight_matrix().T @ dF.reshape(-1, d_code)
    numeric = np.zeros_like(scene.features)
    for i in range(n):
        for d in range(d_code):
            f = scene.features.copy()
            f[i, d] += eps
            lp = loss(f)[0]
            f[i, d] -= 2 * eps
            numeric[i, d] = (lp - loss(f)[0]) / (2 * eps)
    return _rel_error(analytic, numeric)


def reg3d_gradient_error(seed: int, n: int = 50, d_code: int = 8, C: int = 5, m: int = 20, k: int = 3,
                         eps: float = 1e-3) -> float:
    """Relative error of the KL regularizer gradient against central differences."""
    scene = random_scene(n, d_code, seed)
    codebook = Codebook(np.random.default_rng([seed, 2]).normal(size=(C, d_code)))
    index = build_neighbor_index(scene.positions, k, scene.opacities > 0.1)
    _, analytic = reg3d_loss(scene, codebook, index, m, k, seed)
    numeric = np.zeros_like(scene.features)
    for i in range(n):
        for d in range(d_code):
            f = scene.features.copy()
            f[i, d] += eps
            lp = reg3d_loss(scene, codebook, index, m, k, seed, features=f)[0]
            f[i, d] -= 2 * eps
            numeric[i, d] = (lp - reg3d_loss(scene, codebook, index, m, k, seed, features=f)[0]) / (2 * eps)
    return _rel_error(analytic, numeric)


def selftest(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """Oracle equivalence plus gradient checks; every result carries its tolerance."""
    results = []
    t = time.perf_counter()
    diffs = oracle_equivalence(seed=seed)
    dt = time.perf_counter() - t
    results += [CheckResult(f"render_equivalence_{k}", v, 1e-5, dt) for k, v in diffs.items()]
    t = time.perf_counter()
    err = max(feature_gradient_error(seed + i) for i in range(instances))
    results.append(CheckResult("feature_loss_gradient", err, 1e-4, time.perf_counter() - t))
    t = time.perf_counter()
    err = max(reg3d_gradient_error(seed + i) for i in range(instances))
    results.append(CheckResult("reg3d_gradient", err, 1e-4, time.perf_counter() - t))
    return results
