"""Per-scene optimization of identity features (and optionally DC colors).

Geometry and opacity stay frozen. Each iteration renders one view with blend
weights captured, so feature and color gradients are exact pull-backs
``dL/df_i = sum_u w_iu * dL/dF_u``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import __version__
from .losses import (
    NonFiniteLossError, build_neighbor_index, feature_loss, reg3d_loss, render_loss, total_loss,
    OPACITY_ELIGIBLE,
)
from .rasterizer import rasterize
from .scene import Camera, Codebook, GaussianScene, load_tensor, save_scene_ply, save_tensor
from .supervision import MaskBundle, select_code

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate_feature: float = 2.5e-3
    learning_rate_color: float = 2.5e-3
    lambda_feature: float = 1.0
    lambda_3d: float = 1.0
    lambda_ssim: float = 0.2
    m: int = 1000
    k: int = 5
    include_background: bool = True
    resample_regularizer: bool = True
    optimize_color: bool = False
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0
    feature_init_std: float = 1e-3

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.learning_rate_feature <= 0 or self.learning_rate_color <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    step: int
    m_feat: np.ndarray
    v_feat: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray

    @classmethod
    def zeros(cls, scene: GaussianScene) -> "OptimizerState":
        return cls(0, np.zeros_like(scene.features), np.zeros_like(scene.features),
                   np.zeros_like(scene.colors), np.zeros_like(scene.colors))


class TrainingAborted(RuntimeError):
    pass


def _adam(param, grad, m, v, step, lr):
    b1, b2 = ADAM_BETAS
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def view_schedule(n_views: int, seed: int, iteration: int) -> int:
    """View for a 0-based iteration: each epoch visits every view once in a seeded shuffle."""
    epoch, pos = divmod(iteration, n_views)
    return int(np.random.default_rng([seed, epoch]).permutation(n_views)[pos])


def init_features(scene: GaussianScene, d_code: int, std: float, seed: int) -> np.ndarray:
    """Zero-width or all-zero features get small seeded noise so cosine similarity is defined."""
    if scene.d_code == d_code and np.any(scene.features):
        return scene.features.copy()
    rng = np.random.default_rng([seed, 7])
    return rng.normal(0.0, std, size=(len(scene), d_code))


class _ViewTarget:
    """Dense target for one view kept as (pixel x slot) coefficients times slot codes."""

    def __init__(self, bundle: MaskBundle, codebook: Codebook):
        _, feats = select_code(bundle.gamma, codebook)
        masks = bundle.masks.reshape(bundle.K, -1).T
        covered = masks.sum(axis=1) > 0.5
        coef = np.hstack([masks * covered[:, None], (~covered)[:, None].astype(np.float64)])
        self.codes = np.vstack([feats, codebook.background_code[None]])
        keep = np.any(coef != 0, axis=0)
        self.coef = np.ascontiguousarray(coef[:, keep])
        self.codes = self.codes[keep]
        self.covered = covered

    def dense(self) -> np.ndarray:
        return self.coef @ self.codes


_ROW_BLOCK = 256


@njit(parallel=True, cache=True)
def _fused_feature_residual(offsets, indices, values, feats, coef, codes, in_domain, out_resid):
    """out_resid[p] = sum_i w_pi f_i - sum_j coef_pj code_j on domain rows, 0 elsewhere.

    Returns per-block sums of squared residuals; block boundaries are fixed so
    the reduction order does not depend on the thread count.
    """
    npix = offsets.shape[0] - 1
    d = feats.shape[1]
    nblocks = (npix + _ROW_BLOCK - 1) // _ROW_BLOCK
    partial = np.zeros(nblocks)
    for b in prange(nblocks):
        acc = 0.0
        for p in range(b * _ROW_BLOCK, min((b + 1) * _ROW_BLOCK, npix)):
            r = out_resid[p]
            if not in_domain[p]:
                r[:] = 0.0
                continue
            for k in range(d):
                r[k] = 0.0
            for e in range(offsets[p], offsets[p + 1]):
                w = values[e]
                f = feats[indices[e]]
                for k in range(d):
                    r[k] += w * f[k]
            for j in range(coef.shape[1]):
                c = coef[p, j]
                if c != 0.0:
                    for k in range(d):
                        r[k] -= c * codes[j, k]
            for k in range(d):
                acc += r[k] * r[k]
        partial[b] = acc
    return partial


def feature_step(out, features: np.ndarray, target: "_ViewTarget", include_background: bool = True):
    """Feature loss of one captured render and its gradient w.r.t. per-Gaussian features.

    Equivalent to ``feature_loss(W @ features, target)`` pulled back through
    ``W.T`` but without materializing the rendered feature map separately.
    """
    domain = np.ones(out.alpha.size, dtype=np.bool_) if include_background else target.covered
    n = int(np.count_nonzero(domain))
    if n == 0:
        raise ValueError("loss domain is empty")
    resid = np.empty((out.alpha.size, features.shape[1]))
    partial = _fused_feature_residual(out.offsets, out.indices, out.values, features,
                                      target.coef, target.codes, domain, resid)
    loss = float(partial.sum()) / n
    grad = out.weight_matrix().T @ resid
    grad *= 2.0 / n
    return loss, grad


def optimize_scene(
    scene: GaussianScene,
    views,
    codebook: Codebook,
    config: TrainConfig | None = None,
    state: OptimizerState | None = None,
    start_iteration: int = 0,
    checkpoint_dir=None,
    callback=None,
):
    """Fit identity features to codebook targets over the given views.

    ``views`` is a sequence of (Camera, image or None, MaskBundle). Returns the
    trained scene copy and the per-iteration log (list of dicts). Passing the
    ``state`` / ``start_iteration`` returned by :func:`resume` continues a run
    on exactly the same trajectory.
    """
    config = config or TrainConfig()
    config.validate()
    views = list(views)
    if not views:
        raise ValueError("need at least one view")
    for cam, image, bundle in views:
        if tuple(bundle.shape) != (cam.height, cam.width):
            raise ValueError(f"mask size {bundle.shape} does not match camera {cam.height}x{cam.width}")
        if image is not None and image.shape[:2] != (cam.height, cam.width):
            raise ValueError("image size does not match camera")

    scene = scene.copy()
    if state is None:
        scene.features = init_features(scene, codebook.d_code, config.feature_init_std, config.seed)
        state = OptimizerState.zeros(scene)
    elif scene.d_code != codebook.d_code:
        raise ValueError("resumed scene does not match the codebook width")

    targets = [_ViewTarget(b, codebook) for _, _, b in views]
    use_reg = config.lambda_3d != 0
    if use_reg:
        index = build_neighbor_index(scene.positions, config.k, scene.opacities > OPACITY_ELIGIBLE)
    rend_cache: dict[int, float] = {}
    history = []
    t0 = time.perf_counter()

    for it in range(start_iteration, config.iterations):
        vi = view_schedule(len(views), config.seed, it)
        cam, image, _ = views[vi]
        tgt = targets[vi]
        out = rasterize(scene, cam, capture_weights=True, render_features=False)
        l_feat, g_feat = feature_step(out, scene.features, tgt, config.include_background)
        g_feat *= config.lambda_feature

        l_3d = 0.0
        if use_reg:
            rseed = [config.seed, it] if config.resample_regularizer else [config.seed]
            l_3d, g3 = reg3d_loss(scene, codebook, index, config.m, config.k, rseed)
            g_feat += config.lambda_3d * g3

        l_rend = 0.0
        g_color = None
        if image is not None:
            if config.optimize_color:
                l_rend, dC = render_loss(out.color, image, config.lambda_ssim, return_grad=True)
                g_color = out.weight_matrix().T @ dC.reshape(-1, 3)
            else:
                if vi not in rend_cache:
                    rend_cache[vi] = render_loss(out.color, image, config.lambda_ssim)
                l_rend = rend_cache[vi]

        try:
            report = total_loss(l_rend, l_feat, l_3d, config.lambda_feature, config.lambda_3d)
        except NonFiniteLossError as exc:
            raise TrainingAborted(f"iteration {it + 1}: {exc}") from exc

        state.step += 1
        if config.optimizer == "adam":
            _adam(scene.features, g_feat, state.m_feat, state.v_feat, state.step, config.learning_rate_feature)
            if g_color is not None:
                _adam(scene.colors, g_color, state.m_color, state.v_color, state.step, config.learning_rate_color)
        else:
            scene.features -= config.learning_rate_feature * g_feat
            if g_color is not None:
                scene.colors -= config.learning_rate_color * g_color
        if g_color is not None:
            np.clip(scene.colors, 0.0, 1.0, out=scene.colors)

        entry = {"iteration": it + 1, "view": vi, **report.to_dict(),
                 "elapsed_s": round(time.perf_counter() - t0, 4)}
        history.append(entry)
        if callback is not None:
            callback(entry)
        if checkpoint_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, scene, state, config, it + 1)
    return scene, history


def features_gradient(scene: GaussianScene, cam: Camera, bundle: MaskBundle, codebook: Codebook,
                      include_background: bool = True):
    """Feature loss of one view and its gradient w.r.t. every Gaussian's identity feature."""
    tgt = _ViewTarget(bundle, codebook)
    out = rasterize(scene, cam, capture_weights=True, render_features=False)
    W = out.weight_matrix()
    loss, dF = feature_loss((W @ scene.features)[None], tgt.dense()[None], tgt.covered[None], include_background)
    return loss, W.T @ dF[0]


# ---------------------------------------------------------------------------
# checkpoints

_PARAMS = ("positions", "scales", "rotations", "opacities", "colors", "features", "gt_ids")
_MOMENTS = ("m_feat", "v_feat", "m_color", "v_color")


def save_checkpoint(directory, scene: GaussianScene, state: OptimizerState, config: TrainConfig,
                    iteration: int) -> Path:
    """PLY for inspection plus float64 GSTN copies of every array, so a resume is exact."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / ".partial"
    tmp.mkdir(exist_ok=True)
    save_scene_ply(scene, tmp / "scene.ply")
    for name in _PARAMS:
        save_tensor(getattr(scene, name), tmp / f"{name}.gstn", dtype="f64")
    for name in _MOMENTS:
        save_tensor(getattr(state, name), tmp / f"adam_{name}.gstn", dtype="f64")
    meta = {"version": CHECKPOINT_VERSION, "tool_version": __version__, "iteration": iteration,
            "step": state.step, "config": config.to_dict()}
    (tmp / "checkpoint.json").write_text(json.dumps(meta, indent=2))
    # swap in only once every file is written, so a crash keeps the previous checkpoint
    for f in tmp.iterdir():
        f.replace(d / f.name)
    tmp.rmdir()
    return d


def resume(directory):
    """Load a checkpoint: returns (scene, OptimizerState, TrainConfig, iteration)."""
    d = Path(directory)
    meta_path = d / "checkpoint.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {d}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')} is not supported")
    arrays = {name: load_tensor(d / f"{name}.gstn") for name in _PARAMS}
    scene = GaussianScene(**arrays)
    state = OptimizerState(meta["step"], *(load_tensor(d / f"adam_{n}.gstn") for n in _MOMENTS))
    return scene, state, TrainConfig(**meta["config"]), int(meta["iteration"])


def write_log(history, path) -> None:
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")
