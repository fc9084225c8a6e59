"""End-to-end experiment drivers on synthetic scenes (shared by scripts and tests)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalReport, cross_scene_consistency, evaluate_scene
from .optimizer import TrainConfig, optimize_scene
from .oracle import NoiseSpec, SynthData, SynthSpec, make_codebook, synthesize
from .rasterizer import project_scene, rasterize
from .scene import GaussianScene


@dataclass
class RunResult:
    data: SynthData
    trained: GaussianScene
    history: list
    train_report: EvalReport
    test_report: EvalReport | None
    train_ids: list
    test_ids: list
    seconds: float
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "seconds": round(self.seconds, 2),
            "train_pixel_accuracy": self.train_report.extra["pixel_accuracy"],
            "train_fg_ari": self.train_report.fg_ari,
            "train_miou": self.train_report.miou,
            "final_loss": self.history[-1]["total"] if self.history else None,
        }
        if self.test_report is not None:
            out["test_fg_ari"] = self.test_report.fg_ari
            out["test_pixel_accuracy"] = self.test_report.extra["pixel_accuracy"]
        if self.train_report.psnr is not None:
            out["train_psnr"] = self.train_report.psnr
        out.update(self.extra)
        return out


def run_synthetic(spec: SynthSpec, config: TrainConfig, reset_colors: float | None = None,
                  codebook=None, data: SynthData | None = None, callback=None) -> RunResult:
    """Synthesize (unless ``data`` is given), optimize, and score train and held-out views."""
    if data is None:
        data = synthesize(spec, codebook, test_views=True)
    scene = data.scene.copy()
    if reset_colors is not None:
        scene.colors[:] = reset_colors
    t0 = time.perf_counter()
    trained, history = optimize_scene(scene, data.train_triples, data.codebook, config, callback=callback)
    seconds = time.perf_counter() - t0
    train_views = [(v.camera, v.gt_labels, v.image) for v in data.views]
    train_report, train_ids = evaluate_scene(trained, train_views, data.codebook, with_images=True)
    test_report, test_ids = None, []
    if data.test_views:
        test_views = [(v.camera, v.gt_labels, v.image) for v in data.test_views]
        test_report, test_ids = evaluate_scene(trained, test_views, data.codebook, with_images=True)
    return RunResult(data, trained, history, train_report, test_report, train_ids, test_ids, seconds)


def noisy(spec: SynthSpec, flip: float = 0.1, erode: int = 2) -> SynthSpec:
    """Copy of ``spec`` with gamma flips and mask erosion."""
    return SynthSpec(**{**spec.__dict__, "noise": NoiseSpec(gamma_flip_prob=flip, mask_erode_px=erode)})


def cross_scene(spec_a: SynthSpec, spec_b: SynthSpec, config: TrainConfig) -> tuple[float, dict]:
    """Train two scenes against one shared codebook and measure identity consistency."""
    codebook = make_codebook(spec_a.library_size, spec_a.d_code, spec_a.codebook_seed)
    entries = []
    for spec in (spec_a, spec_b):
        res = run_synthetic(spec, config, codebook=codebook)
        views = [(v.camera, v.gt_labels) for v in res.data.views + res.data.test_views]
        entries.append((res.trained, views, res.data.assignment))
    return cross_scene_consistency(entries, codebook, return_details=True)


def benchmark_scene(n: int, seed: int = 0) -> GaussianScene:
    """``n`` small Gaussians filling the view of :func:`benchmark_camera`, features of width 0."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(2.0, 6.0, size=n)
    xy = rng.uniform(-0.4, 0.4, size=(n, 2)) * z[:, None]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(np.column_stack([xy, z]), rng.uniform(0.005, 0.03, size=(n, 3)), q,
                         rng.uniform(0.2, 0.9, size=n), rng.uniform(size=(n, 3)), np.zeros((n, 0)))


def benchmark_camera(size: int = 256):
    from .scene import Camera

    return Camera(size, size, size * 1.2, size * 1.2, size / 2, size / 2, np.eye(4))


def render_fps(scene: GaussianScene, cam, frames: int = 20, warmup: int = 2) -> float:
    """Forward renders (color, alpha; no weight capture) per second."""
    for _ in range(warmup):
        rasterize(scene, cam)
    t0 = time.perf_counter()
    for _ in range(frames):
        rasterize(scene, cam)
    return frames / (time.perf_counter() - t0)


def visible_fraction(scene: GaussianScene, cam) -> float:
    return len(project_scene(scene, cam).index) / len(scene)
