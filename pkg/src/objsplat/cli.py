"""Command-line entry point: synth, optimize, render, eval, xscene, selftest.

Exit codes: 0 success, 1 runtime failure, 2 argument or validation error.
Option values resolve as command-line flag, then ``--config`` JSON file, then
built-in default; the resolved values are echoed into ``manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .scene import Codebook, PlyError, TensorFormatError, load_codebook, load_scene_ply, save_scene_ply

log = logging.getLogger("objsplat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
BACKGROUND_RGB = (32, 32, 32)
MANIFEST = "manifest.json"


class UsageError(ValueError):
    """Bad arguments or inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict
    outputs: dict
    tool_version: str = __version__
    timings: dict = field(default_factory=dict)
    renders: list = field(default_factory=list)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def ids_to_rgb(labels: np.ndarray, background: int) -> np.ndarray:
    """Code index c -> HSV(fract(c * 0.61803), 0.75, 0.95) as uint8; background -> dark gray."""
    from .oracle import code_color

    labels = np.asarray(labels)
    out = np.empty(labels.shape + (3,), dtype=np.uint8)
    for c in np.unique(labels):
        rgb = BACKGROUND_RGB if c == background else np.round(np.array(code_color(int(c))) * 255)
        out[labels == c] = rgb
    return out


def save_image(rgb: np.ndarray, path) -> None:
    """8-bit RGB as PNG or binary PPM, chosen by suffix."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise UsageError(f"unsupported image suffix {path.suffix!r} (use .png or .ppm)")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format=fmt)


# ---------------------------------------------------------------------------
# option resolution

SYNTH_DEFAULTS = {
    "objects": 5, "views": 20, "seed": 0, "codebook_seed": 0, "size": 256,
    "gaussians_per_object": 400, "background_gaussians": 900, "object_codes": None,
    "flip_prob": 0.0, "softness": 0.1, "erode": 0, "drop_prob": 0.0, "test_views": False,
}

TRAIN_DEFAULTS = {
    "iterations": 2000, "lr": 2.5e-3, "lr_color": 2.5e-3, "lambda_feature": 1.0, "lambda_3d": 1.0,
    "lambda_ssim": 0.2, "m": 1000, "k": 5, "fg_only": False, "no_resample": False,
    "optimize_color": False, "reset_colors": None, "optimizer": "adam", "seed": 0,
    "checkpoint_every": 0, "codebook": None, "resume": None,
}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags given on the command line beat the config file, which beats defaults."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in vars(args).items() if k in defaults})
    return cfg


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults (keys as the long flags, '-' -> '_')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objsplat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"objsplat {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap rasterizer worker threads (default: $OBJSPLAT_THREADS or all)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a synthetic scene directory", argument_default=S)
    _add_config(p)
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--objects", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--codebook-seed", type=int)
    p.add_argument("--size", type=int, help="image width and height")
    p.add_argument("--gaussians-per-object", type=int)
    p.add_argument("--background-gaussians", type=int)
    p.add_argument("--object-codes", type=int, nargs="+", help="global code of each object")
    p.add_argument("--flip-prob", type=float, help="chance a mask's gamma row points at a wrong code")
    p.add_argument("--softness", type=float, help="gamma mass spread over non-selected codes")
    p.add_argument("--erode", type=int, help="mask erosion in pixels")
    p.add_argument("--drop-prob", type=float, help="chance a visible object's mask is dropped")
    p.add_argument("--test-views", action="store_true", help="also write held-out orbit views")

    p = sub.add_parser("optimize", help="fit identity features of a scene directory", argument_default=S)
    _add_config(p)
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True, help="output directory for the trained scene and log")
    p.add_argument("--codebook", help="codebook GSTN (default: <scene_dir>/codebook.gstn)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float, help="identity feature learning rate")
    p.add_argument("--lr-color", type=float)
    p.add_argument("--lambda-feature", type=float)
    p.add_argument("--lambda-3d", type=float)
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--m", type=int, help="Gaussians sampled per iteration for the 3D regularizer")
    p.add_argument("--k", type=int, help="neighbors per sampled Gaussian")
    p.add_argument("--fg-only", action="store_true", help="feature loss over mask-covered pixels only")
    p.add_argument("--no-resample", action="store_true", help="draw the regularizer sample once")
    p.add_argument("--optimize-color", action="store_true")
    p.add_argument("--reset-colors", type=float, help="set every color channel to this value first")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("render", help="render one view as rgb, ids or alpha image")
    p.add_argument("scene", help="scene PLY or a directory holding scene.ply")
    p.add_argument("--cameras", help="cameras.json (default: next to the scene, else its source scene dir)")
    p.add_argument("--view", default="0", help="view index into cameras.json or view name")
    p.add_argument("--mode", default="rgb", help="rgb, ids or alpha")
    p.add_argument("--codebook", help="codebook for ids mode")
    p.add_argument("--out", required=True, help="output .png or .ppm")

    p = sub.add_parser("eval", help="object-centric metrics of a trained scene")
    p.add_argument("pred_dir", help="optimize output directory")
    p.add_argument("gt_dir", nargs="?", help="synthetic scene directory (default: the one it was trained on)")
    p.add_argument("--split", choices=("train", "test", "all"), default=None,
                   help="views to score (default: test if present, else train)")
    p.add_argument("--codebook")
    p.add_argument("--out", help="output directory (default: pred_dir/eval)")

    p = sub.add_parser("xscene", help="cross-scene identity consistency of trained scenes")
    p.add_argument("pred_dirs", nargs="+", help="optimize output directories (at least two)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="gradient checks and rasterizer oracle equivalence")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional directory for a JSON report")
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .oracle import NoiseSpec, SynthSpec, synthesize, write_scene_dir

    cfg = resolve(args, SYNTH_DEFAULTS)
    spec = SynthSpec(
        num_objects=cfg["objects"], view_count=cfg["views"], seed=cfg["seed"],
        codebook_seed=cfg["codebook_seed"], image_size=cfg["size"],
        gaussians_per_object=cfg["gaussians_per_object"],
        background_gaussians=cfg["background_gaussians"], object_codes=cfg["object_codes"],
        noise=NoiseSpec(cfg["flip_prob"], cfg["softness"], cfg["erode"], cfg["drop_prob"]),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    data = synthesize(spec, test_views=cfg["test_views"])
    out = write_scene_dir(data, args.out)
    files = sorted(p.name for p in out.iterdir() if p.name != MANIFEST)
    RunManifest("synth", cfg, spec.seed, {}, {"dir": str(out), "files": files},
                timings={"total_s": time.perf_counter() - t0}).write(out)
    log.info("wrote %d views to %s", len(data.views), out)
    return EXIT_OK


def _manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise UsageError(f"{directory} has no {MANIFEST}")
    return json.loads(path.read_text())


def cmd_optimize(args) -> int:
    from .optimizer import TrainConfig, optimize_scene, resume, save_checkpoint, write_log
    from .oracle import read_scene_dir

    cfg = resolve(args, TRAIN_DEFAULTS)
    sd = read_scene_dir(args.scene_dir, codebook_path=cfg["codebook"])
    views = [(cam, img, b) for _, cam, img, b, _ in sd.train if b is not None]
    if not views:
        raise UsageError(f"{args.scene_dir} has no training views with masks")
    config = TrainConfig(
        iterations=cfg["iterations"], learning_rate_feature=cfg["lr"], learning_rate_color=cfg["lr_color"],
        lambda_feature=cfg["lambda_feature"], lambda_3d=cfg["lambda_3d"], lambda_ssim=cfg["lambda_ssim"],
        m=cfg["m"], k=cfg["k"], include_background=not cfg["fg_only"],
        resample_regularizer=not cfg["no_resample"], optimize_color=cfg["optimize_color"],
        optimizer=cfg["optimizer"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
    )
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, state, start = sd.scene, None, 0
    if cfg["resume"]:
        scene, state, _, start = resume(cfg["resume"])
    elif cfg["reset_colors"] is not None:
        scene = scene.copy()
        scene.colors[:] = cfg["reset_colors"]

    t0 = time.perf_counter()
    every = max(1, config.iterations // 20)

    def progress(entry):
        if entry["iteration"] % every == 0:
            log.info("it %d  total %.5f  feature %.5f  3d %.5f", entry["iteration"], entry["total"],
                     entry["l_feature"], entry["l_3d"])

    trained, history = optimize_scene(scene, views, sd.codebook, config, state, start,
                                      out / "checkpoints" if config.checkpoint_every else None, progress)
    elapsed = time.perf_counter() - t0
    save_scene_ply(trained, out / "scene.ply")
    write_log(history, out / "log.jsonl")
    inputs = {"scene_dir": str(Path(args.scene_dir).resolve()),
              "codebook": str(Path(cfg["codebook"] or Path(args.scene_dir) / "codebook.gstn").resolve())}
    if cfg["resume"]:
        inputs["resume"] = str(cfg["resume"])
    RunManifest("optimize", dict(cfg, train_config=config.to_dict()), config.seed, inputs,
                {"scene": "scene.ply", "log": "log.jsonl"},
                timings={"train_s": elapsed, "per_iteration_s": elapsed / max(1, len(history))}).write(out)
    log.info("trained %d iterations in %.1f s -> %s", len(history), elapsed, out)
    return EXIT_OK


def _load_scene_and_cameras(scene_arg: str, cameras_arg: str | None):
    from .scene import load_cameras_json

    path = Path(scene_arg)
    ply = path / "scene.ply" if path.is_dir() else path
    if not ply.exists():
        raise UsageError(f"no scene at {ply}")
    if cameras_arg:
        cams = Path(cameras_arg)
    elif (ply.parent / "cameras.json").exists():
        cams = ply.parent / "cameras.json"
    elif (ply.parent / MANIFEST).exists() and "scene_dir" in _manifest(ply.parent).get("inputs", {}):
        cams = Path(_manifest(ply.parent)["inputs"]["scene_dir"]) / "cameras.json"
    else:
        raise UsageError("cannot locate cameras.json; pass --cameras")
    return load_scene_ply(ply), load_cameras_json(cams), ply, cams


def _resolve_codebook(explicit, scene_ply: Path, cams: Path) -> Codebook:
    if explicit:
        return load_codebook(explicit)
    manifest = scene_ply.parent / MANIFEST
    if manifest.exists():
        cb = json.loads(manifest.read_text()).get("inputs", {}).get("codebook")
        if cb:
            return load_codebook(cb)
    for cand in (scene_ply.parent / "codebook.gstn", cams.parent / "codebook.gstn"):
        if cand.exists():
            return load_codebook(cand)
    raise UsageError("cannot locate a codebook; pass --codebook")


def cmd_render(args) -> int:
    from .metrics import assign_ids
    from .oracle import to_uint8
    from .rasterizer import rasterize

    if args.mode not in ("rgb", "ids", "alpha"):
        raise UsageError(f"unknown render mode {args.mode!r} (use rgb, ids or alpha)")
    scene, doc, ply, cams = _load_scene_and_cameras(args.scene, args.cameras)
    views = doc["views"]
    names = [v.get("name") for v in views]
    if args.view in names:
        vi = names.index(args.view)
    else:
        try:
            vi = int(args.view)
        except ValueError:
            raise UsageError(f"no view named {args.view!r}") from None
        if not 0 <= vi < len(views):
            raise UsageError(f"camera index {vi} out of range (0..{len(views) - 1})")
    cam = views[vi]["camera"]

    t0 = time.perf_counter()
    if args.mode == "ids":
        codebook = _resolve_codebook(args.codebook, ply, cams)
        if scene.d_code != codebook.d_code:
            raise UsageError(f"scene d_code {scene.d_code} does not match codebook {codebook.d_code}")
        out = rasterize(scene, cam)
        rgb = ids_to_rgb(assign_ids(out.feature, out.alpha, codebook).labels, codebook.background_index)
    else:
        out = rasterize(scene, cam, render_features=False)
        rgb = to_uint8(out.color) if args.mode == "rgb" else np.repeat(to_uint8(out.alpha)[..., None], 3, axis=2)
    target = Path(args.out)
    save_image(rgb, target)

    entry = {"scene": str(ply), "view": vi, "mode": args.mode, "output": target.name,
             "seconds": time.perf_counter() - t0}
    mpath = target.parent / MANIFEST
    if mpath.exists():
        # one manifest per directory: renders are appended to whatever owns it
        doc = json.loads(mpath.read_text())
        doc.setdefault("renders", [])
        doc["renders"] = [r for r in doc["renders"] if r.get("output") != target.name] + [entry]
        mpath.write_text(json.dumps(doc, indent=2, sort_keys=True))
    else:
        RunManifest("render", {"mode": args.mode, "view": vi}, None,
                    {"scene": str(ply), "cameras": str(cams)}, {}, renders=[entry]).write(target.parent)
    return EXIT_OK


def _trained_views(pred_dir: Path, gt_dir, codebook_arg):
    from .oracle import read_scene_dir

    manifest = _manifest(pred_dir)
    gt_dir = Path(gt_dir or manifest.get("inputs", {}).get("scene_dir", ""))
    if not (gt_dir / "cameras.json").exists():
        raise UsageError(f"ground-truth scene directory {gt_dir} not found")
    cb_path = codebook_arg or manifest.get("inputs", {}).get("codebook")
    sd = read_scene_dir(gt_dir, codebook_path=cb_path)
    trained = load_scene_ply(pred_dir / "scene.ply")
    if trained.d_code != sd.codebook.d_code:
        raise UsageError("trained scene and codebook disagree on d_code")
    return trained, sd


def cmd_eval(args) -> int:
    from .metrics import evaluate_scene, write_report_csv, write_report_json

    pred_dir = Path(args.pred_dir)
    trained, sd = _trained_views(pred_dir, args.gt_dir, args.codebook)
    split = args.split or ("test" if sd.test else "train")
    views = {"train": sd.train, "test": sd.test, "all": sd.train + sd.test}[split]
    views = [v for v in views if v[4] is not None]
    if not views:
        raise UsageError(f"no {split} views with ground-truth labels in {sd.path}")
    t0 = time.perf_counter()
    report, _ = evaluate_scene(trained, [(cam, gt, img) for _, cam, img, _, gt in views], sd.codebook,
                               with_images=True)
    report.extra["split"] = split
    out = Path(args.out) if args.out else pred_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    name = sd.path.name
    write_report_json(out / "report.json", [report], [name])
    write_report_csv(out / "report.csv", [report], [name])
    RunManifest("eval", {"split": split}, None, {"pred_dir": str(pred_dir), "gt_dir": str(sd.path)},
                {"report": "report.json", "table": "report.csv"},
                timings={"total_s": time.perf_counter() - t0}).write(out)
    print(json.dumps({k: report.to_dict()[k] for k in ("fg_ari", "ari_a", "fg_ami", "ami_a", "miou")}
                     | report.extra))
    return EXIT_OK


def cmd_xscene(args) -> int:
    from .metrics import cross_scene_consistency

    if len(args.pred_dirs) < 2:
        raise UsageError("xscene needs at least two trained scenes")
    entries, codebook = [], None
    for d in args.pred_dirs:
        trained, sd = _trained_views(Path(d), None, None)
        if codebook is None:
            codebook = sd.codebook
        elif not np.array_equal(codebook.codes, sd.codebook.codes):
            raise UsageError(f"{d} was trained against a different codebook")
        views = [(cam, gt) for _, cam, _, _, gt in sd.train + sd.test if gt is not None]
        entries.append((trained, views, sd.assignment))
    t0 = time.perf_counter()
    frac, details = cross_scene_consistency(entries, codebook, return_details=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"consistency": frac, **details, "scenes": [str(d) for d in args.pred_dirs]}
    (out / "xscene.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    RunManifest("xscene", {}, None, {"pred_dirs": [str(d) for d in args.pred_dirs]},
                {"report": "xscene.json"}, timings={"total_s": time.perf_counter() - t0}).write(out)
    print(json.dumps({"consistency": frac}))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .checks import selftest

    results = selftest(args.instances, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.value:.3e} (tol {r.tolerance:g}, {r.seconds:.1f} s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selftest.json").write_text(json.dumps([r.to_dict() for r in results], indent=2))
        RunManifest("selftest", {"instances": args.instances}, args.seed, {}, {"report": "selftest.json"},
                    timings={"total_s": sum({r.name: r.seconds for r in results}.values())}).write(out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth, "optimize": cmd_optimize, "render": cmd_render,
    "eval": cmd_eval, "xscene": cmd_xscene, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .rasterizer import set_threads

    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        set_threads(args.threads)
        return COMMANDS[args.command](args)
    except (UsageError, PlyError, TensorFormatError, FileNotFoundError, ValueError) as exc:
        print(f"objsplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"objsplat {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
