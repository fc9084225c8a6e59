"""Reset all colors to gray, optimize them jointly with identity features, report PSNR / SSIM.

    python scripts/reconstruction.py --iterations 1000 --size 128
"""

import argparse
import json

import numpy as np

from objsplat.experiments import run_synthetic
from objsplat.losses import ssim
from objsplat.metrics import psnr
from objsplat.optimizer import TrainConfig
from objsplat.oracle import SynthSpec
from objsplat.rasterizer import rasterize, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--views", type=int, default=20)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--reset", type=float, default=0.5)
    ap.add_argument("--lr-color", type=float, default=2.5e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    set_threads(args.threads)
    spec = SynthSpec(view_count=args.views, image_size=args.size, seed=args.seed)
    config = TrainConfig(iterations=args.iterations, optimize_color=True, learning_rate_color=args.lr_color,
                         seed=args.seed)
    res = run_synthetic(spec, config, reset_colors=args.reset)
    held = [rasterize(res.trained, v.camera, render_features=False).color for v in res.data.test_views]
    out = {
        "train_psnr": res.train_report.psnr,
        "train_ssim": res.train_report.ssim,
        "test_psnr": float(np.mean([psnr(h, v.image) for h, v in zip(held, res.data.test_views)])),
        "test_ssim": float(np.mean([ssim(h, v.image) for h, v in zip(held, res.data.test_views)])),
        "seconds": round(res.seconds, 1),
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
