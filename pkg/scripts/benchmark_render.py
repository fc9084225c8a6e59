"""Forward-render throughput of random Gaussians at a fixed resolution.

    python scripts/benchmark_render.py --gaussians 50000 --size 256 --threads 8
"""

import argparse
import json
import os

from objsplat.experiments import benchmark_camera, benchmark_scene, render_fps, visible_fraction
from objsplat.rasterizer import set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[50_000])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    used = set_threads(args.threads)
    cam = benchmark_camera(args.size)
    rows = []
    for n in args.gaussians:
        scene = benchmark_scene(n)
        rows.append({"gaussians": n, "size": args.size, "threads": used, "cpus": os.cpu_count(),
                     "visible": round(visible_fraction(scene, cam), 3),
                     "fps": round(render_fps(scene, cam, args.frames), 2)})
        print(json.dumps(rows[-1]), flush=True)


if __name__ == "__main__":
    main()
