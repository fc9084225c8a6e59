"""Synthetic desk scenes with ground-truth masks standing in for a pre-trained slot model.

Everything here is a pure function of the spec and its seeds.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .rasterizer import quat_to_rotmat, rasterize
from .scene import (
    Camera, Codebook, GaussianScene, load_cameras_json, load_codebook, load_scene_ply,
    load_tensor, save_cameras_json, save_codebook, save_scene_ply, save_tensor,
)
from .supervision import MaskBundle

MAX_SLOTS = 7
LIBRARY_SIZE = 11
D_CODE = 122


@dataclass
class NoiseSpec:
    gamma_flip_prob: float = 0.0
    gamma_softness: float = 0.1
    mask_erode_px: int = 0
    drop_mask_prob: float = 0.0


@dataclass
class SynthSpec:
    num_objects: int = 5
    library_size: int = LIBRARY_SIZE
    max_slots: int = MAX_SLOTS
    gaussians_per_object: int = 400
    background_gaussians: int = 900
    view_count: int = 20
    orbit_radius: float = 2.2
    orbit_height: float = 1.4
    image_size: int = 256
    fov_deg: float = 40.0
    seed: int = 0
    codebook_seed: int = 0
    d_code: int = D_CODE
    object_codes: list | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)

    def validate(self) -> None:
        if not 1 <= self.num_objects <= self.max_slots:
            raise ValueError(f"num_objects must be in 1..{self.max_slots}, got {self.num_objects}")
        if self.num_objects > self.library_size:
            raise ValueError("more objects than codebook entries")
        if self.object_codes is not None:
            codes = list(self.object_codes)
            if len(codes) != self.num_objects or len(set(codes)) != len(codes):
                raise ValueError("object_codes must list num_objects distinct codes")
            if not all(0 <= c < self.library_size for c in codes):
                raise ValueError("object_codes out of range")
        if self.view_count < 1 or self.image_size < 1:
            raise ValueError("need at least one view and a positive image size")
        if self.gaussians_per_object < 1 or self.background_gaussians < 0:
            raise ValueError("bad Gaussian counts")
        n = self.noise
        for name in ("gamma_flip_prob", "drop_mask_prob"):
            if not 0 <= getattr(n, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= n.gamma_softness < 1 or n.mask_erode_px < 0:
            raise ValueError("bad noise parameters")

    def to_dict(self) -> dict:
        return asdict(self)


def code_color(code: int) -> tuple[float, float, float]:
    """Deterministic RGB in [0, 1] for a code index (golden-ratio hue)."""
    return colorsys.hsv_to_rgb((code * 0.61803) % 1.0, 0.75, 0.95)


def make_codebook(C: int = LIBRARY_SIZE, d_code: int = D_CODE, seed: int = 0,
                  max_cosine: float = 0.5) -> Codebook:
    """Unit-norm codes with pairwise cosine similarity at most ``max_cosine`` (rejection sampling)."""
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    attempts = 0
    while len(rows) < C:
        attempts += 1
        if attempts > 100000:
            raise RuntimeError("could not sample a well-separated codebook")
        v = rng.normal(size=d_code)
        v /= np.linalg.norm(v)
        if all(float(v @ r) <= max_cosine for r in rows):
            rows.append(v)
    return Codebook(np.stack(rows))


def _yaw_quat(theta: float) -> np.ndarray:
    return np.array([np.cos(theta / 2), 0.0, 0.0, np.sin(theta / 2)])


def _quat_from_normal(n: np.ndarray) -> np.ndarray:
    """Rotation taking +z onto unit vector ``n``."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    s = np.linalg.norm(axis)
    c = float(z @ n)
    if s < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0]) if c > 0 else np.array([0.0, 1.0, 0.0, 0.0])
    half = np.arctan2(s, c) / 2
    axis /= s
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _shell_points(rng, kind: str, half: np.ndarray, n: int):
    """Points and outward normals on an ellipsoid or box surface (local frame)."""
    if kind == "ellipsoid":
        # Fibonacci sphere keeps the shell evenly covered
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5**0.5) * i + rng.uniform(0, 2 * np.pi)
        u = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        pts = u * half
        normals = u / half
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return pts, normals
    areas = np.array([half[1] * half[2], half[1] * half[2], half[0] * half[2],
                      half[0] * half[2], half[0] * half[1], half[0] * half[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    for f in range(6):
        sel = face == f
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
        normals[sel, axis] = sign
    return pts, normals


def _place_objects(rng, n_obj: int, radii: np.ndarray, area: float = 0.6):
    centers: list[np.ndarray] = []
    for i in range(n_obj):
        for _ in range(10000):
            c = rng.uniform(-area, area, size=2)
            if all(np.linalg.norm(c - o) > radii[i] + radii[j] + 0.05 for j, o in enumerate(centers)):
                centers.append(c)
                break
        else:
            raise RuntimeError("could not place objects without overlap")
    return np.array(centers)


def generate_scene(spec: SynthSpec) -> tuple[GaussianScene, dict[int, int]]:
    """Objects as Gaussian shells on a planar carpet; returns the scene and object -> code map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.object_codes is not None:
        codes = [int(c) for c in spec.object_codes]
    else:
        codes = [int(c) for c in rng.choice(spec.library_size, size=spec.num_objects, replace=False)]
    assignment = {i: c for i, c in enumerate(codes)}

    half_sizes = rng.uniform(0.14, 0.22, size=(spec.num_objects, 3))
    half_sizes[:, 2] = rng.uniform(0.12, 0.24, size=spec.num_objects)
    kinds = rng.choice(["ellipsoid", "box"], size=spec.num_objects)
    yaw = rng.uniform(0, np.pi, size=spec.num_objects)
    centers = _place_objects(rng, spec.num_objects, np.linalg.norm(half_sizes[:, :2], axis=1))

    pos, scl, rot, opa, col, gid = [], [], [], [], [], []
    n = spec.gaussians_per_object
    for i in range(spec.num_objects):
        half = half_sizes[i]
        pts, normals = _shell_points(rng, kinds[i], half, n)
        qyaw = _yaw_quat(yaw[i])
        rmat = quat_to_rotmat(qyaw)
        area = _surface_area(kinds[i], half)
        spacing = np.sqrt(area / n)
        pos.append(pts @ rmat.T + np.array([centers[i, 0], centers[i, 1], half[2]]))
        world_n = normals @ rmat.T
        rot.append(np.stack([_quat_mul(_quat_from_normal(nv), _yaw_quat(rng.uniform(0, np.pi))) for nv in world_n]))
        scl.append(np.tile([0.75 * spacing, 0.75 * spacing, 0.2 * spacing], (n, 1)))
        opa.append(np.full(n, 0.97))
        col.append(np.tile(code_color(codes[i]), (n, 1)))
        gid.append(np.full(n, i))

    nb = spec.background_gaussians
    if nb:
        side = int(np.ceil(np.sqrt(nb)))
        extent = 1.1
        step = 2 * extent / side
        g = (np.arange(side) + 0.5) * step - extent
        gx, gy = np.meshgrid(g, g, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], axis=1)[:nb]
        pos.append(grid)
        scl.append(np.tile([0.7 * step, 0.7 * step, 0.005], (nb, 1)))
        rot.append(np.tile([1.0, 0.0, 0.0, 0.0], (nb, 1)))
        opa.append(np.full(nb, 0.98))
        checker = ((np.floor((grid[:, 0] + extent) / 0.25) + np.floor((grid[:, 1] + extent) / 0.25)) % 2)
        col.append(np.stack([0.35 + 0.2 * checker] * 3, axis=1) * np.array([1.0, 0.95, 0.85]))
        gid.append(np.full(nb, -1))

    rotations = np.concatenate(rot)
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    n_total = sum(len(p) for p in pos)
    scene = GaussianScene(
        positions=np.concatenate(pos),
        scales=np.concatenate(scl),
        rotations=rotations,
        opacities=np.concatenate(opa),
        colors=np.concatenate(col),
        features=np.zeros((n_total, spec.d_code)),
        gt_ids=np.concatenate(gid),
    )
    return scene, assignment


def _surface_area(kind: str, half: np.ndarray) -> float:
    a, b, c = half
    if kind == "box":
        return 8 * (a * b + b * c + a * c)
    p = 1.6075  # Knud Thomsen approximation
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def orbit_cameras(spec: SynthSpec, held_out: bool = False) -> list[Camera]:
    """Cameras on a circle around the table, evenly spaced from azimuth 0.

    Held-out cameras sit halfway between consecutive training azimuths.
    """
    f = spec.image_size / 2 / np.tan(np.radians(spec.fov_deg) / 2)
    cams = []
    offset = 0.5 if held_out else 0.0
    for v in range(spec.view_count):
        az = 2 * np.pi * (v + offset) / spec.view_count
        eye = [spec.orbit_radius * np.cos(az), spec.orbit_radius * np.sin(az), spec.orbit_height]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.1], [0.0, 0.0, 1.0], spec.image_size, spec.image_size, f,
                                   near=0.05, far=20.0))
    return cams


@dataclass
class View:
    camera: Camera
    gt_labels: np.ndarray   # H x W code indices, C = background
    image: np.ndarray       # H x W x 3 in [0, 1]


def label_map(scene: GaussianScene, cam: Camera, assignment: dict[int, int], C: int):
    """Code index of the object with the largest blended weight per pixel.

    Background Gaussians (gt_id -1) form their own group; pixels won by it or
    with alpha below 0.5 get label ``C``. Also returns the color render.
    """
    out = rasterize(scene, cam, capture_weights=True, render_features=False)
    n_groups = max(assignment) + 2 if assignment else 1
    groups = scene.gt_ids[out.indices] + 1
    pix = np.repeat(np.arange(out.alpha.size), np.diff(out.offsets))
    mass = np.bincount(pix * n_groups + groups, weights=out.values,
                       minlength=out.alpha.size * n_groups).reshape(out.alpha.shape + (n_groups,))
    win = np.argmax(mass, axis=-1)
    lut = np.full(n_groups, C, dtype=np.int64)
    for obj, code in assignment.items():
        lut[obj + 1] = code
    labels = lut[win]
    labels[out.alpha < 0.5] = C
    return labels, out.color


def generate_views(scene: GaussianScene, spec: SynthSpec, assignment: dict[int, int],
                   held_out: bool = False) -> list[View]:
    return [
        View(cam, *label_map(scene, cam, assignment, spec.library_size))
        for cam in orbit_cameras(spec, held_out)
    ]


def make_bundle(gt_labels: np.ndarray, assignment: dict[int, int], spec: SynthSpec, view_seed: int) -> MaskBundle:
    """Masks in a fresh random slot order plus near-one-hot mask-to-code rows, with optional noise."""
    C, K = spec.library_size, spec.max_slots
    noise = spec.noise
    rng = np.random.default_rng((spec.seed, view_seed))
    present = set(np.unique(gt_labels).tolist())
    visible = [obj for obj in sorted(assignment) if assignment[obj] in present]
    if len(visible) > K:
        raise ValueError(f"{len(visible)} visible objects exceed {K} slots")
    perm = rng.permutation(K)
    h, w = gt_labels.shape
    masks = np.zeros((K, h, w))
    gamma = np.full((K, C), 1.0 / C)
    low = noise.gamma_softness / (C - 1)
    for i, obj in enumerate(visible):
        code = assignment[obj]
        flip = rng.random() < noise.gamma_flip_prob
        wrong = int(rng.choice([c for c in range(C) if c != code]))
        drop = rng.random() < noise.drop_mask_prob
        if drop:
            continue
        slot = perm[i]
        m = gt_labels == code
        if noise.mask_erode_px:
            m = ndimage.binary_erosion(m, iterations=noise.mask_erode_px)
        masks[slot] = m
        gamma[slot] = low
        gamma[slot, wrong if flip else code] = 1.0 - noise.gamma_softness
    return MaskBundle(masks, gamma, view_seed)


@dataclass
class SynthData:
    spec: SynthSpec
    scene: GaussianScene
    codebook: Codebook
    assignment: dict
    views: list
    bundles: list
    test_views: list = field(default_factory=list)

    @property
    def train_triples(self):
        return [(v.camera, v.image, b) for v, b in zip(self.views, self.bundles)]


def synthesize(spec: SynthSpec, codebook: Codebook | None = None, test_views: bool = False) -> SynthData:
    if codebook is None:
        codebook = make_codebook(spec.library_size, spec.d_code, spec.codebook_seed)
    scene, assignment = generate_scene(spec)
    views = generate_views(scene, spec, assignment)
    bundles = [make_bundle(v.gt_labels, assignment, spec, i) for i, v in enumerate(views)]
    held = generate_views(scene, spec, assignment, held_out=True) if test_views else []
    return SynthData(spec, scene, codebook, assignment, views, bundles, held)


# ---------------------------------------------------------------------------
# scene directory


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_scene_dir(data: SynthData, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene_ply(data.scene, out / "scene.ply", with_features=False)
    save_codebook(data.codebook, out / "codebook.gstn")
    entries = []
    for i, (v, b) in enumerate(zip(data.views, data.bundles)):
        stem = f"view_{i:03d}"
        Image.fromarray(to_uint8(v.image)).save(out / f"{stem}.png")
        b.save(out, stem)
        save_tensor(v.gt_labels, out / f"{stem}.gt_labels.gstn")
        entries.append({"name": stem, "split": "train", "camera": v.camera})
    for i, v in enumerate(data.test_views):
        stem = f"test_{i:03d}"
        Image.fromarray(to_uint8(v.image)).save(out / f"{stem}.png")
        save_tensor(v.gt_labels, out / f"{stem}.gt_labels.gstn")
        entries.append({"name": stem, "split": "test", "camera": v.camera})
    save_cameras_json(
        out / "cameras.json", entries, config=data.spec.to_dict(),
        objects={str(k): v for k, v in data.assignment.items()},
        background_label=data.codebook.C,
    )
    return out


@dataclass
class SceneDir:
    path: Path
    scene: GaussianScene
    codebook: Codebook
    assignment: dict
    train: list     # (name, camera, image, bundle or None, gt_labels or None)
    test: list
    config: dict


def read_scene_dir(path, scene_file: str = "scene.ply", codebook_path=None) -> SceneDir:
    path = Path(path)
    doc = load_cameras_json(path / "cameras.json")
    codebook = load_codebook(codebook_path or path / "codebook.gstn")
    scene = load_scene_ply(path / scene_file, d_code=None)
    if scene.d_code != codebook.d_code:
        if np.any(scene.features):
            raise ValueError(f"scene d_code {scene.d_code} does not match codebook {codebook.d_code}")
        scene.features = np.zeros((len(scene), codebook.d_code))
    train, test = [], []
    for i, v in enumerate(doc["views"]):
        name = v["name"]
        img_path = path / f"{name}.png"
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0 if img_path.exists() else None
        gt_path = path / f"{name}.gt_labels.gstn"
        gt = load_tensor(gt_path).astype(np.int64) if gt_path.exists() else None
        bundle = None
        if (path / f"{name}.masks.gstn").exists():
            bundle = MaskBundle.load(path, name, i)
        (train if v.get("split", "train") == "train" else test).append((name, v["camera"], image, bundle, gt))
    assignment = {int(k): int(c) for k, c in doc.get("objects", {}).items()}
    return SceneDir(path, scene, codebook, assignment, train, test, doc.get("config", {}))


def spec_from_dict(d: dict) -> SynthSpec:
    d = dict(d)
    d["noise"] = NoiseSpec(**d.get("noise", {}))
    return SynthSpec(**d)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
