"""Gaussian scenes, cameras, codebooks and their on-disk formats.

Scenes are stored struct-of-arrays so the rasterizer and optimizer can work on
whole columns; :class:`Gaussian` is the per-element view used at API edges.

On-disk conventions
-------------------
PLY (binary little-endian, one ``vertex`` element)::

    x y z scale_0..2 rot_0..3 opacity f_dc_0..2 [gt_id] [id_feat_0..D-1]

Scale and opacity are stored in the linear domain (no log / logit encoding),
``rot`` is a (w, x, y, z) unit quaternion and ``f_dc`` is plain RGB in [0, 1].
``gt_id`` is int32 with -1 meaning "no object".

GSTN tensor container::

    b"GSTN" | dtype u8 (0=f32, 1=f64) | rank u8 | rank x u64 dims | payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_D_CODE = 122

_REQUIRED_PROPS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Malformed or unsupported PLY file."""


class DimensionError(ValueError):
    """Array shapes or feature widths disagree."""


class TensorFormatError(ValueError):
    """Malformed GSTN container."""


@dataclass
class Gaussian:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    identity_feature: np.ndarray
    gt_object_id: int | None = None


@dataclass
class GaussianScene:
    """N Gaussians stored column-wise.

    ``features`` is N x d_code. Geometry columns are float64 in memory; files
    hold float32, so anything loaded from PLY is exactly representable.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    gt_ids: np.ndarray = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise DimensionError(f"features must be N x d_code with N={n}, got {features.shape}")
        self.features = features
        if self.gt_ids is None:
            self.gt_ids = np.full(n, -1, dtype=np.int64)
        self.gt_ids = np.asarray(self.gt_ids, dtype=np.int64).reshape(n)
        self.validate()

    def validate(self) -> None:
        if len(self) < 1:
            raise ValueError("a scene needs at least one Gaussian")
        if self.d_code < 0:
            raise DimensionError("d_code must be non-negative")
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(qn - 1.0)))
            raise ValueError(f"rotation of Gaussian {bad} is not unit length (|q|={qn[bad]!r})")
        if np.any(~(self.scales > 0)):
            raise ValueError("scales must be positive")
        if np.any(~((self.opacities >= 0) & (self.opacities <= 1))):
            raise ValueError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def d_code(self) -> int:
        return self.features.shape[1]

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Gaussian:
        gid = int(self.gt_ids[i])
        return Gaussian(
            position=self.positions[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            identity_feature=self.features[i].copy(),
            gt_object_id=None if gid < 0 else gid,
        )

    @classmethod
    def from_gaussians(cls, gaussians, d_code: int | None = None) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            raise ValueError("a scene needs at least one Gaussian")
        widths = {len(g.identity_feature) for g in gaussians}
        if len(widths) != 1 or (d_code is not None and widths != {d_code}):
            raise DimensionError(f"identity features disagree on d_code: {sorted(widths)}")
        return cls(
            positions=[g.position for g in gaussians],
            scales=[g.scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            colors=[g.color for g in gaussians],
            features=np.stack([np.asarray(g.identity_feature, dtype=np.float64) for g in gaussians]),
            gt_ids=[-1 if g.gt_object_id is None else g.gt_object_id for g in gaussians],
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(), self.scales.copy(), self.rotations.copy(),
            self.opacities.copy(), self.colors.copy(), self.features.copy(),
            self.gt_ids.copy(),
        )

    def subset(self, index) -> "GaussianScene":
        return GaussianScene(
            self.positions[index], self.scales[index], self.rotations[index],
            self.opacities[index], self.colors[index], self.features[index],
            self.gt_ids[index],
        )

    def equals(self, other: "GaussianScene") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("positions", "scales", "rotations", "opacities", "colors", "features", "gt_ids")
        )


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, +z forward).

    Pixel (row, col) has its center at image coordinates (col + 0.5, row + 0.5).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            width=int(d["width"]), height=int(d["height"]),
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)),
        )

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(width, height, fx, fx if fy is None else fy, width / 2, height / 2, w2c, near, far)


@dataclass
class Codebook:
    """C object codes plus a background code that sits at index C."""

    codes: np.ndarray
    background_code: np.ndarray = field(default=None)

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise DimensionError(f"codebook must be a non-empty C x D matrix, got {self.codes.shape}")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("codebook contains non-finite entries")
        if self.background_code is None:
            self.background_code = np.zeros(self.d_code)
        self.background_code = np.asarray(self.background_code, dtype=np.float64).reshape(self.d_code)

    @property
    def C(self) -> int:
        return self.codes.shape[0]

    @property
    def d_code(self) -> int:
        return self.codes.shape[1]

    @property
    def background_index(self) -> int:
        return self.C

    def with_background(self) -> np.ndarray:
        """(C + 1) x D matrix, background row last."""
        return np.vstack([self.codes, self.background_code[None]])


# ---------------------------------------------------------------------------
# PLY


def _ply_header(n: int, d_code: int, with_gt: bool) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in _REQUIRED_PROPS]
    if with_gt:
        lines.append("property int gt_id")
    lines += [f"property float id_feat_{i}" for i in range(d_code)]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_scene_ply(scene: GaussianScene, path, with_features: bool = True) -> None:
    """Write ``scene`` as binary little-endian PLY.

    ``gt_id`` is written only when some Gaussian carries a label; identity
    features are omitted entirely for a zero-width scene or ``with_features=False``.
    """
    n = len(scene)
    d = scene.d_code if with_features else 0
    with_gt = bool(np.any(scene.gt_ids >= 0))
    fields = [(name, "<f4") for name in _REQUIRED_PROPS]
    if with_gt:
        fields.append(("gt_id", "<i4"))
    fields += [(f"id_feat_{i}", "<f4") for i in range(d)]
    rec = np.empty(n, dtype=np.dtype(fields))
    cols = np.concatenate(
        [scene.positions, scene.scales, scene.rotations, scene.opacities[:, None], scene.colors], axis=1
    )
    for j, name in enumerate(_REQUIRED_PROPS):
        rec[name] = cols[:, j]
    if with_gt:
        rec["gt_id"] = scene.gt_ids
    for i in range(d):
        rec[f"id_feat_{i}"] = scene.features[:, i]
    with open(path, "wb") as fh:
        fh.write(_ply_header(n, d, with_gt))
        fh.write(rec.tobytes())


def _parse_ply_header(fh):
    first = fh.readline()
    if first.rstrip(b"\r\n") != b"ply":
        raise PlyError(f"line 1: {first!r}: missing 'ply' magic")
    count = None
    props: list[tuple[str, str]] = []
    seen_format = False
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: unexpected end of file before end_header")
        text = raw.decode("ascii", errors="replace").strip()
        tok = text.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise PlyError(f"line {lineno}: {text!r}: only binary_little_endian 1.0 is supported")
            seen_format = True
        elif tok[0] == "element":
            if count is not None or len(tok) != 3 or tok[1] != "vertex":
                raise PlyError(f"line {lineno}: {text!r}: expected a single 'element vertex N'")
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyError(f"line {lineno}: {text!r}: bad element count") from None
        elif tok[0] == "property":
            if count is None:
                raise PlyError(f"line {lineno}: {text!r}: property before element")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyError(f"line {lineno}: {text!r}: unsupported property declaration")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
        else:
            raise PlyError(f"line {lineno}: {text!r}: unknown header keyword")
    if not seen_format:
        raise PlyError(f"line {lineno}: header has no format line")
    if count is None:
        raise PlyError(f"line {lineno}: header declares no vertex element")
    return count, props, lineno


def load_scene_ply(path, d_code: int | None = None) -> GaussianScene:
    """Read a scene written by :func:`save_scene_ply` (or any PLY with the same properties).

    Missing ``id_feat_*`` properties give zero features of width ``d_code``
    (default 122). Unknown extra properties are ignored.
    """
    with open(path, "rb") as fh:
        n, props, end_line = _parse_ply_header(fh)
        names = [p for p, _ in props]
        for req in _REQUIRED_PROPS:
            if req not in names:
                raise PlyError(f"line {end_line}: 'end_header': required property {req!r} is missing")
        dtype = np.dtype(props)
        payload = fh.read()
    if len(payload) < n * dtype.itemsize:
        raise PlyError(f"payload holds {len(payload)} bytes, header promises {n * dtype.itemsize}")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    feat_names = sorted(
        (p for p in names if p.startswith("id_feat_")), key=lambda s: int(s.rsplit("_", 1)[1])
    )
    if feat_names != [f"id_feat_{i}" for i in range(len(feat_names))]:
        raise PlyError(f"line {end_line}: id_feat properties are not contiguous from 0")
    if feat_names:
        if d_code is not None and d_code != len(feat_names):
            raise DimensionError(f"file has {len(feat_names)} identity features, expected {d_code}")
        features = np.stack([rec[p] for p in feat_names], axis=1).astype(np.float64)
    else:
        features = np.zeros((n, DEFAULT_D_CODE if d_code is None else d_code))

    def col(*ps):
        return np.stack([rec[p] for p in ps], axis=1).astype(np.float64)

    return GaussianScene(
        positions=col("x", "y", "z"),
        scales=col("scale_0", "scale_1", "scale_2"),
        rotations=col("rot_0", "rot_1", "rot_2", "rot_3"),
        opacities=rec["opacity"].astype(np.float64),
        colors=col("f_dc_0", "f_dc_1", "f_dc_2"),
        features=features,
        gt_ids=rec["gt_id"].astype(np.int64) if "gt_id" in names else None,
    )


# ---------------------------------------------------------------------------
# GSTN

_GSTN_MAGIC = b"GSTN"
_GSTN_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(array, path, dtype: str = "f32") -> None:
    """Write ``array`` as a GSTN container. ``dtype`` is "f32" (default) or "f64"."""
    code = {"f32": 0, "f64": 1}[dtype]
    arr = np.asarray(array, dtype=_GSTN_DTYPES[code])
    if arr.ndim > 255:
        raise TensorFormatError("rank above 255 cannot be encoded")
    head = _GSTN_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != _GSTN_MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    code, rank = data[4], data[5]
    if code not in _GSTN_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    head = 6 + 8 * rank
    if len(data) < head:
        raise TensorFormatError(f"{path}: truncated dimension block")
    dims = struct.unpack(f"<{rank}Q", data[6:head])
    dt = _GSTN_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) - head != expected:
        raise TensorFormatError(
            f"{path}: size mismatch, payload is {len(data) - head} bytes but dims {dims} need {expected}"
        )
    return np.frombuffer(data, dtype=dt, offset=head).reshape(dims).copy()


def save_codebook(codebook: Codebook, path) -> None:
    save_tensor(codebook.codes, path)


def load_codebook(path) -> Codebook:
    return Codebook(load_tensor(path).astype(np.float64))


# ---------------------------------------------------------------------------
# camera / config JSON


def save_cameras_json(path, views: list[dict], config: dict | None = None, **extra) -> None:
    """``views`` entries are dicts with at least a ``camera`` (:class:`Camera`) and ``name``."""
    doc = {"version": 1, "views": [], "config": config or {}}
    doc.update(extra)
    for v in views:
        entry = {k: val for k, val in v.items() if k != "camera"}
        entry.update(v["camera"].to_dict())
        doc["views"].append(entry)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_cameras_json(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for v in doc["views"]:
        v["camera"] = Camera.from_dict(v)
    return doc
