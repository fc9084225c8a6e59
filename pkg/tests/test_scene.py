import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from objsplat.scene import (
    Camera, Codebook, DimensionError, Gaussian, GaussianScene, PlyError, TensorFormatError,
    load_cameras_json, load_codebook, load_scene_ply, load_tensor, save_cameras_json, save_codebook,
    save_scene_ply, save_tensor,
)

from conftest import make_scene


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def test_single_gaussian_ply_exact(tmp_path):
    g = Gaussian(np.array([0.5, -1.0, 2.0]), np.ones(3), np.array([1.0, 0, 0, 0]), 1.0,
                 np.array([0.2, 0.4, 0.6]), np.zeros(3))
    scene = GaussianScene.from_gaussians([g])
    save_scene_ply(scene, tmp_path / "one.ply")
    back = load_scene_ply(tmp_path / "one.ply", d_code=3)
    assert len(back) == 1
    assert back.opacities[0] == 1.0
    np.testing.assert_array_equal(back.scales[0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(back.positions[0], [0.5, -1.0, 2.0])


@given(st.integers(1, 30), st.integers(0, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_ply_round_trip_is_f32_exact(tmp_path_factory, n, d_code, seed, with_gt):
    scene = make_scene(n, d_code, seed)
    if with_gt:
        scene.gt_ids = np.random.default_rng(seed).integers(-1, 5, size=n)
    path = tmp_path_factory.mktemp("ply") / "s.ply"
    save_scene_ply(scene, path)
    back = load_scene_ply(path, d_code=d_code)
    for name in ("positions", "scales", "opacities", "colors", "features"):
        np.testing.assert_array_equal(getattr(back, name), f32(getattr(scene, name)))
    np.testing.assert_array_equal(back.gt_ids, scene.gt_ids if with_gt else -1)
    # a second pass through the file format is the identity
    save_scene_ply(back, path)
    assert load_scene_ply(path, d_code=d_code).equals(back)


def test_header_counts_and_optional_properties(tmp_path):
    scene = make_scene(2, 0)
    save_scene_ply(scene, tmp_path / "a.ply")
    head = (tmp_path / "a.ply").read_bytes().split(b"end_header")[0].decode()
    assert "element vertex 2" in head
    assert "id_feat" not in head and "gt_id" not in head
    scene = make_scene(2, 3)
    scene.gt_ids = np.array([0, -1])
    save_scene_ply(scene, tmp_path / "b.ply")
    head = (tmp_path / "b.ply").read_bytes().split(b"end_header")[0].decode()
    assert "property int gt_id" in head and "id_feat_2" in head


def test_missing_features_load_as_zeros(tmp_path):
    save_scene_ply(make_scene(3, 4), tmp_path / "s.ply", with_features=False)
    back = load_scene_ply(tmp_path / "s.ply", d_code=7)
    assert back.features.shape == (3, 7) and not back.features.any()
    assert load_scene_ply(tmp_path / "s.ply").d_code == 122


def test_d_code_mismatch(tmp_path):
    save_scene_ply(make_scene(3, 4), tmp_path / "s.ply")
    with pytest.raises(DimensionError):
        load_scene_ply(tmp_path / "s.ply", d_code=5)


def _raw_ply(lines, payload=b""):
    return ("\n".join(lines) + "\n").encode() + payload


def test_missing_rot_3_is_parse_error(tmp_path):
    props = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
             "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
    lines = ["ply", "format binary_little_endian 1.0", "element vertex 1"]
    lines += [f"property float {p}" for p in props] + ["end_header"]
    (tmp_path / "bad.ply").write_bytes(_raw_ply(lines, b"\0" * 4 * len(props)))
    with pytest.raises(PlyError, match="rot_3"):
        load_scene_ply(tmp_path / "bad.ply")


def test_malformed_header_names_line(tmp_path):
    lines = ["ply", "format binary_little_endian 1.0", "element vertex 1", "property float x",
             "propertyy float y", "end_header"]
    (tmp_path / "bad.ply").write_bytes(_raw_ply(lines))
    with pytest.raises(PlyError, match="line 5"):
        load_scene_ply(tmp_path / "bad.ply")
    (tmp_path / "ascii.ply").write_bytes(_raw_ply(["ply", "format ascii 1.0", "end_header"]))
    with pytest.raises(PlyError, match="line 2"):
        load_scene_ply(tmp_path / "ascii.ply")


def test_truncated_ply_payload(tmp_path):
    save_scene_ply(make_scene(4, 2), tmp_path / "s.ply")
    data = (tmp_path / "s.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(PlyError):
        load_scene_ply(tmp_path / "t.ply")


def test_loading_twice_compares_equal(tmp_path):
    save_scene_ply(make_scene(6, 3), tmp_path / "s.ply")
    assert load_scene_ply(tmp_path / "s.ply").equals(load_scene_ply(tmp_path / "s.ply"))


# GSTN


def test_gstn_byte_layout(tmp_path):
    save_tensor(np.zeros((2, 3)), tmp_path / "z.gstn")
    data = (tmp_path / "z.gstn").read_bytes()
    assert len(data) == 4 + 1 + 1 + 16 + 24
    assert data[:4] == b"GSTN" and data[4] == 0 and data[5] == 2
    assert struct.unpack("<2Q", data[6:22]) == (2, 3)


@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_gstn_round_trip_exact_bytes(tmp_path_factory, shape, seed):
    arr = np.random.default_rng(seed).uniform(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("t") / "a.gstn"
    save_tensor(arr, path)
    back = load_tensor(path)
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_gstn_f64_extension(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    save_tensor(arr, tmp_path / "a.gstn", dtype="f64")
    back = load_tensor(tmp_path / "a.gstn")
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, arr)


def test_gstn_errors(tmp_path):
    save_tensor(np.ones((4, 4)), tmp_path / "a.gstn")
    data = (tmp_path / "a.gstn").read_bytes()
    (tmp_path / "trunc.gstn").write_bytes(data[:-3])
    with pytest.raises(TensorFormatError, match="size mismatch"):
        load_tensor(tmp_path / "trunc.gstn")
    (tmp_path / "magic.gstn").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(TensorFormatError, match="magic"):
        load_tensor(tmp_path / "magic.gstn")
    (tmp_path / "dtype.gstn").write_bytes(data[:4] + b"\x07" + data[5:])
    with pytest.raises(TensorFormatError, match="dtype"):
        load_tensor(tmp_path / "dtype.gstn")
    (tmp_path / "rank.gstn").write_bytes(data[:5] + b"\x03" + data[6:])
    with pytest.raises(TensorFormatError):
        load_tensor(tmp_path / "rank.gstn")


def test_mask_tensor_round_trip_bytes(tmp_path):
    masks = (np.random.default_rng(1).uniform(size=(7, 16, 12)) > 0.5).astype(np.float32)
    save_tensor(masks, tmp_path / "m.gstn")
    save_tensor(load_tensor(tmp_path / "m.gstn"), tmp_path / "m2.gstn")
    assert (tmp_path / "m.gstn").read_bytes() == (tmp_path / "m2.gstn").read_bytes()


# validation and small types


def test_scene_validation():
    with pytest.raises(ValueError, match="unit length"):
        make_scene(2, 1, rotations=np.array([[1.0, 0, 0, 0], [1.0, 1.0, 0, 0]]))
    with pytest.raises(ValueError, match="scales"):
        make_scene(2, 1, scales=np.array([[1.0, 1, 1], [1, 0, 1]]))
    with pytest.raises(ValueError, match="opacities"):
        make_scene(2, 1, opacities=np.array([0.5, 1.5]))
    with pytest.raises(DimensionError):
        make_scene(2, 1, features=np.zeros((3, 1)))
    with pytest.raises(DimensionError):
        GaussianScene.from_gaussians([make_scene(1, 2)[0], make_scene(1, 3)[0]])


def test_scene_item_and_subset():
    scene = make_scene(4, 2)
    g = scene[2]
    assert g.gt_object_id is None
    np.testing.assert_array_equal(g.position, scene.positions[2])
    sub = scene.subset([1, 3])
    assert len(sub) == 2 and np.array_equal(sub.features[1], scene.features[3])
    assert GaussianScene.from_gaussians(scene.gaussians).equals(scene)


def test_camera_validation_and_look_at():
    with pytest.raises(ValueError):
        Camera(8, 8, 8, 8, 4, 4, np.eye(4), near=1.0, far=0.5)
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(8, 8, 8, 8, 4, 4, bad)
    cam = Camera.look_at([3.0, 0, 1], [0, 0, 0], [0, 0, 1], 32, 32, 30.0)
    np.testing.assert_allclose(cam.center, [3.0, 0, 1], atol=1e-12)
    target_cam = cam.rotation @ np.zeros(3) + cam.translation
    assert abs(target_cam[0]) < 1e-12 and abs(target_cam[1]) < 1e-12 and target_cam[2] > 0
    # world up projects toward the top of the image (negative y in OpenCV axes)
    assert (cam.rotation @ np.array([0, 0, 1.0]))[1] < 0


def test_camera_json_round_trip(tmp_path):
    cam = Camera.look_at([1.0, 2, 3], [0, 0, 0], [0, 0, 1], 40, 30, 25.0, near=0.1, far=50)
    save_cameras_json(tmp_path / "c.json", [{"name": "v0", "camera": cam}], config={"a": 1}, objects={"0": 3})
    doc = load_cameras_json(tmp_path / "c.json")
    back = doc["views"][0]["camera"]
    assert doc["config"] == {"a": 1} and doc["objects"] == {"0": 3}
    assert back.to_dict() == cam.to_dict()
    json.loads((tmp_path / "c.json").read_text())


def test_codebook(tmp_path):
    cb = Codebook(np.arange(6.0).reshape(2, 3))
    assert cb.C == 2 and cb.d_code == 3 and cb.background_index == 2
    np.testing.assert_array_equal(cb.with_background()[-1], 0)
    with pytest.raises(ValueError):
        Codebook(np.array([[np.nan, 1.0]]))
    with pytest.raises(DimensionError):
        Codebook(np.zeros((0, 3)))
    save_codebook(cb, tmp_path / "cb.gstn")
    np.testing.assert_array_equal(load_codebook(tmp_path / "cb.gstn").codes, cb.codes)
