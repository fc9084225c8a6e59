import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from objsplat.oracle import SynthSpec, synthesize
from objsplat.scene import Camera, Codebook, GaussianScene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_scene(n=5, d_code=4, seed=0, **overrides):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    fields = dict(
        positions=rng.normal(size=(n, 3)),
        scales=rng.uniform(0.05, 0.5, size=(n, 3)),
        rotations=q,
        opacities=rng.uniform(0.2, 1.0, size=n),
        colors=rng.uniform(size=(n, 3)),
        features=rng.normal(size=(n, d_code)),
    )
    fields.update(overrides)
    return GaussianScene(**fields)


def axis_camera(size=8, f=8.0):
    """Camera at the origin looking down +z; principal point at the image center."""
    return Camera(size, size, f, f, size / 2, size / 2, np.eye(4))


def orthonormal_codebook(C, d):
    return Codebook(np.eye(d)[:C])


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(num_objects=3, view_count=4, image_size=48, gaussians_per_object=120,
                     background_gaussians=150, seed=11, d_code=16)
    return synthesize(spec, test_views=True)
