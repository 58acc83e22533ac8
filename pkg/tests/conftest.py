import numpy as np
import pytest

from gpshape import dataprep, shapes
from gpshape import template as tpl
from gpshape.gp import KernelConfig, OptimizerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_psi(rng, n):
    return np.stack([rng.uniform(0, np.pi, n), rng.uniform(0, 2 * np.pi, n)], axis=1)


def random_cfg(rng, kind, mode="bearing_euclidean"):
    return KernelConfig(kind, log_lengthscale=rng.uniform(-0.7, 0.7),
                        log_alpha=rng.uniform(-1, 1) if kind == "rq" else None,
                        log_noise=rng.uniform(-6, -2),
                        log_period=rng.uniform(0.5, 2) if kind == "periodic" else None,
                        distance_mode=mode)


def exact_cloud(sampler, n, seed):
    return dataprep.SurfacePointCloud(sampler(n, np.random.default_rng(seed)))


@pytest.fixture(scope="session")
def sphere_template():
    """K=1 template fitted to exact unit-sphere samples."""
    train = exact_cloud(shapes.sample_sphere, 300, 1)
    test = exact_cloud(shapes.sample_sphere, 1000, 2)
    return tpl.build_template(train, test, k=1, opt=OptimizerConfig(iterations=80))


@pytest.fixture(scope="session")
def bumpy_template():
    """K=3 template on the perturbed sphere (clusters overlap)."""
    train = exact_cloud(shapes.sample_bumpy_sphere, 450, 3)
    test = exact_cloud(shapes.sample_bumpy_sphere, 1500, 4)
    return tpl.build_template(train, test, k=3, seed=0, opt=OptimizerConfig(iterations=60))


def mesh_template(mesh, n_train=400, n_test=2000, seed=0, iterations=250):
    """K=1 template and held-out model points from ray-cast samples of ``mesh``.

    Returns ``(template, model_points)``; the model points are the samples
    left over after the split.
    """
    cloud = dataprep.raycast_sample(dataprep.normalize_mesh(mesh),
                                    dataprep.fibonacci_directions(40), 200)
    train, test = dataprep.split_train_test(cloud, n_train, n_test, seed=seed)
    used = {tuple(p) for p in train.points} | {tuple(p) for p in test.points}
    rest = np.array([p for p in cloud.points if tuple(p) not in used])
    t = tpl.build_template(train, test, k=1, seed=seed,
                           opt=OptimizerConfig(iterations=iterations))
    return t, rest


@pytest.fixture(scope="session")
def mesh_sphere():
    """Template and model points of a ray-cast icosphere."""
    return mesh_template(shapes.icosphere(3))
