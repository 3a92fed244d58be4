import math

import numpy as np
import pytest

from mrftid.data import GenSpec, generate, samples_to_arrays
from mrftid.discretize import build, build_gamma_matrix, radial_fill
from mrftid.network import TrainConfig, init_network, train
from mrftid.process import ParamBounds

# Desk-scale bounds: a reduced parameter box whose discretization lands
# near twenty classes and builds in a few minutes.
DESK_BOUNDS = ParamBounds((0.05, 0.4, 0.009), (0.085, 0.62, 0.02))


@pytest.fixture(scope="session")
def desk_set():
    return build(DESK_BOUNDS, j_star=0.10, phi_m=math.radians(20.0), seed=0)


@pytest.fixture(scope="session")
def tiny_set():
    """A one-ray set (degenerate angular extent): fast enough for CLI tests."""
    from mrftid.discretize import discretize_surface
    from mrftid.process import to_spherical, ProcessParams

    bounds = ParamBounds((0.06, 0.45, 0.012), (0.096, 0.72, 0.0192))
    corner = ProcessParams(1.0, *bounds.p_min)
    s = to_spherical(corner)
    surface, pairs = discretize_surface(
        bounds, 0.10, math.radians(20.0),
        extent=((s.theta, s.theta), (s.phi, s.phi)),
    )
    return radial_fill(surface, bounds, 0.10, math.radians(20.0),
                       surface_pairs=pairs)


@pytest.fixture(scope="session")
def desk_data(desk_set):
    spec = GenSpec(n_train=10, n_verify=3)
    train_s, verify_s = generate(desk_set, spec, seed=7)
    return spec, train_s, verify_s


@pytest.fixture(scope="session")
def desk_net(desk_set, desk_data):
    _, train_s, _ = desk_data
    xt, yt = samples_to_arrays(train_s)
    net = init_network((xt.shape[1], 128, 64, len(desk_set)),
                       dropout=(0.5, 0.5), seed=1)
    cfg = TrainConfig(
        learning_rate=0.01,
        batch_size=32,
        epochs=300,
        seed=1,
        gamma=build_gamma_matrix(desk_set),
    )
    train(net, xt, yt, cfg)
    return net
