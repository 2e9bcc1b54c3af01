import logging

import numpy as np
import pytest

from ream.calibration import MixtureRatio, build_mixture, collect_layer_stats, domain_generators
from ream.model import ExpertWeights, MoELayer, ModelSpec, RedundancyPlan, synth_model


@pytest.fixture(autouse=True)
def _quiet_alignment(caplog):
    # experts that share no calibration tokens warn once per pair
    caplog.set_level(logging.ERROR, logger="ream.alignment")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_expert(rng, d_model=6, d_ff=8, scale=0.5):
    return ExpertWeights(
        rng.normal(0, scale, (d_ff, d_model)),
        rng.normal(0, scale, (d_ff, d_model)),
        rng.normal(0, scale, (d_model, d_ff)),
    )


def random_layer(rng, n=4, top_k=2, d_model=6, d_ff=8):
    return MoELayer(
        rng.normal(0, 1.0, (n, d_model)),
        tuple(random_expert(rng, d_model, d_ff) for _ in range(n)),
        top_k,
    )


def random_model(rng, num_layers=2, n=4, top_k=2, d_model=6, d_ff=8, seed=0):
    layers = tuple(random_layer(rng, n, top_k, d_model, d_ff) for _ in range(num_layers))
    return ModelSpec(d_model, d_ff, num_layers, layers, seed)


@pytest.fixture
def small_model():
    plan = RedundancyPlan(4, 2, noise_scale=0.02, permute_hidden=True)
    return synth_model(8, 12, 2, 8, 2, plan, seed=7)


@pytest.fixture
def small_calib(small_model):
    gens = domain_generators(small_model.d_model, small_model.seed)
    return build_mixture(MixtureRatio.normalized(1, 1, 1), 300, seed=3, generators=gens)


@pytest.fixture
def small_stats(small_model, small_calib):
    return collect_layer_stats(small_model.layers[0], small_calib.tokens)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
