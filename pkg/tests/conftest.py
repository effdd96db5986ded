import numpy as np
import pytest

from app.models.domain import Dataset, Parameters, PosteriorDraws
from app.models.schemas import ModelVariant, SamplerConfig, SimConfig
from app.services.areal_graph import build_graph, chain_graph
from app.services.model_core import ParameterLayout
from app.services.synth import simulate_dataset


GROUPS = ["James", "Rappahannock", "York"]

# ln mu stays near 0..2 with tow distances of 1-10 km
FIXTURE_BETA = [-7.5, 0.3, 0.5, -0.4, 0.2, 0.05, -0.2, 0.1, -0.1]

FIXTURE_HYPER = {
    ModelVariant.M1: {"sigma2_theta": 0.3},
    ModelVariant.M2: {"sigma2_phi": 0.3, "lambda": 0.5},
    ModelVariant.M3A: {"sigma2_phi": 0.3, "sigma2_eta": 0.2, "lambda": 0.5, "rho": 0.4},
    ModelVariant.M3B: {"sigma2_phi": 0.3, "sigma2_eta": 0.2, "lambda": 0.5, "P": 0.4, "r": [0.2, -0.1, -0.1]},
    ModelVariant.M4: {"sigma2_phi": 0.3, "lambda": 0.5, "rho": 0.4},
}

ALL_VARIANTS = list(ModelVariant)


def fixture_config(variant: ModelVariant, seed: int = 7, n_years: int = 4, **updates) -> SimConfig:
    """K=6 (three tributaries of two sections), T=4 by default"""
    values = dict(
        variant=variant,
        group_sizes=[2, 2, 2],
        group_names=GROUPS,
        n_years=n_years,
        first_year=2006,
        true_parameters={"beta": FIXTURE_BETA, **FIXTURE_HYPER[variant]},
        seed=seed,
    )
    values.update(updates)
    return SimConfig(**values)


@pytest.fixture
def path3():
    return build_graph(["1", "2", "3"], [("1", "2"), ("2", "3")], {"1": "a", "2": "a", "3": "a"})


@pytest.fixture
def river_graph():
    return chain_graph([2, 2, 2], GROUPS)


@pytest.fixture(params=ALL_VARIANTS, ids=lambda v: f"model{v.value}")
def simulated(request):
    """(variant, dataset, truth) on the K=6, T=4 fixture for every variant"""
    variant = request.param
    dataset, truth = simulate_dataset(fixture_config(variant))
    return variant, dataset, truth


@pytest.fixture
def m4_dataset():
    return simulate_dataset(fixture_config(ModelVariant.M4))


@pytest.fixture
def quick_sampler():
    """Two serial chains of 150 + 100 iterations (200 pooled draws)"""
    return SamplerConfig(n_chains=2, warmup_iters=150, sampling_iters=100, seed=11,
                         executor="serial", max_tree_depth=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_draws(variant: ModelVariant, dataset: Dataset, params: Parameters,
                   n_chains: int = 2, n_draws: int = 60) -> PosteriorDraws:
    """Posterior whose every draw equals `params`"""
    layout = ParameterLayout(variant, dataset.coefficient_names, dataset.n_sections,
                             dataset.n_years, dataset.graph.n_groups)
    row = layout.flatten(params)
    chains = [np.tile(row, (n_draws, 1)) for _ in range(n_chains)]
    return PosteriorDraws(variant=variant, layout=layout, chains=chains, stats=[], seeds=list(range(n_chains)))
