import numpy as np
import pytest

from dcsqz.pipeline import analyze
from dcsqz.synth import AcqConfig, CombConfig, synthesize_ensemble


def roll_to(trace, ens, selected=0):
    """Truth traces live on the unshifted axis; aligned data sit on record 0's."""
    return np.roll(trace, ens.records[selected].true_shift)


@pytest.fixture(scope="session")
def default_ensemble():
    return synthesize_ensemble(CombConfig(), AcqConfig(n_igms=500, seed=7), jobs=4)


@pytest.fixture(scope="session")
def default_stats(default_ensemble):
    return analyze(default_ensemble)


@pytest.fixture(scope="session")
def coherent_ensemble():
    return synthesize_ensemble(CombConfig(r=0.0), AcqConfig(n_igms=500, seed=8), jobs=4)


@pytest.fixture(scope="session")
def noise_free_ensemble():
    comb = CombConfig(ceo_phase_model="listed", ceo_phases=(0.0, 0.3, -1.2, 2.0))
    return synthesize_ensemble(comb, AcqConfig(n_igms=8, noise_free=True, seed=3))
