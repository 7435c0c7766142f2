import numpy
import pytest

from budgetedrl.envs.chain import finite_chain_bmdp
from budgetedrl.solvers.bmdp import BudgetGrid
from budgetedrl.solvers.regressors import RegressorSpec


def philox(seed: int = 0) -> numpy.random.Generator:
    return numpy.random.Generator(numpy.random.Philox(seed))


@pytest.fixture
def chain_mdp():
    return finite_chain_bmdp(3, seed=0, gamma=0.9)


@pytest.fixture
def coarse_grid():
    return BudgetGrid.uniform(0.0, 0.1, 1.0)


@pytest.fixture
def small_spec():
    return RegressorSpec(hidden_layers=(32, 16), budget_encoder_layers=(4,), epochs=200, weight_decay=0.0)
