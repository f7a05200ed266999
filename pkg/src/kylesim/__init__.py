"""Random-horizon insider-trading equilibrium: closed forms, simulation, and
Monte Carlo certification."""

__version__ = "0.1.0"

from . import bernoulli, config, general, ou, payoff, sde, verify  # noqa: F401
from .bernoulli import BernoulliMarket, simulate_equilibrium  # noqa: F401
from .general import GeneralMarket, simulate_general_equilibrium  # noqa: F401
from .ou import OUParams, TimeChange  # noqa: F401
from .payoff import PayoffSpec  # noqa: F401
from .sde import SimConfig, TimeGrid, make_grid  # noqa: F401
