"""The nine decision-making pipelines plus a plain behaviour-cloning baseline."""

from ..errors import ConfigurationError
from .common import Agent, BCAgent, InverseDynamics, QCritic, ValueNet, evaluate, expectile_weights, success_rate
from .planners import AdaptDiffuserAgent, DecisionDiffuserAgent, DiffuserAgent, dynamics_residual
from .policies import DiffusionBCAgent, DiffusionPolicyAgent, DQLAgent, EDPAgent, IDQLAgent, edp_approx_action
from .synther import SynthERAgent, TransitionSynthesizer, synthetic_residual

AGENTS = {
    "diffuser": DiffuserAgent,
    "dd": DecisionDiffuserAgent,
    "adaptdiffuser": AdaptDiffuserAgent,
    "dql": DQLAgent,
    "edp": EDPAgent,
    "idql": IDQLAgent,
    "diffbc": DiffusionBCAgent,
    "diffpolicy": DiffusionPolicyAgent,
    "synther": SynthERAgent,
    "bc": BCAgent,
}


def make_agent(algo: str, obs_dim: int, act_dim: int, **kw) -> Agent:
    try:
        cls = AGENTS[algo]
    except KeyError:
        raise ConfigurationError(f"unknown algorithm {algo!r}; choose from {sorted(AGENTS)}") from None
    try:
        return cls(obs_dim, act_dim, **kw)
    except TypeError as exc:
        raise ConfigurationError(f"bad options for {algo}: {exc}") from None
