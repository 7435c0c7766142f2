from budgetedrl.envs.base import BudgetedEnv, EnvStep, make_rng
from budgetedrl.envs.chain import ChainConfig, FiniteBmdpEnv, finite_chain_bmdp
from budgetedrl.envs.corridors import CorridorsConfig, CorridorsEnv, CorridorsLayout, corridors_step
from budgetedrl.envs.slot_filling import SlotFillingConfig, SlotFillingEnv, slot_filling_step

env_classmap = {"corridors": CorridorsEnv, "slot_filling": SlotFillingEnv, "chain": FiniteBmdpEnv}
env_configmap = {"corridors": CorridorsConfig, "slot_filling": SlotFillingConfig, "chain": ChainConfig}


def make_env(name: str, config=None) -> BudgetedEnv:
    """
    Build an environment by name from its config dataclass or a configuration mapping.

    Examples:
        >>> env = make_env("corridors", {"horizon": 9})
    """
    from budgetedrl.solvers.errors import ConfigError

    if name not in env_classmap:
        raise ConfigError(f"unknown environment '{name}', expected one of {sorted(env_classmap)}")
    config_cls = env_configmap[name]
    if not isinstance(config, config_cls):
        config = config_cls.from_dict(config)
    if name == "chain":
        return FiniteBmdpEnv.from_config(config)
    return env_classmap[name](config)
