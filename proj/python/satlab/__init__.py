from ._core import (
    ConfigError,
    DivergenceError,
    IntegrityError,
    Model,
    analyze,
    count_params,
    evaluate,
    gradcheck,
    load_config,
    run_dir,
    sweep,
    train,
)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "IntegrityError",
    "Model",
    "analyze",
    "count_params",
    "evaluate",
    "gradcheck",
    "load_config",
    "run_dir",
    "sweep",
    "train",
]
