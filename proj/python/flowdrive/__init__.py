"""Rectified-flow trajectory planner with moderated guidance.

The heavy lifting lives in the compiled ``_core`` extension; this package
re-exports it.
"""

from ._core import (
    Error,
    Model,
    fit_clusters,
    generate_dataset,
    integrate_oracle,
    kinds,
    planners,
    run_scenario,
    train,
)

__all__ = [
    "Error",
    "Model",
    "fit_clusters",
    "generate_dataset",
    "integrate_oracle",
    "kinds",
    "planners",
    "run_scenario",
    "train",
]
