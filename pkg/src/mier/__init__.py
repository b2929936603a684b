"""Meta-RL via model identification and experience relabeling.

A context-conditioned dynamics/reward model is meta-trained so a few
gradient steps on its context identify a new task; a context-conditioned
soft actor-critic learns alongside it. Out-of-distribution tasks are handled
by continuing to adapt the model and relabeling cross-task replay data into
synthetic experience for the policy.
"""

import os as _os
import sys as _sys

# Small dense layers run fastest (and schedule identically) single-threaded.
if "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from .diffcore import (  # noqa: E402
    Adam,
    ContextVector,
    GaussianOutput,
    Gradient,
    NetworkShape,
    ParamVector,
    forward,
    gaussian_nll,
    grad,
    meta_grad,
)
from .dynmodel import AdaptReport, Dataset, DynamicsModel, ModelConfig, Transition  # noqa: E402
from .envs import EnvState, SplitSpec, TaskSpec  # noqa: E402
from .orchestrate import AdaptConfig, EnvConfig, MetaTrainConfig, adapt, evaluate, meta_train  # noqa: E402
from .policy import SacAgent, SacBatch, SacConfig, SacState, discounted_return  # noqa: E402
from .replay import MultitaskReplayBuffer, SyntheticBatch, mixed_batch, relabel  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdaptConfig",
    "AdaptReport",
    "ContextVector",
    "Dataset",
    "DynamicsModel",
    "EnvConfig",
    "EnvState",
    "GaussianOutput",
    "Gradient",
    "MetaTrainConfig",
    "ModelConfig",
    "MultitaskReplayBuffer",
    "NetworkShape",
    "ParamVector",
    "SacAgent",
    "SacBatch",
    "SacConfig",
    "SacState",
    "SplitSpec",
    "SyntheticBatch",
    "TaskSpec",
    "Transition",
    "adapt",
    "discounted_return",
    "evaluate",
    "forward",
    "gaussian_nll",
    "grad",
    "meta_grad",
    "meta_train",
    "mixed_batch",
    "relabel",
    "__version__",
]
