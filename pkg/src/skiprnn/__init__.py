"""Skip RNN: recurrent cells that learn to skip state updates."""

__version__ = "0.1.0"

from .autodiff import Tape, Var, as_tensor, make_rng  # noqa: E402
from .cells import (  # noqa: E402
    CellParams,
    SkipCellState,
    SkipPolicy,
    fast_forward,
    init_params,
    n_skip,
    rollout,
    skip_step,
)
from .errors import ConfigurationError, DataError, NumericError  # noqa: E402
