"""Synthetic decomposable tasks, oracles and the stage-variance laboratory."""

from metacog_rl.envlab.codec import ChainCodec, CharCodec, CodecError
from metacog_rl.envlab.tasks import (
    ChainTaskSpec,
    SyntheticTask,
    TaskSpecError,
    generate_tasks,
    oracle_solve,
    parse_chain,
)
from metacog_rl.envlab.variance import (
    StageEstimate,
    VarianceReport,
    check_ordering,
    estimate_gradient_variance,
    steps_to_threshold,
)

__all__ = [
    "ChainCodec",
    "ChainTaskSpec",
    "CharCodec",
    "CodecError",
    "StageEstimate",
    "SyntheticTask",
    "TaskSpecError",
    "VarianceReport",
    "check_ordering",
    "estimate_gradient_variance",
    "generate_tasks",
    "oracle_solve",
    "parse_chain",
    "steps_to_threshold",
]
