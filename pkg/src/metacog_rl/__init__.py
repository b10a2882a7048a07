"""Hierarchical metacognitive rollout for RL with verifiable rewards.

Direct, decomposition and reflection rollouts with an accuracy filter, a BM25
demonstration buffer, a clip-higher policy objective mixed with SFT, and a
synthetic lab for policy-gradient variance by rollout stage.
"""

from metacog_rl.types import CompletionSample, Problem, Stage, StageTag, TemplateKind

__all__ = ["CompletionSample", "Problem", "Stage", "StageTag", "TemplateKind"]
__version__ = "0.1.0"
