"""Run configuration: a flat record stored as INI sections, one per module."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from metacog_rl.envlab.tasks import OPERATIONS, ChainTaskSpec, TaskSpecError
from metacog_rl.metabuffer import Bm25Params, MetacogBuffer
from metacog_rl.objective import ClipConfig
from metacog_rl.rollout import Mode, ObjectiveConfig, StepConfig

BACKENDS = ("softmax", "scripted", "remote")
DATASETS = ("chain", "jsonl")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _f(section: str, default: Any, help: str = "", choices: Optional[tuple] = None):
    return field(default=default, metadata={"section": section, "help": help, "choices": choices})


@dataclass(frozen=True)
class RunConfig:
    # run
    mode: str = _f("run", "metacog", "metacog or dapo-only", ("metacog", "dapo-only"))
    seed: int = _f("run", 0, "master seed")
    steps: int = _f("run", 200, "training steps M")
    output_dir: str = _f("run", "runs/default", "directory for metrics and snapshots")
    snapshot_every: int = _f("run", 0, "metabuffer snapshot cadence in steps (0: final only)")
    eval_every: int = _f("run", 10, "held-out evaluation cadence in steps")
    plots: bool = _f("run", True, "render PNG figures next to the metrics")
    # rollout
    prompts_per_step: int = _f("rollout", 128, "unique prompts sampled per step")
    group_size: int = _f("rollout", 64, "completions per prompt G")
    target_groups: int = _f("rollout", 128, "dynamic-sampling buffer target N")
    mu: int = _f("rollout", 1, "inner optimization iterations")
    strict_fill: bool = _f("rollout", False, "draw further prompt batches until N groups are valid")
    max_fill_rounds: int = _f("rollout", 8, "prompt batches allowed per step under strict_fill")
    use_metabuffer: bool = _f("rollout", True, "retrieve demonstrations from the metacognitive buffer")
    # objective
    eps_low: float = _f("objective", 0.20, "lower clip range")
    eps_high: float = _f("objective", 0.28, "upper clip range")
    lam: float = _f("objective", 0.04, "SFT loss weight")
    learning_rate: float = _f("objective", 1.0, "gradient-descent step size")
    # metabuffer
    capacity: int = _f("metabuffer", 512, "demonstration buffer capacity")
    k1: float = _f("metabuffer", 1.2, "BM25 term saturation")
    b: float = _f("metabuffer", 0.75, "BM25 length normalization")
    # dataset
    dataset: str = _f("dataset", "chain", "chain (synthetic) or jsonl", DATASETS)
    dataset_path: str = _f("dataset", "", "training problems (jsonl dataset)")
    heldout_path: str = _f("dataset", "", "held-out problems (jsonl dataset)")
    train_size: int = _f("dataset", 512, "synthetic training tasks")
    heldout_size: int = _f("dataset", 256, "synthetic held-out tasks")
    horizon: int = _f("dataset", 4, "chain length H")
    sub_count: int = _f("dataset", 2, "sub-problems k")
    gamma: float = _f("dataset", 0.5, "reflection fraction")
    operand_min: int = _f("dataset", 0, "smallest operand")
    operand_max: int = _f("dataset", 2, "largest operand")
    operations: str = _f("dataset", "add,mul", "comma-separated subset of add,sub,mul")
    modulus: int = _f("dataset", 7, "chain modulus (0: plain integers)")
    hard_fraction: float = _f("dataset", 0.5, "share of synthetic tasks labelled hard")
    # backend
    backend: str = _f("backend", "softmax", "softmax, scripted or remote", BACKENDS)
    context_order: int = _f("backend", 1, "softmax policy conditions on the previous token (1) or not (0)")
    templates_dir: str = _f("backend", "", "directory overriding the built-in templates")
    # scripted
    direct_success_hard: float = _f("scripted", 0.05, "direct success probability on hard tasks")
    direct_success_easy: float = _f("scripted", 0.5, "direct success probability on other tasks")
    decomposition_success: float = _f("scripted", 0.6, "decomposition success probability")
    reflection_success: float = _f("scripted", 0.4, "reflection success probability")
    direct_gain: float = _f("scripted", 0.0, "per-step increase of direct success")
    # remote
    endpoint: str = _f("remote", "http://localhost:8000/v1", "chat-completions base URL")
    model: str = _f("remote", "default", "model name sent with each request")
    temperature: float = _f("remote", 1.0, "sampling temperature")
    top_p: float = _f("remote", 1.0, "nucleus sampling mass")
    max_tokens: int = _f("remote", 1024, "completion token limit")
    max_concurrency: int = _f("remote", 8, "parallel requests")
    timeout: float = _f("remote", 60.0, "request timeout in seconds")
    max_retries: int = _f("remote", 3, "retries per request")

    def __post_init__(self):
        validate(self)

    # -- views ---------------------------------------------------------------

    def step_config(self) -> StepConfig:
        return StepConfig(self.prompts_per_step, self.group_size, self.target_groups, self.mu, Mode(self.mode),
                          self.strict_fill, self.max_fill_rounds, self.use_metabuffer)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(ClipConfig(self.eps_low, self.eps_high), self.lam, self.learning_rate)

    def chain_spec(self) -> ChainTaskSpec:
        return ChainTaskSpec(horizon=self.horizon, sub_count=self.sub_count, gamma=self.gamma,
                             operand_min=self.operand_min, operand_max=self.operand_max,
                             operations=self.operation_list, modulus=self.modulus or None, seed=self.seed)

    @property
    def operation_list(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.operations.split(",") if s.strip())

    def new_metabuffer(self) -> MetacogBuffer:
        return MetacogBuffer(self.capacity, Bm25Params(self.k1, self.b))

    def replace(self, **kw) -> "RunConfig":
        unknown = set(kw) - set(FIELD_NAMES)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        return dataclasses.replace(self, **kw)

    # -- persistence ---------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for f in fields(self):
            section = f.metadata["section"]
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, f.name, format_value(getattr(self, f.name)))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


FIELDS = {f.name: f for f in fields(RunConfig)}
FIELD_NAMES = tuple(FIELDS)
SECTIONS = tuple(dict.fromkeys(f.metadata["section"] for f in fields(RunConfig)))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(name: str, raw: Any) -> Any:
    """Convert ``raw`` (usually text) to the declared type of field ``name``."""
    if name not in FIELDS:
        raise ConfigError(name, "unknown key")
    kind = FIELDS[name].type
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(name, f"expected {kind}, got {raw!r}") from None
    return raw


def _check(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(name, message)


def validate(cfg: RunConfig) -> None:
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        choices = f.metadata.get("choices")
        if choices and value not in choices:
            raise ConfigError(f.name, f"must be one of {', '.join(choices)}, got {value!r}")
    for name in ("steps", "snapshot_every"):
        _check(getattr(cfg, name) >= 0, name, "must be nonnegative")
    for name in ("eval_every", "prompts_per_step", "group_size", "target_groups", "mu", "max_fill_rounds",
                 "capacity", "train_size", "heldout_size", "horizon", "sub_count", "max_tokens",
                 "max_concurrency"):
        _check(getattr(cfg, name) >= 1, name, "must be positive")
    _check(0.0 < cfg.eps_low <= cfg.eps_high < 1.0, "eps_low", "need 0 < eps_low <= eps_high < 1")
    _check(cfg.lam >= 0, "lam", "must be nonnegative")
    _check(cfg.learning_rate >= 0, "learning_rate", "must be nonnegative")
    _check(cfg.k1 > 0, "k1", "must be positive")
    _check(0.0 <= cfg.b <= 1.0, "b", "must lie in [0, 1]")
    _check(cfg.context_order in (0, 1), "context_order", "must be 0 or 1")
    _check(0.0 <= cfg.hard_fraction <= 1.0, "hard_fraction", "must lie in [0, 1]")
    for name in ("direct_success_hard", "direct_success_easy", "decomposition_success", "reflection_success"):
        _check(0.0 <= getattr(cfg, name) <= 1.0, name, "must lie in [0, 1]")
    _check(cfg.direct_gain >= 0, "direct_gain", "must be nonnegative")
    _check(cfg.timeout > 0, "timeout", "must be positive")
    _check(cfg.max_retries >= 0, "max_retries", "must be nonnegative")
    _check(cfg.temperature >= 0, "temperature", "must be nonnegative")
    _check(0.0 < cfg.top_p <= 1.0, "top_p", "must lie in (0, 1]")
    _check(cfg.modulus == 0 or cfg.modulus >= 2, "modulus", "must be 0 or at least 2")
    ops = cfg.operation_list
    _check(bool(ops) and all(o in OPERATIONS for o in ops), "operations",
           f"must be a comma-separated subset of {','.join(OPERATIONS)}")
    if cfg.dataset == "jsonl":
        _check(bool(cfg.dataset_path), "dataset_path", "required when dataset = jsonl")
    else:
        try:
            ChainTaskSpec(horizon=cfg.horizon, sub_count=cfg.sub_count, gamma=cfg.gamma,
                          operand_min=cfg.operand_min, operand_max=cfg.operand_max, operations=ops,
                          modulus=cfg.modulus or None)
        except TaskSpecError as exc:
            name, _, msg = str(exc).partition(": ")
            raise ConfigError(name if name in FIELDS else "horizon", msg or str(exc)) from None
    if cfg.backend == "softmax" and cfg.dataset == "chain":
        _check(cfg.modulus >= 2, "modulus", "the softmax backend needs a modular chain dataset")


def from_mapping(values: Mapping[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    base = base or RunConfig()
    parsed = {k: parse_value(k, v) for k, v in values.items()}
    return base.replace(**parsed)


def load_ini(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            if key not in FIELDS:
                raise ConfigError(key, f"unknown key in section [{section}]")
            if FIELDS[key].metadata["section"] != section:
                raise ConfigError(key, f"belongs in section [{FIELDS[key].metadata['section']}], not [{section}]")
            values[key] = raw
    return from_mapping(values, base)


def load_file(path: str | Path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return load_ini(text, base)
