"""Experiment-config parsing and validation.

Configs are single JSON documents with named sections. Unknown keys are
rejected so typos fail loudly, and every validation error carries the field
path that produced it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .core import BudgetSpec, UpdateMode
from .envs import BanditConfig, GridworldConfig
from .summarize import (
    DEFAULT_ENTROPY_WINDOW,
    External,
    ExternalEndpoint,
    RelevanceExtract,
    SummarizerSpec,
    TopFrequency,
    Truncate,
)

EXTERNAL_ENDPOINT_ENV = "CTXMDP_EXTERNAL_SUMMARIZER"

BASELINES = ("none", "raw", "summarized")
POLICIES = ("q_linear", "q_tabular", "softmax_linear", "softmax_tabular")


class ConfigError(ValueError):
    """Invalid experiment config; message lists field-path diagnostics."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class AgentSpec:
    policy: str = "q_linear"
    learning_rate: float = 0.1
    epsilon: float = 0.1
    epsilon_schedule: str = "constant"
    discount: float = 0.95
    temperature: float = 1.0
    episodes: int = 1000


@dataclass(frozen=True)
class MetaSpec:
    entropy_high: float = float("inf")
    latency_high_ms: float = float("inf")
    age_max: int = 8
    mode: str = "heuristic"
    epsilon_meta: float = 0.1


@dataclass(frozen=True)
class SummarizerConfig:
    kind: str = "relevance"  # truncate | top_frequency | relevance | external
    scores: tuple[tuple[int, float], ...] | None = None
    endpoint: ExternalEndpoint | None = None

    def build(self, mode_scores: dict[int, float]) -> SummarizerSpec:
        """Instantiate the spec; relevance defaults to the env's mode tokens."""
        if self.kind == "truncate":
            return Truncate()
        if self.kind == "top_frequency":
            return TopFrequency()
        if self.kind == "relevance":
            scores = dict(self.scores) if self.scores is not None else mode_scores
            return RelevanceExtract.from_dict(scores)
        endpoint = self.endpoint
        override = os.environ.get(EXTERNAL_ENDPOINT_ENV)
        if override:
            endpoint = ExternalEndpoint.from_json(override)
        if endpoint is None:
            raise ConfigError(["summarizer.endpoint: required for external summarizer"])
        return External(endpoint=endpoint)


@dataclass(frozen=True)
class ExperimentConfig:
    env: BanditConfig | GridworldConfig
    summarizer: SummarizerConfig
    budget: BudgetSpec
    agent: AgentSpec
    baselines: tuple[str, ...]
    seeds: tuple[int, ...]
    meta: MetaSpec = field(default_factory=MetaSpec)
    entropy_window: int = DEFAULT_ENTROPY_WINDOW
    mi_window: int = 256
    history_capacity: int = 64
    cost_c0: float = 1.0
    cost_c1: float = 0.5
    measure_wallclock: bool = False
    out_dir: str = "runs"

    @property
    def env_type(self) -> str:
        return "bandit" if isinstance(self.env, BanditConfig) else "gridworld"


class _Section:
    """Dict view that records unknown-key and type problems with full paths."""

    def __init__(self, data: dict, path: str, problems: list[str]):
        if not isinstance(data, dict):
            problems.append(f"{path}: expected an object")
            data = {}
        self.data = data
        self.path = path
        self.problems = problems
        self.seen: set[str] = set()

    def get(self, key, expected, default=None, required=False):
        self.seen.add(key)
        if key not in self.data:
            if required:
                self.problems.append(f"{self.path}.{key}: required")
            return default
        value = self.data[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if expected is not None and not isinstance(value, expected):
            name = expected.__name__ if isinstance(expected, type) else str(expected)
            self.problems.append(f"{self.path}.{key}: expected {name}")
            return default
        return value

    def subsection(self, key, required=False) -> "_Section":
        self.seen.add(key)
        raw = self.data.get(key)
        if raw is None:
            if required:
                self.problems.append(f"{self.path}.{key}: required")
            raw = {}
        return _Section(raw, f"{self.path}.{key}", self.problems)

    def reject_unknown(self):
        for key in self.data:
            if key not in self.seen:
                self.problems.append(f"{self.path}.{key}: unknown key")


def _parse_update_mode(text: str, path: str, problems: list[str]) -> UpdateMode:
    try:
        if text == "per_step":
            return UpdateMode.per_step()
        if text.startswith("sliding_window:"):
            return UpdateMode.sliding_window(int(text.split(":", 1)[1]))
        if text.startswith("periodic:"):
            return UpdateMode.periodic(int(text.split(":", 1)[1]))
    except ValueError as exc:
        problems.append(f"{path}: {exc}")
        return UpdateMode.per_step()
    problems.append(
        f"{path}: expected 'per_step', 'sliding_window:W', or 'periodic:k'"
    )
    return UpdateMode.per_step()


def _parse_env(section: _Section):
    kind = section.get("type", str, required=True)
    if kind == "bandit":
        fields = dict(
            num_contexts=section.get("num_contexts", int, required=True),
            num_arms=section.get("num_arms", int, required=True),
            mean_matrix=section.get("mean_matrix", list, required=True),
            distractor_count=section.get("distractor_count", int, 0),
            context_distribution=section.get("context_distribution", list),
            distractor_vocab=section.get("distractor_vocab", int, 32),
        )
        section.reject_unknown()
        if section.problems:
            return None
        try:
            matrix = tuple(tuple(float(v) for v in row) for row in fields["mean_matrix"])
            dist = fields["context_distribution"]
            return BanditConfig(
                num_contexts=fields["num_contexts"],
                num_arms=fields["num_arms"],
                mean_matrix=matrix,
                distractor_count=fields["distractor_count"],
                context_distribution=tuple(dist) if dist is not None else None,
                distractor_vocab=fields["distractor_vocab"],
            )
        except (TypeError, ValueError) as exc:
            section.problems.append(f"{section.path}: {exc}")
            return None
    if kind == "gridworld":
        fields = dict(
            width=section.get("width", int, required=True),
            height=section.get("height", int, required=True),
            goal=section.get("goal", int, required=True),
            holes=section.get("holes", list, []),
            context_modes=section.get("context_modes", list, required=True),
            horizon=section.get("horizon", int, 100),
            distractor_count=section.get("distractor_count", int, 0),
            discount=section.get("discount", float, 0.95),
            mode_distribution=section.get("mode_distribution", list),
            distractor_vocab=section.get("distractor_vocab", int, 32),
            start=section.get("start", int, 0),
        )
        section.reject_unknown()
        if section.problems:
            return None
        try:
            modes = tuple((str(n), float(s)) for n, s in fields["context_modes"])
            dist = fields["mode_distribution"]
            return GridworldConfig(
                width=fields["width"],
                height=fields["height"],
                goal=fields["goal"],
                holes=tuple(fields["holes"]),
                context_modes=modes,
                horizon=fields["horizon"],
                distractor_count=fields["distractor_count"],
                discount=fields["discount"],
                mode_distribution=tuple(dist) if dist is not None else None,
                distractor_vocab=fields["distractor_vocab"],
                start=fields["start"],
            )
        except (TypeError, ValueError) as exc:
            section.problems.append(f"{section.path}: {exc}")
            return None
    if kind is not None:
        section.problems.append(f"{section.path}.type: expected 'bandit' or 'gridworld'")
    return None


def _parse_summarizer(section: _Section) -> SummarizerConfig:
    kind = section.get("type", str, "relevance")
    scores_raw = section.get("scores", dict)
    endpoint_raw = section.get("endpoint", dict)
    section.reject_unknown()
    if kind not in ("truncate", "top_frequency", "relevance", "external"):
        section.problems.append(f"{section.path}.type: unknown summarizer {kind!r}")
        kind = "relevance"
    scores = None
    if scores_raw is not None:
        try:
            scores = tuple(sorted((int(k), float(v)) for k, v in scores_raw.items()))
        except (TypeError, ValueError):
            section.problems.append(
                f"{section.path}.scores: expected token-index to score mapping"
            )
    endpoint = None
    if endpoint_raw is not None:
        try:
            endpoint = ExternalEndpoint(
                transport=endpoint_raw.get("transport", "tcp"),
                command=tuple(endpoint_raw.get("command", ())),
                host=endpoint_raw.get("host", "127.0.0.1"),
                port=int(endpoint_raw.get("port", 0)),
                timeout_ms=float(endpoint_raw.get("timeout_ms", 2000.0)),
            )
        except (TypeError, ValueError) as exc:
            section.problems.append(f"{section.path}.endpoint: {exc}")
    return SummarizerConfig(kind=kind, scores=scores, endpoint=endpoint)


def _parse_budget(section: _Section) -> BudgetSpec | None:
    token_cap = section.get("token_cap", int, required=True)
    latency_cap = section.get("latency_cap_ms", float, required=True)
    lam = section.get("lam", float, 0.0)
    mu = section.get("mu", float, 0.0)
    nu = section.get("nu", float, 0.0)
    mode_text = section.get("update_mode", str, "per_step")
    section.reject_unknown()
    if section.problems:
        return None
    mode = _parse_update_mode(mode_text, f"{section.path}.update_mode", section.problems)
    try:
        return BudgetSpec(
            token_cap=token_cap, latency_cap_ms=latency_cap,
            lam=lam, mu=mu, nu=nu, update_mode=mode,
        )
    except ValueError as exc:
        section.problems.append(f"{section.path}: {exc}")
        return None


def _parse_agent(section: _Section) -> AgentSpec:
    spec = AgentSpec(
        policy=section.get("policy", str, "q_linear"),
        learning_rate=section.get("learning_rate", float, 0.1),
        epsilon=section.get("epsilon", float, 0.1),
        epsilon_schedule=section.get("epsilon_schedule", str, "constant"),
        discount=section.get("discount", float, 0.95),
        temperature=section.get("temperature", float, 1.0),
        episodes=section.get("episodes", int, 1000),
    )
    section.reject_unknown()
    if spec.policy not in POLICIES:
        section.problems.append(
            f"{section.path}.policy: expected one of {', '.join(POLICIES)}"
        )
    if spec.epsilon_schedule not in ("constant", "inv_sqrt"):
        section.problems.append(
            f"{section.path}.epsilon_schedule: expected 'constant' or 'inv_sqrt'"
        )
    if spec.episodes < 1:
        section.problems.append(f"{section.path}.episodes: must be >= 1")
    if not spec.temperature > 0:
        section.problems.append(f"{section.path}.temperature: must be positive")
    return spec


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed JSON document into an ExperimentConfig."""
    problems: list[str] = []
    root = _Section(data, "config", problems)
    env = _parse_env(root.subsection("env", required=True))
    summarizer = _parse_summarizer(root.subsection("summarizer"))
    budget = _parse_budget(root.subsection("budget", required=True))
    agent = _parse_agent(root.subsection("agent"))
    meta_section = root.subsection("meta")
    meta = MetaSpec(
        entropy_high=meta_section.get("entropy_high", float, float("inf")),
        latency_high_ms=meta_section.get("latency_high_ms", float, float("inf")),
        age_max=meta_section.get("age_max", int, 8),
        mode=meta_section.get("mode", str, "heuristic"),
        epsilon_meta=meta_section.get("epsilon_meta", float, 0.1),
    )
    meta_section.reject_unknown()
    if meta.mode not in ("heuristic", "epsilon_greedy"):
        problems.append("config.meta.mode: expected 'heuristic' or 'epsilon_greedy'")
    baselines = root.get("baselines", list, ["summarized"])
    seeds = root.get("seeds", list, required=True)
    entropy_window = root.get("entropy_window", int, DEFAULT_ENTROPY_WINDOW)
    mi_window = root.get("mi_window", int, 256)
    history_capacity = root.get("history_capacity", int, 64)
    cost = root.subsection("cost")
    cost_c0 = cost.get("c0", float, 1.0)
    cost_c1 = cost.get("c1", float, 0.5)
    cost.reject_unknown()
    measure_wallclock = root.get("measure_wallclock", bool, False)
    out_dir = root.get("out_dir", str, "runs")
    root.reject_unknown()

    if baselines is not None:
        if not baselines:
            problems.append("config.baselines: need at least one baseline")
        for b in baselines:
            if b not in BASELINES:
                problems.append(f"config.baselines: unknown baseline {b!r}")
    if seeds is not None:
        if not seeds:
            problems.append("config.seeds: need at least one seed")
        elif not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            problems.append("config.seeds: must be integers")
    for name, value in (
        ("entropy_window", entropy_window),
        ("mi_window", mi_window),
        ("history_capacity", history_capacity),
    ):
        if value is not None and value < 1:
            problems.append(f"config.{name}: must be >= 1")
    if cost_c0 is not None and cost_c0 < 0:
        problems.append("config.cost.c0: must be nonnegative")
    if cost_c1 is not None and cost_c1 < 0:
        problems.append("config.cost.c1: must be nonnegative")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        env=env,
        summarizer=summarizer,
        budget=budget,
        agent=agent,
        baselines=tuple(baselines),
        seeds=tuple(seeds),
        meta=meta,
        entropy_window=entropy_window,
        mi_window=mi_window,
        history_capacity=history_capacity,
        cost_c0=cost_c0,
        cost_c1=cost_c1,
        measure_wallclock=measure_wallclock,
        out_dir=out_dir,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON config file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            [f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})"]
        ) from exc
    return parse_config(data)
