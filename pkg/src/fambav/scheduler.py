"""Per-layer fusion plans, budget parity, and token-step analytics.

A plan assigns each layer (1-based) a number of token pairs to fuse just
before that layer runs. The four placements:

    all          every layer fuses r pairs
    interleaved  even-numbered layers (2, 4, ...) fuse r pairs
    lower        layers 1..k fuse r pairs
    upper        layers start..L fuse r pairs

Budget parity picks r = round(budget / fused-layer-count) per placement so
the strategies reduce comparable token totals. Token-steps (one token
through one layer) are the deterministic compute proxy: fusion happens
before the layer, so layer l processes the already-shrunk length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, PlanError

STRATEGY_KINDS = ("none", "all", "interleaved", "lower", "upper")


@dataclass(frozen=True)
class Strategy:
    """A fusion placement; `start` is used by upper, `k_last` by lower."""

    kind: str
    start: int | None = None
    k_last: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; pick one of {STRATEGY_KINDS}")

    def describe(self) -> str:
        if self.kind == "upper":
            return f"upper(start={self.start})"
        if self.kind == "lower":
            return f"lower(k={self.k_last})"
        return self.kind


def default_lower_k(l_total: int) -> int:
    """Lower-layer cutoff scaling as ~0.8 of the depth (19 of 24)."""
    return max(1, math.floor(0.8 * l_total))


def default_upper_start(l_total: int) -> int:
    """Upper-layer start covering the same ~0.8 fraction from the top (6 of 24)."""
    return l_total - default_lower_k(l_total) + 1


def resolve_strategy(kind: str, l_total: int, start: int | None = None,
                     k_last: int | None = None) -> Strategy:
    """Fill in default bounds and validate 1-based layer indices."""
    if kind == "upper":
        start = default_upper_start(l_total) if start is None else start
        if not 1 <= start <= l_total:
            raise ConfigError(f"upper start layer {start} outside [1, {l_total}]")
        return Strategy("upper", start=start)
    if kind == "lower":
        k_last = default_lower_k(l_total) if k_last is None else k_last
        if not 1 <= k_last <= l_total:
            raise ConfigError(f"lower cutoff layer {k_last} outside [1, {l_total}]")
        return Strategy("lower", k_last=k_last)
    return Strategy(kind)


def fused_layers(strategy: Strategy, l_total: int) -> list[int]:
    """1-based layer indices at which this strategy fuses."""
    if strategy.kind == "none":
        return []
    if strategy.kind == "all":
        return list(range(1, l_total + 1))
    if strategy.kind == "interleaved":
        return list(range(2, l_total + 1, 2))
    if strategy.kind == "lower":
        return list(range(1, strategy.k_last + 1))
    return list(range(strategy.start, l_total + 1))


@dataclass(frozen=True)
class FusionPlan:
    """Pairs fused per layer, validated against a starting sequence length."""

    r: tuple[int, ...]
    seq_len: int
    strategy: Strategy = field(default=Strategy("none"), compare=False)
    r_per_layer: int = field(default=0, compare=False)

    @property
    def l_total(self) -> int:
        return len(self.r)

    @property
    def total_reduced(self) -> int:
        return sum(self.r)

    @property
    def feasible(self) -> bool:
        try:
            validate_plan(self.r, self.seq_len)
            return True
        except PlanError:
            return False


def validate_plan(r: tuple[int, ...], seq_len: int) -> None:
    """Check capacity and the >= 2 running-length floor; raise on the first
    offending layer."""
    if seq_len < 3 and any(x > 0 for x in r):
        raise PlanError(f"sequence length {seq_len} too short for any fusion")
    length = seq_len
    for layer, pairs in enumerate(r, start=1):
        if pairs < 0:
            raise PlanError(f"infeasible plan at layer {layer}: negative r={pairs}")
        if pairs > 0:
            capacity = (length - 1) // 2
            if pairs > capacity:
                raise PlanError(
                    f"infeasible plan at layer {layer}: r={pairs} exceeds bipartite "
                    f"capacity {capacity} at length {length}")
        length -= pairs
        if length < 2:
            raise PlanError(
                f"infeasible plan at layer {layer}: running length {length} < 2")


def build_plan(strategy: Strategy, l_total: int, r_per_layer: int, seq_len: int) -> FusionPlan:
    if r_per_layer < 0:
        raise PlanError(f"r_per_layer must be nonnegative, got {r_per_layer}")
    if seq_len < 3:
        raise PlanError(f"seq_len must be at least 3, got {seq_len}")
    layers = set(fused_layers(strategy, l_total))
    r = tuple(r_per_layer if l in layers else 0 for l in range(1, l_total + 1))
    validate_plan(r, seq_len)
    return FusionPlan(r=r, seq_len=seq_len, strategy=strategy, r_per_layer=r_per_layer)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class ParityEntry:
    strategy: Strategy
    r_per_layer: int
    n_fused_layers: int

    @property
    def total_reduced(self) -> int:
        return self.r_per_layer * self.n_fused_layers


def parity_configs(l_total: int, budget: int) -> dict[str, ParityEntry]:
    """Per-strategy r bringing each total reduction near the shared budget."""
    if budget < 0:
        raise ConfigError(f"budget must be nonnegative, got {budget}")
    out: dict[str, ParityEntry] = {}
    for kind in STRATEGY_KINDS:
        strategy = resolve_strategy(kind, l_total)
        n_fused = len(fused_layers(strategy, l_total))
        r = 0 if (n_fused == 0 or budget == 0) else _round_half_up(budget / n_fused)
        out[kind] = ParityEntry(strategy=strategy, r_per_layer=r, n_fused_layers=n_fused)
    return out


def token_steps(plan: FusionPlan, seq_len: int) -> tuple[int, list[int]]:
    """Total and per-layer token counts processed under the plan.

    per_layer[l-1] = seq_len minus everything fused up to and including
    layer l's own fusion step.
    """
    validate_plan(plan.r, seq_len)
    length = seq_len
    per_layer: list[int] = []
    for pairs in plan.r:
        length -= pairs
        per_layer.append(length)
    return sum(per_layer), per_layer
