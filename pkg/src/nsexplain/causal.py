"""Necessity/sufficiency coalition values and Shapley estimators.

A coalition is a ``frozenset`` of cause ids. Value functions wrap an
*executor* that knows how to intervene on the model; this module never looks
at tensors, which keeps the estimators testable against plain tabulated
functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from nsexplain.errors import CapacityError, ConfigError, EvaluationError

EPS = 1e-8
MAX_EXACT_CAUSES = 20

Coalition = frozenset


class Executor(Protocol):
    """Runs interventions for one (model, image, class) triple.

    ``p_removed`` returns p_c after removing each coalition from the full cause
    set; ``p_kept`` returns p_c after keeping only each coalition.
    """

    p_orig: float

    def p_removed(self, coalitions: Sequence[frozenset]) -> np.ndarray: ...

    def p_kept(self, coalitions: Sequence[frozenset]) -> np.ndarray: ...


@dataclass(frozen=True)
class CauseUniverse:
    cause_ids: tuple[int, ...]
    cause_kind: str = "feature"

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.cause_ids)
        if not ids:
            raise ConfigError("cause universe must be non-empty")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"cause ids must be unique, got {ids}")
        if self.cause_kind not in ("feature", "filter"):
            raise ConfigError(f"cause_kind must be 'feature' or 'filter', got {self.cause_kind!r}")
        object.__setattr__(self, "cause_ids", ids)

    @classmethod
    def of_size(cls, k: int, cause_kind: str = "feature") -> "CauseUniverse":
        return cls(tuple(range(k)), cause_kind)

    def __len__(self) -> int:
        return len(self.cause_ids)

    def __iter__(self):
        return iter(self.cause_ids)

    @property
    def full(self) -> frozenset:
        return frozenset(self.cause_ids)


def _key(coalition: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(coalition))


def _necessity(p_orig: float, p_removed: np.ndarray) -> np.ndarray:
    return (p_orig - np.asarray(p_removed, dtype=np.float64)) / max(p_orig, EPS)


def _sufficiency(p_orig: float, p_kept: np.ndarray) -> np.ndarray:
    return np.asarray(p_kept, dtype=np.float64) / max(p_orig, EPS)


def necessity_value(executor: Executor, coalition: Iterable[int]) -> float:
    """Relative drop in p_c when the coalition is removed; negative if removal helps."""
    return float(_necessity(executor.p_orig, executor.p_removed([frozenset(coalition)]))[0])


def sufficiency_value(executor: Executor, coalition: Iterable[int]) -> float:
    """p_c with only the coalition kept, relative to the unmodified p_c."""
    return float(_sufficiency(executor.p_orig, executor.p_kept([frozenset(coalition)]))[0])


@dataclass
class CoalitionValueFn:
    """A cached set function ``coalition -> value``.

    ``batch_evaluator`` (if given) receives a list of coalitions and returns
    their values in one go; otherwise ``evaluator`` is called per coalition.
    With ``check_purity`` every cache hit is recomputed and compared.
    """

    direction: str
    evaluator: Callable[[frozenset], float] | None = None
    batch_evaluator: Callable[[list[frozenset]], Sequence[float]] | None = None
    check_purity: bool = False
    cache: dict[tuple[int, ...], float] = field(default_factory=dict)
    evaluations: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.evaluator is None and self.batch_evaluator is None:
            raise ConfigError("CoalitionValueFn needs an evaluator or a batch_evaluator")

    @classmethod
    def necessity(cls, executor: Executor, **kwargs) -> "CoalitionValueFn":
        fn = cls(
            "necessity",
            batch_evaluator=lambda cs: _necessity(executor.p_orig, executor.p_removed(cs)),
            **kwargs,
        )
        fn._note_p_orig(executor.p_orig)
        return fn

    @classmethod
    def sufficiency(cls, executor: Executor, **kwargs) -> "CoalitionValueFn":
        fn = cls(
            "sufficiency",
            batch_evaluator=lambda cs: _sufficiency(executor.p_orig, executor.p_kept(cs)),
            **kwargs,
        )
        fn._note_p_orig(executor.p_orig)
        return fn

    @classmethod
    def from_table(cls, table: Mapping[frozenset, float], direction: str = "tabulated") -> "CoalitionValueFn":
        lookup = {_key(k): float(v) for k, v in table.items()}
        return cls(direction, evaluator=lambda c: lookup[_key(c)])

    def _note_p_orig(self, p_orig: float) -> None:
        if p_orig <= EPS:
            self.warnings.append(
                f"{self.direction}: original class probability {p_orig:.3g} <= {EPS:g}; values are scaled by {EPS:g}"
            )

    def _compute(self, coalitions: list[frozenset]) -> list[float]:
        self.evaluations += len(coalitions)
        if self.batch_evaluator is not None:
            return [float(v) for v in self.batch_evaluator(coalitions)]
        return [float(self.evaluator(c)) for c in coalitions]

    def evaluate_many(self, coalitions: Sequence[Iterable[int]]) -> np.ndarray:
        keys = [_key(c) for c in coalitions]
        missing: list[tuple[int, ...]] = []
        seen = set()
        for k in keys:
            if k not in self.cache and k not in seen:
                seen.add(k)
                missing.append(k)
            elif self.check_purity and k in self.cache and k not in seen:
                seen.add(k)
                again = self._compute([frozenset(k)])[0]
                if again != self.cache[k]:
                    raise AssertionError(f"impure value function: coalition {k} gave {self.cache[k]} then {again}")
        if missing:
            for k, v in zip(missing, self._compute([frozenset(k) for k in missing])):
                self.cache[k] = v
        return np.array([self.cache[k] for k in keys], dtype=np.float64)

    def __call__(self, coalition: Iterable[int]) -> float:
        return float(self.evaluate_many([coalition])[0])


@dataclass
class ShapleyReport:
    direction: str
    values: dict[int, float]
    stderr: dict[int, float]
    method: str
    permutations: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "method": self.method,
            "seed": self.seed,
            "permutations": self.permutations,
            "values": {str(k): v for k, v in self.values.items()},
            "stderr": {str(k): v for k, v in self.stderr.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShapleyReport":
        return cls(
            direction=d["direction"],
            values={int(k): float(v) for k, v in d["values"].items()},
            stderr={int(k): float(v) for k, v in d["stderr"].items()},
            method=d["method"],
            permutations=int(d.get("permutations") or 0),
            seed=d.get("seed"),
        )

    def top(self, n: int = 5) -> list[tuple[int, float]]:
        return sorted(self.values.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


def singleton_scan(value_fn: CoalitionValueFn, universe: CauseUniverse | Iterable[int]) -> dict[int, float]:
    ids = list(universe)
    if not ids:
        raise ConfigError("singleton scan over an empty universe")
    try:
        vals = value_fn.evaluate_many([frozenset([i]) for i in ids])
    except Exception:
        # retry one by one to name the offending cause
        for i in ids:
            try:
                value_fn(frozenset([i]))
            except Exception as exc:
                raise EvaluationError(f"cause {i}: {exc}") from exc
        raise
    return dict(zip(ids, (float(v) for v in vals)))


def select_hypothesized(scores: Mapping[int, float], k: int, cause_kind: str = "feature") -> CauseUniverse:
    """Top-``k`` causes by score, ties broken by ascending id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return CauseUniverse(tuple(sorted(i for i, _ in ranked[:k])), cause_kind)


def _report(
    value_fn: CoalitionValueFn,
    ids: Sequence[int],
    values: np.ndarray,
    errs: np.ndarray,
    universe: Iterable[int] | None,
    method: str,
    permutations: int = 0,
    seed: int | None = None,
) -> ShapleyReport:
    all_ids = sorted(set(universe) | set(ids)) if universe is not None else sorted(ids)
    vals = {i: 0.0 for i in all_ids}
    ses = {i: 0.0 for i in all_ids}
    for i, v, s in zip(ids, values, errs):
        vals[i] = float(v)
        ses[i] = float(s)
    return ShapleyReport(value_fn.direction, vals, ses, method, permutations, seed)


def shapley_exact(
    value_fn: CoalitionValueFn,
    hypothesized: CauseUniverse | Sequence[int],
    universe: Iterable[int] | None = None,
) -> ShapleyReport:
    """Shapley values over ``hypothesized`` by full subset enumeration.

    Causes in ``universe`` but outside ``hypothesized`` get exactly 0.
    """
    ids = list(hypothesized)
    n = len(ids)
    if n > MAX_EXACT_CAUSES:
        raise CapacityError(f"exact Shapley over {n} causes needs 2^{n} evaluations; limit is {MAX_EXACT_CAUSES}")
    if n == 0:
        raise ConfigError("exact Shapley over an empty cause set")

    masks = np.arange(1 << n)
    coalitions = [frozenset(ids[j] for j in range(n) if m >> j & 1) for m in masks]
    v = value_fn.evaluate_many(coalitions)
    sizes = np.array([bin(int(m)).count("1") for m in masks])
    fact = [math.factorial(s) for s in range(n + 1)]
    weight_by_size = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0 for s in range(n + 1)])

    values = np.empty(n)
    for j in range(n):
        without = masks[(masks >> j & 1) == 0]
        diffs = v[without | (1 << j)] - v[without]
        values[j] = math.fsum(weight_by_size[sizes[without]] * diffs)
    return _report(value_fn, ids, values, np.zeros(n), universe, "exact")


def permutation_schedule(n: int, permutations: int, seed: int) -> np.ndarray:
    """All orderings used by :func:`shapley_sampled`, drawn up front from ``seed``."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.permutation(n) for _ in range(permutations)])


def shapley_sampled(
    value_fn: CoalitionValueFn,
    hypothesized: CauseUniverse | Sequence[int],
    permutations: int,
    seed: int,
    universe: Iterable[int] | None = None,
) -> ShapleyReport:
    """Permutation-sampling Shapley estimate with per-cause standard errors."""
    if permutations < 1:
        raise ConfigError(f"permutations must be >= 1, got {permutations}")
    ids = list(hypothesized)
    n = len(ids)
    if n == 0:
        raise ConfigError("sampled Shapley over an empty cause set")
    order = permutation_schedule(n, permutations, seed)

    # prefix coalitions of every ordering, evaluated in one cached batch
    prefixes = []
    for perm in order:
        members: list[int] = []
        prefixes.append(frozenset())
        for j in perm:
            members.append(ids[j])
            prefixes.append(frozenset(members))
    v = value_fn.evaluate_many(prefixes).reshape(permutations, n + 1)

    marginals = np.empty((permutations, n))
    rows = np.arange(permutations)[:, None]
    marginals[rows, order] = v[:, 1:] - v[:, :-1]

    means = np.empty(n)
    for j in range(n):
        col = marginals[:, j]
        # identical samples (e.g. n == 1) keep their exact value
        means[j] = col[0] if np.all(col == col[0]) else col.mean()
    if permutations > 1:
        errs = marginals.std(axis=0, ddof=1) / math.sqrt(permutations)
    else:
        errs = np.zeros(n)
    return _report(value_fn, ids, means, errs, universe, "sampled", permutations, seed)
