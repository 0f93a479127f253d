"""Random, grid and TPE searchers sharing one suggest/observe interface."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .hyperspace import (
    ParamDomain,
    SearchSpace,
    InvalidConfig,
    config_to_indices,
    indices_to_config,
    sample_uniform,
    validate_config,
)

COMPLETED = "completed"
FAILED = "failed"

SEARCHER_KINDS = ("tpe", "random", "grid")
TIE_TOLERANCE = 1e-12


class GridExhausted(Exception):
    """Every grid point has already been suggested."""


@dataclass(frozen=True)
class Observation:
    config: Mapping[str, Any]
    objective: float | None
    status: str = COMPLETED

    def __post_init__(self):
        if self.status not in (COMPLETED, FAILED):
            raise ValueError(f"unknown observation status {self.status!r}")
        finite = self.objective is not None and math.isfinite(self.objective)
        if finite != (self.status == COMPLETED):
            raise ValueError("objective must be finite iff the observation completed")


class Searcher:
    kind = "base"

    def __init__(self, space: SearchSpace):
        self.space = space
        self.history: list[Observation] = []

    def observe(self, obs: Observation) -> None:
        violations = validate_config(self.space, obs.config)
        if violations:
            raise InvalidConfig(violations)
        self.history.append(obs)

    @property
    def completed(self) -> list[Observation]:
        return [o for o in self.history if o.status == COMPLETED]

    def _failed_indices(self) -> set[tuple[int, ...]]:
        return {config_to_indices(self.space, o.config) for o in self.history if o.status == FAILED}

    def suggest(self, rng: np.random.Generator) -> dict[str, Any]:
        config = self._propose(rng)
        failed = self._failed_indices()
        if failed and config_to_indices(self.space, config) in failed:
            # One retry only; a repeat of a failed config is then accepted.
            config = self._propose(rng)
        return config

    def _propose(self, rng: np.random.Generator) -> dict[str, Any]:
        raise NotImplementedError


class RandomSearcher(Searcher):
    kind = "random"

    def _propose(self, rng):
        return sample_uniform(self.space, rng)


class GridSearcher(Searcher):
    """Cartesian enumeration, lexicographic in ordinals (first parameter slowest)."""

    kind = "grid"

    def __init__(self, space: SearchSpace):
        super().__init__(space)
        self.cursor = 0
        self._sizes = [len(d) for d in space.values()]

    def _unravel(self, k: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(k, self._sizes))

    def _propose(self, rng):
        if self.cursor >= self.space.cardinality:
            raise GridExhausted(f"grid of {self.space.cardinality} points exhausted")
        config = indices_to_config(self.space, self._unravel(self.cursor))
        self.cursor += 1
        return config

    def suggest(self, rng=None):
        return self._propose(rng)

    def observe(self, obs):
        super().observe(obs)
        k = int(np.ravel_multi_index(config_to_indices(self.space, obs.config), self._sizes))
        # Replayed history (resume) moves the cursor past every seen point.
        self.cursor = max(self.cursor, k + 1)


def tpe_split(history: Sequence[Observation], gamma_fraction: float) -> tuple[list[Observation], list[Observation]]:
    """Split completed observations into the best ``ceil(gamma * n)`` and the rest.

    Sorting is stable, so equal objectives keep trial order.
    """
    done = [o for o in history if o.status == COMPLETED]
    if not done:
        raise ValueError("tpe_split needs at least one completed observation")
    ranked = sorted(done, key=lambda o: o.objective)
    n_good = max(1, math.ceil(gamma_fraction * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


def tpe_pmf(observations: Sequence[Observation], domain: ParamDomain, prior_weight: float) -> np.ndarray:
    """Categorical density over ``domain``: counts plus a flat prior, normalized."""
    if prior_weight <= 0:
        raise ValueError("prior_weight must be positive")
    weights = np.full(len(domain), float(prior_weight))
    for obs in observations:
        weights[domain.ordinal(obs.config[domain.name])] += 1.0
    return weights / weights.sum()


def tpe_score(
    candidate: Mapping[str, Any],
    l: Mapping[str, np.ndarray],
    g: Mapping[str, np.ndarray],
    space: SearchSpace,
) -> float:
    """Product over parameters of l(v) / g(v), accumulated in log space."""
    return math.exp(_log_score(config_to_indices(space, candidate), l, g, space))


def _log_score(ords, l, g, space) -> float:
    total = 0.0
    for name, i in zip(space, ords):
        total += math.log(l[name][i]) - math.log(g[name][i])
    return total


class TPESearcher(Searcher):
    """Univariate categorical Tree-structured Parzen Estimator.

    Before ``n_startup`` completed observations it samples the uniform prior.
    Afterwards it fits per-parameter pmfs to the good (l) and bad (g)
    groups and returns the candidate maximizing l/g. Candidates are drawn
    from l, or the whole space is enumerated when ``exhaustive`` is set.
    Failed observations never enter either density.
    """

    kind = "tpe"

    def __init__(
        self,
        space: SearchSpace,
        gamma_fraction: float = 0.25,
        prior_weight: float = 1.0,
        n_startup: int = 5,
        n_candidates: int = 24,
        exhaustive: bool = False,
    ):
        super().__init__(space)
        if not 0 < gamma_fraction <= 1:
            raise ValueError("gamma_fraction must lie in (0, 1]")
        if n_startup < 0 or n_candidates < 1:
            raise ValueError("n_startup must be >= 0 and n_candidates >= 1")
        self.gamma_fraction = gamma_fraction
        self.prior_weight = prior_weight
        self.n_startup = n_startup
        self.n_candidates = n_candidates
        self.exhaustive = exhaustive

    @property
    def knobs(self) -> dict[str, Any]:
        return {
            "gamma_fraction": self.gamma_fraction,
            "prior_weight": self.prior_weight,
            "n_startup": self.n_startup,
            "n_candidates": self.n_candidates,
            "exhaustive": self.exhaustive,
        }

    def densities(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        good, bad = tpe_split(self.history, self.gamma_fraction)
        l = {n: tpe_pmf(good, d, self.prior_weight) for n, d in self.space.items()}
        g = {n: tpe_pmf(bad, d, self.prior_weight) for n, d in self.space.items()}
        return l, g

    def _propose(self, rng):
        if len(self.completed) < self.n_startup or not self.completed:
            return sample_uniform(self.space, rng)
        l, g = self.densities()
        if self.exhaustive:
            candidates = (config_to_indices(self.space, c) for c in self.space.configs())
        else:
            candidates = [
                tuple(int(rng.choice(len(l[n]), p=l[n])) for n in self.space)
                for _ in range(self.n_candidates)
            ]
        best, best_score = None, -math.inf
        for ords in candidates:
            s = _log_score(ords, l, g, self.space)
            # Equal ratios such as (2/6)/(2/8) and (1/6)/(1/8) can differ in
            # the last bit once logged; treat those as ties, first one wins.
            if s > best_score + TIE_TOLERANCE:
                best, best_score = ords, s
        return indices_to_config(self.space, best)


def make_searcher(kind: str, space: SearchSpace, **knobs) -> Searcher:
    if kind == "tpe":
        return TPESearcher(space, **knobs)
    if knobs:
        raise TypeError(f"{kind} searcher takes no knobs, got {sorted(knobs)}")
    if kind == "random":
        return RandomSearcher(space)
    if kind == "grid":
        return GridSearcher(space)
    raise ValueError(f"unknown searcher kind {kind!r}; expected one of {SEARCHER_KINDS}")
