"""Categorical hyperparameter domains and search spaces.

Every tuned hyperparameter lives on an explicit, ordered value ladder. A
search space is a contiguous slice of each ladder, kept in the canonical
parameter order (model-define group first, then optimization group).
"""

from __future__ import annotations

import configparser
import io
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

MODEL_DEFINE = "model_define"
OPTIMIZATION = "optimization"
GROUPS = (MODEL_DEFINE, OPTIMIZATION)

# (name, group, literal values) in canonical row order.
_BUILTIN_ROWS: tuple[tuple[str, str, tuple[str, ...]], ...] = (
    ("d_ff", MODEL_DEFINE, ("16", "32", "64", "128", "256", "512", "1024", "2048", "4096")),
    ("d_layers", MODEL_DEFINE, ("1", "2")),
    ("d_model", MODEL_DEFINE, ("16", "32", "64", "128", "256", "512", "1024", "2048", "4096")),
    ("e_layers", MODEL_DEFINE, ("1", "2", "3")),
    ("factor", MODEL_DEFINE, ("1", "2", "3", "4")),
    ("n_heads", MODEL_DEFINE, ("2", "4", "8", "16")),
    ("batch_size", OPTIMIZATION, ("4", "16", "32", "64", "128", "256")),
    ("learning_rate", OPTIMIZATION, ("0.00001", "0.0001", "0.001")),
    ("train_epochs", OPTIMIZATION, tuple(str(i) for i in range(1, 12))),
)

CANONICAL_ORDER: tuple[str, ...] = tuple(row[0] for row in _BUILTIN_ROWS)

# Lowest / highest values observed across the reference models' configurations.
OBSERVED_RANGES: dict[str, tuple[str, str]] = {
    "d_ff": ("32", "2048"),
    "d_layers": ("1", "1"),
    "d_model": ("32", "2048"),
    "e_layers": ("1", "2"),
    "factor": ("1", "3"),
    "n_heads": ("2", "8"),
    "batch_size": ("4", "128"),
    "learning_rate": ("0.0001", "0.0001"),
    "train_epochs": ("1", "10"),
}


class DomainError(ValueError):
    """A value or bound does not lie on the parameter's ladder."""


class InvalidConfig(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def parse_literal(text: str) -> int | float:
    """Parse a ladder literal once: integers stay ints, decimals become floats."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def _canonical_literal(value: Any) -> str:
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, (bool, np.bool_)):
        raise DomainError(f"boolean {value!r} is not a valid ladder value")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class ValueLadder:
    """Ordered admissible values for one hyperparameter."""

    name: str
    literals: tuple[str, ...]
    group: str = MODEL_DEFINE
    values: tuple[int | float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lits = tuple(_canonical_literal(v) for v in self.literals)
        object.__setattr__(self, "literals", lits)
        values = tuple(parse_literal(s) for s in lits)
        object.__setattr__(self, "values", values)
        if self.group not in GROUPS:
            raise ValueError(f"{self.name}: unknown group {self.group!r}")
        if len(values) < 2:
            raise ValueError(f"{self.name}: ladder needs at least two values")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"{self.name}: ladder values must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    def index(self, value: Any) -> int:
        for i, v in enumerate(self.values):
            if v == value or (isinstance(value, str) and parse_literal(value) == v):
                return i
        raise DomainError(f"{self.name}: {value!r} is not on the ladder {list(self.literals)}")


@dataclass(frozen=True)
class ParamDomain:
    """A contiguous inclusive slice ``[lo_index, hi_index]`` of a ladder."""

    ladder: ValueLadder
    lo_index: int = 0
    hi_index: int | None = None

    def __post_init__(self):
        hi = len(self.ladder) - 1 if self.hi_index is None else self.hi_index
        object.__setattr__(self, "hi_index", hi)
        if not 0 <= self.lo_index <= hi < len(self.ladder):
            raise ValueError(
                f"{self.name}: bad slice [{self.lo_index}, {hi}] for ladder of {len(self.ladder)}"
            )

    @property
    def name(self) -> str:
        return self.ladder.name

    @property
    def group(self) -> str:
        return self.ladder.group

    @property
    def values(self) -> tuple[int | float, ...]:
        return self.ladder.values[self.lo_index : self.hi_index + 1]

    @property
    def literals(self) -> tuple[str, ...]:
        return self.ladder.literals[self.lo_index : self.hi_index + 1]

    def __len__(self) -> int:
        return self.hi_index - self.lo_index + 1

    def __contains__(self, value: Any) -> bool:
        try:
            self.ordinal(value)
        except DomainError:
            return False
        return True

    def ordinal(self, value: Any) -> int:
        """Position of ``value`` inside the active slice."""
        i = self.ladder.index(value)
        if not self.lo_index <= i <= self.hi_index:
            raise DomainError(f"{self.name}: {value!r} outside domain {list(self.literals)}")
        return i - self.lo_index

    def format(self) -> str:
        return "[" + ",".join(self.literals) + "]"


def builtin_ladders() -> list[ValueLadder]:
    return [ValueLadder(name, lits, group) for name, group, lits in _BUILTIN_ROWS]


def derive_domain(ladder: ValueLadder, observed_min: Any, observed_max: Any) -> ParamDomain:
    """Widen the observed ``[min, max]`` by one ladder step on each side.

    Steps that would fall off either end of the ladder are clamped.
    """
    try:
        lo = ladder.index(observed_min)
        hi = ladder.index(observed_max)
    except DomainError as exc:
        raise DomainError(f"cannot derive domain: {exc}") from None
    if lo > hi:
        raise DomainError(f"{ladder.name}: observed_min {observed_min!r} > observed_max {observed_max!r}")
    return ParamDomain(ladder, max(0, lo - 1), min(len(ladder) - 1, hi + 1))


class SearchSpace(Mapping[str, ParamDomain]):
    """Ordered, immutable mapping of parameter name to domain."""

    def __init__(self, domains: Iterable[ParamDomain]):
        self._domains: dict[str, ParamDomain] = {}
        for d in domains:
            if d.name in self._domains:
                raise ValueError(f"duplicate parameter {d.name!r}")
            self._domains[d.name] = d
        if not self._domains:
            raise ValueError("search space is empty")

    def __getitem__(self, name: str) -> ParamDomain:
        return self._domains[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._domains)

    def __len__(self) -> int:
        return len(self._domains)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SearchSpace):
            return NotImplemented
        return list(self._domains.items()) == list(other._domains.items())

    def __hash__(self):
        return hash(tuple(self._domains.items()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}={d.format()}" for n, d in self._domains.items())
        return f"SearchSpace({inner})"

    @property
    def cardinality(self) -> int:
        n = 1
        for d in self._domains.values():
            n *= len(d)
        return n

    @classmethod
    def builtin(cls) -> "SearchSpace":
        """The nine-parameter space derived from the observed reference ranges."""
        domains = []
        for ladder in builtin_ladders():
            lo, hi = OBSERVED_RANGES[ladder.name]
            domains.append(derive_domain(ladder, lo, hi))
        return cls(domains)

    @classmethod
    def from_values(cls, values: Mapping[str, Sequence[Any]], groups: Mapping[str, str] | None = None) -> "SearchSpace":
        """Build a space whose domains are exactly the given value lists."""
        groups = dict(groups or {})
        known = {l.name: l.group for l in builtin_ladders()}
        domains = []
        for name, vals in values.items():
            group = groups.get(name, known.get(name, MODEL_DEFINE))
            domains.append(ParamDomain(ValueLadder(name, tuple(vals), group)))
        return cls(domains)

    def subset(self, names: Iterable[str]) -> "SearchSpace":
        return SearchSpace(self._domains[n] for n in names)

    def configs(self) -> Iterator[dict[str, Any]]:
        """Every config, lexicographic in ordinals (first parameter slowest)."""
        for ords in itertools.product(*(range(len(d)) for d in self._domains.values())):
            yield indices_to_config(self, ords)

    # --- plain-text serialization -------------------------------------
    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for name, dom in self._domains.items():
            if not parser.has_section(dom.group):
                parser.add_section(dom.group)
            parser.set(dom.group, name, "[" + ", ".join(dom.literals) + "]")
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SearchSpace":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        domains = []
        for group in parser.sections():
            if group not in GROUPS:
                raise ValueError(f"unknown parameter group [{group}]")
            for name, raw in parser.items(group):
                raw = raw.strip()
                if not (raw.startswith("[") and raw.endswith("]")):
                    raise ValueError(f"{name}: expected a bracketed list, got {raw!r}")
                lits = tuple(s.strip() for s in raw[1:-1].split(",") if s.strip())
                domains.append(ParamDomain(ValueLadder(name, lits, group)))
        return cls(domains)


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> dict[str, Any]:
    """Draw every parameter independently and uniformly from its slice."""
    return {name: dom.values[int(rng.integers(len(dom)))] for name, dom in space.items()}


def validate_config(space: SearchSpace, config: Mapping[str, Any]) -> list[str]:
    """Return every violation of ``config`` against ``space``; empty means ok."""
    violations = []
    for name, dom in space.items():
        if name not in config:
            violations.append(f"{name}: absent")
        elif config[name] not in dom:
            violations.append(f"{name}: {config[name]!r} ∉ domain")
    for name in config:
        if name not in space:
            violations.append(f"{name}: not a parameter of the space")
    return violations


def config_to_indices(space: SearchSpace, config: Mapping[str, Any]) -> tuple[int, ...]:
    violations = validate_config(space, config)
    if violations:
        raise InvalidConfig(violations)
    return tuple(dom.ordinal(config[name]) for name, dom in space.items())


def indices_to_config(space: SearchSpace, indices: Sequence[int]) -> dict[str, Any]:
    if len(indices) != len(space):
        raise ValueError(f"expected {len(space)} ordinals, got {len(indices)}")
    return {name: dom.values[i] for (name, dom), i in zip(space.items(), indices)}
