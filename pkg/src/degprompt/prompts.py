"""Interval discretization and the canonical restoration-prompt text.

The vocabulary is closed: three clauses in a fixed order, each naming one
of four severity intervals, giving exactly 64 sentences.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

__all__ = [
    "N_INTERVALS",
    "DEGRADATION_TYPES",
    "INTERVAL_LABELS",
    "PromptError",
    "UnknownClauseError",
    "UnknownIntervalLabelError",
    "MissingClauseError",
    "ClauseOrderError",
    "RestorationPrompt",
    "degree_to_interval",
    "interval_label",
    "serialize_prompt",
    "parse_prompt",
    "vocabulary",
]

N_INTERVALS = 4
DEGRADATION_TYPES = ("blur", "noise", "jpeg")
CLAUSE_NAMES = ("Deblur", "Denoise", "Dejpeg")
INTERVAL_LABELS = ("0~0.25", "0.25~0.5", "0.5~0.75", "0.75~1")
_UPPER_EDGES = (0.25, 0.5, 0.75)


class PromptError(ValueError):
    """Text is not a canonical restoration prompt."""


class UnknownClauseError(PromptError):
    pass


class UnknownIntervalLabelError(PromptError):
    pass


class MissingClauseError(PromptError):
    pass


class ClauseOrderError(PromptError):
    pass


def degree_to_interval(d):
    """Map a degree to its interval: [0,.25] -> 0, (.25,.5] -> 1, (.5,.75] -> 2, (.75,1] -> 3."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"degree {d} outside [0, 1]")
    for idx, edge in enumerate(_UPPER_EDGES):
        if d <= edge:
            return idx
    return N_INTERVALS - 1


def interval_label(idx):
    if not isinstance(idx, int) or not 0 <= idx < N_INTERVALS:
        raise ValueError(f"interval index must be in 0..{N_INTERVALS - 1}, got {idx!r}")
    return INTERVAL_LABELS[idx]


def serialize_prompt(blur_i, noise_i, jpeg_i):
    parts = [f"{name} with sigma {interval_label(int(i))}"
             for name, i in zip(CLAUSE_NAMES, (blur_i, noise_i, jpeg_i))]
    return ", ".join(parts)


_CLAUSE_RE = re.compile(r"^(\S+)\s+with\s+sigma\s+(\S+)$")


def parse_prompt(text):
    """Inverse of :func:`serialize_prompt`.

    Whitespace around separators is tolerated; everything else is strict.
    Raises a distinct :class:`PromptError` subclass for an unknown clause
    name, an unknown interval label, a missing clause, or clauses out of
    order.
    """
    if not isinstance(text, str):
        raise PromptError(f"prompt must be text, got {type(text).__name__}")
    clauses = [c.strip() for c in text.strip().split(",")]
    parsed = []
    for clause in clauses:
        m = _CLAUSE_RE.match(clause)
        if m is None:
            raise PromptError(f"malformed clause {clause!r}")
        name, label = m.groups()
        if name not in CLAUSE_NAMES:
            raise UnknownClauseError(f"unknown clause {name!r}")
        if label not in INTERVAL_LABELS:
            raise UnknownIntervalLabelError(f"unknown interval label {label!r} in {name} clause")
        parsed.append((name, INTERVAL_LABELS.index(label)))

    names = [n for n, _ in parsed]
    for expected in CLAUSE_NAMES:
        if expected not in names:
            raise MissingClauseError(f"missing {expected} clause")
    if len(names) != len(CLAUSE_NAMES):
        raise PromptError(f"expected {len(CLAUSE_NAMES)} clauses, got {len(names)}")
    if tuple(names) != CLAUSE_NAMES:
        raise ClauseOrderError(f"clauses must appear as {', '.join(CLAUSE_NAMES)}")
    return tuple(i for _, i in parsed)


@dataclass(frozen=True)
class RestorationPrompt:
    blur_interval: int
    noise_interval: int
    jpeg_interval: int

    def __post_init__(self):
        for v in self.intervals:
            interval_label(v)

    @property
    def intervals(self):
        return (self.blur_interval, self.noise_interval, self.jpeg_interval)

    @property
    def text(self):
        return serialize_prompt(*self.intervals)

    def __str__(self):
        return self.text

    @classmethod
    def from_text(cls, text):
        return cls(*parse_prompt(text))

    @classmethod
    def from_degrees(cls, degrees):
        """Discretize a :class:`~degprompt.degradation.DegreeVector`."""
        return cls(*(degree_to_interval(d) for d in degrees.as_tuple()))


def vocabulary():
    """All 64 canonical prompt strings, in lexicographic interval order."""
    return [serialize_prompt(*t) for t in itertools.product(range(N_INTERVALS), repeat=3)]
