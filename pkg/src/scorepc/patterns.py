"""Ternary query patterns over the potential parents of a fixed child node.

A pattern assigns one of three states to every variable other than the
child ("target"): the variable is excluded from the parent set (ZERO),
included (ONE), or summed over (MARGINALIZED).  A pattern with no
marginalized entries is a complete parent-set indicator vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ZERO = 0
ONE = 1
MARGINALIZED = 2

_STATE_CHARS = {ZERO: "0", ONE: "1", MARGINALIZED: "m"}
_CHAR_STATES = {"0": ZERO, "1": ONE, "m": MARGINALIZED}


def position_of(variable: int, target: int) -> int:
    """Pattern position of a variable index (patterns skip the target)."""
    if variable == target:
        raise ValueError("target variable has no pattern position")
    return variable if variable < target else variable - 1


def variable_at(position: int, target: int) -> int:
    """Variable index stored at a pattern position."""
    return position if position < target else position + 1


@dataclass(frozen=True)
class QueryPattern:
    """Per-variable ternary state vector for one child node.

    ``states`` has length d - 1 where d is the total number of variables;
    position p refers to variable p if p < target, else p + 1.
    """

    states: tuple[int, ...]
    target: int

    def __post_init__(self):
        if any(s not in (ZERO, ONE, MARGINALIZED) for s in self.states):
            raise ValueError("pattern states must be 0, 1 or 2")
        if self.target < 0:
            raise ValueError("target must be a non-negative node index")

    @property
    def num_vars(self) -> int:
        return len(self.states)

    @property
    def is_complete(self) -> bool:
        return MARGINALIZED not in self.states

    def parent_variables(self) -> tuple[int, ...]:
        """Variable indices whose state is ONE."""
        return tuple(
            variable_at(p, self.target)
            for p, s in enumerate(self.states)
            if s == ONE
        )

    def marginalized_variables(self) -> tuple[int, ...]:
        return tuple(
            variable_at(p, self.target)
            for p, s in enumerate(self.states)
            if s == MARGINALIZED
        )

    def as_array(self) -> np.ndarray:
        return np.asarray(self.states, dtype=np.int8)

    def to_string(self) -> str:
        return "".join(_STATE_CHARS[s] for s in self.states)

    @classmethod
    def from_string(cls, text: str, target: int) -> "QueryPattern":
        try:
            states = tuple(_CHAR_STATES[c] for c in text)
        except KeyError as exc:
            raise ValueError(
                f"pattern characters must be one of '01m', got {exc.args[0]!r}"
            ) from None
        return cls(states, target)

    @classmethod
    def from_states(cls, states: Sequence[int] | np.ndarray, target: int) -> "QueryPattern":
        return cls(tuple(int(s) for s in states), target)

    @classmethod
    def complete(cls, target: int, parents: Iterable[int], num_total_vars: int) -> "QueryPattern":
        """Complete pattern for a parent set given as variable indices."""
        states = [ZERO] * (num_total_vars - 1)
        for v in parents:
            states[position_of(v, target)] = ONE
        return cls(tuple(states), target)

    @classmethod
    def all_marginalized(cls, target: int, num_total_vars: int) -> "QueryPattern":
        return cls((MARGINALIZED,) * (num_total_vars - 1), target)
