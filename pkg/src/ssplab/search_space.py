"""Original and poisoned search spaces as ordered multisets of operation slots.

A poisoned space lists the five original operations followed by ``q`` copies
of every poison operation, grouped by type. Each copy is a separate slot: it
gets its own controller logit and its own parameter bank.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ssplab.ops import ORIGINAL_KINDS, LayerInstance, OperationSpec, OpKind, Origin, make_layer

POISON_DROPOUT_P = 0.9


class PoisonSetId(enum.Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"


def poison_ops(set_id: PoisonSetId | str, dropout_p: float = POISON_DROPOUT_P) -> tuple[OperationSpec, ...]:
    set_id = PoisonSetId(set_id)
    identity = (OperationSpec(OpKind.IDENTITY, Origin.POISON),)
    transposed = (
        OperationSpec(OpKind.TRANS_CONV_3X3, Origin.POISON),
        OperationSpec(OpKind.TRANS_CONV_5X5, Origin.POISON),
    )
    dropout = (OperationSpec(OpKind.DROPOUT, Origin.POISON, dropout_p=dropout_p),)
    return {
        PoisonSetId.P1: identity,
        PoisonSetId.P2: transposed,
        PoisonSetId.P3: dropout,
        PoisonSetId.P4: identity + transposed + dropout,
    }[set_id]


@dataclass(frozen=True)
class SearchSpace:
    original_ops: tuple[OperationSpec, ...]
    poison_ops: tuple[OperationSpec, ...] = ()
    instance_factor_q: int = 1
    poison_set: PoisonSetId | None = None

    def __post_init__(self):
        if self.instance_factor_q < 1:
            raise ValueError(f"instance factor must be >= 1, got {self.instance_factor_q}")
        if not self.original_ops:
            raise ValueError("search space needs at least one original operation")

    @cached_property
    def slots(self) -> tuple[OperationSpec, ...]:
        q = self.instance_factor_q
        return self.original_ops + tuple(op for op in self.poison_ops for _ in range(q))

    @property
    def num_slots(self) -> int:
        return len(self.original_ops) + self.instance_factor_q * len(self.poison_ops)

    def is_poison_slot(self, index: int) -> bool:
        self._check_index(index)
        return index >= len(self.original_ops)

    def poison_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_slots, dtype=bool)
        mask[len(self.original_ops):] = True
        return mask

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.num_slots:
            raise IndexError(f"slot {index} out of range for {self.num_slots} slots")

    def slot(self, index: int) -> OperationSpec:
        self._check_index(index)
        n_orig = len(self.original_ops)
        if index < n_orig:
            return self.original_ops[index]
        return self.poison_ops[(index - n_orig) // self.instance_factor_q]

    def describe(self) -> str:
        if not self.poison_ops:
            return f"original ({self.num_slots} slots)"
        return f"{self.poison_set.value if self.poison_set else 'custom'} x{self.instance_factor_q} ({self.num_slots} slots)"


def build_original() -> SearchSpace:
    return SearchSpace(tuple(OperationSpec(kind) for kind in ORIGINAL_KINDS))


def poison(space: SearchSpace, set_id: PoisonSetId | str, q: int, dropout_p: float = POISON_DROPOUT_P) -> SearchSpace:
    """Return ``space`` extended with ``q`` instances of each operation in the poison set."""
    if q < 1:
        raise ValueError(f"instance factor must be >= 1, got {q}")
    if space.poison_ops:
        raise ValueError("space is already poisoned")
    set_id = PoisonSetId(set_id)
    return SearchSpace(space.original_ops, poison_ops(set_id, dropout_p), q, set_id)


def build_space(poison_set: str | None, q: int, dropout_p: float = POISON_DROPOUT_P) -> SearchSpace:
    """Space for a config value: ``none``/None gives the original space."""
    if poison_set in (None, "none"):
        return build_original()
    return poison(build_original(), poison_set, q, dropout_p)


def uniform_sampling_prob(space: SearchSpace) -> tuple[float, float | None]:
    """Per-original-op and per-poison-type probabilities of a uniform slot draw.

    Returns ``(1/(|S|+q|P|), q/(|S|+q|P|))``; the second entry is None for an
    unpoisoned space.
    """
    n = space.num_slots
    if not space.poison_ops:
        return 1.0 / n, None
    return 1.0 / n, space.instance_factor_q / n


def slot_to_layer(
    space: SearchSpace, slot_index: int, in_ch: int, out_ch: int, rng: np.random.Generator, wrapped: bool = True
) -> LayerInstance:
    return make_layer(space.slot(slot_index), in_ch, out_ch, 1, rng, wrapped=wrapped)
