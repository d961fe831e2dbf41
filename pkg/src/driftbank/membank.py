"""Rollout memory of posterior latents."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Tensor


class CapacityError(RuntimeError):
    pass


class EmptyMemoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    rollout_index: int
    latent: Tensor  # (..., L, D)


@dataclass
class MemoryBank:
    """Ordered posterior latents of one sequence (or one batch of sequences).

    ``pos_table`` holds one learnable row per rollout slot and is only ever
    added to a retrieval-time view; stored latents stay raw. Leading batch
    axes on the latents are allowed as long as every entry shares them.

    Every read is appended to ``access_log`` as ``(step, indices)`` so the
    causality of a rollout can be audited afterwards.
    """

    pos_table: Tensor
    entries: list[MemoryEntry] = field(default_factory=list)
    access_log: list[tuple[int | None, tuple[int, ...]]] = field(default_factory=list)
    current_step: int | None = None

    @classmethod
    def empty(cls, capacity: int, dim: int) -> "MemoryBank":
        if capacity < 1:
            raise ValueError("capacity must be positive")
        return cls(pos_table=Tensor(np.zeros((capacity, dim))))

    @property
    def capacity(self) -> int:
        return self.pos_table.shape[0]

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self) -> tuple[int, ...]:
        return tuple(e.rollout_index for e in self.entries)

    def _log(self, idx: tuple[int, ...]) -> None:
        self.access_log.append((self.current_step, idx))

    def write(self, z: Tensor, r: int) -> None:
        if len(self.entries) >= self.capacity:
            raise CapacityError(f"memory full ({self.capacity} entries)")
        if r < 0:
            raise ContractError("rollout index must be nonnegative")
        if self.entries and r <= self.entries[-1].rollout_index:
            raise ContractError(
                f"rollout index {r} not after last stored index {self.entries[-1].rollout_index}")
        if self.entries and z.shape != self.entries[0].latent.shape:
            raise nc.DimensionError(f"latent shape {z.shape} != {self.entries[0].latent.shape}")
        if z.shape[-1] != self.pos_table.shape[-1]:
            raise nc.DimensionError("latent feature extent does not match pos_table")
        self.entries.append(MemoryEntry(r, z))

    def view_with_pos(self) -> Tensor:
        """Stacked entries plus their positional rows: (..., R, L, D)."""
        if not self.entries:
            raise EmptyMemoryError("memory bank is empty")
        self._log(self.indices())
        raw = nc.stack([e.latent for e in self.entries], axis=-3)
        R = len(self.entries)
        pos = nc.expand_dims(self.pos_table[:R], -2)  # (R, 1, D)
        return nc.add(raw, pos)

    def drift_sequence(self, view: Tensor | None = None) -> Tensor:
        """Consecutive differences of the embedded view, zero-padded in front."""
        if view is None:
            view = self.view_with_pos()
        R = view.shape[-3]
        first = nc.zeros(view.shape[:-3] + (1,) + view.shape[-2:])
        if R == 1:
            return first
        diffs = nc.sub(view[..., 1:, :, :], view[..., :-1, :, :])
        return nc.concat([first, diffs], axis=-3)

    def reference(self, z_prior: Tensor) -> Tensor:
        """Most recent raw latent, or ``z_prior`` when nothing is stored."""
        if not self.entries:
            return z_prior
        last = self.entries[-1]
        self._log((last.rollout_index,))
        return last.latent

    def clear(self) -> None:
        self.entries.clear()
        self.access_log.clear()
        self.current_step = None

    def reads_at(self, step: int) -> set[int]:
        out: set[int] = set()
        for s, idx in self.access_log:
            if s == step:
                out.update(idx)
        return out
