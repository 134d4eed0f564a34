"""Per-layer KV cache and the pending-token ledger.

The store keeps, for every layer, the K/V rows of the contiguous prefix of
positions committed so far (the per-layer watermark). An early-exited
token stops ascending at its exit layer; the ledger keeps its saved
activation (the input to its next unprocessed layer) and re-inserts it
into the batch at every deeper layer as later tokens ascend, so the
deferred work rides along in the same layer calls. Rollback rewinds both
structures from a rejected position onward, inclusive: the rejected
token's own rows were computed under the wrong token identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheGapError, PendingCapacityError
from .model import ActivationBatch, LayerActivation, ModelConfig


class KvStore:
    """Preallocated per-layer K/V rows with contiguous-prefix watermarks."""

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.max_positions, config.hidden_dim)
        self._k = [np.zeros(shape) for _ in range(config.num_layers)]
        self._v = [np.zeros(shape) for _ in range(config.num_layers)]
        # highest committed position per layer; -1 = empty
        self._watermark = [-1] * config.num_layers

    def watermark(self, layer: int) -> int:
        return self._watermark[layer - 1]

    def watermarks(self) -> list[int]:
        return list(self._watermark)

    def visible(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of the committed K and V rows at a 1-based layer."""
        n = self._watermark[layer - 1] + 1
        return self._k[layer - 1][:n], self._v[layer - 1][:n]

    def commit(self, layer: int, positions: np.ndarray, k_rows: np.ndarray, v_rows: np.ndarray):
        w = self._watermark[layer - 1]
        positions = np.asarray(positions)
        if positions[0] != w + 1 or np.any(np.diff(positions) != 1):
            raise CacheGapError(
                f"commit at layer {layer} positions {positions.tolist()} "
                f"not contiguous with watermark {w}"
            )
        hi = int(positions[-1])
        if hi >= self.config.max_positions:
            raise CacheGapError(f"position {hi} exceeds max_positions")
        self._k[layer - 1][w + 1 : hi + 1] = k_rows
        self._v[layer - 1][w + 1 : hi + 1] = v_rows
        self._watermark[layer - 1] = hi

    def rollback(self, from_position: int):
        """Drop all rows at positions >= from_position at every layer."""
        for i in range(self.config.num_layers):
            self._watermark[i] = min(self._watermark[i], from_position - 1)


@dataclass
class PendingToken:
    activation: LayerActivation  # saved input to `next_layer`
    exit_layer: int
    next_layer: int

    @property
    def position(self) -> int:
        return self.activation.position


@dataclass
class DraftRecord:
    token: int
    trigger_position: int  # the position whose head produced this draft
    exit_layer: int
    dist: np.ndarray  # the head's distribution the draft was sampled from


class PendingLedger:
    """Tokens awaiting deferred layer work, keyed by position.

    A token exited at layer e is pending at layers e+1..L; `next_layer`
    tracks how far its deferred work has advanced. Entries are consumed at
    a layer when batched there (re-processing would double-commit KV).
    """

    def __init__(self, num_layers: int, max_pending: int):
        self.num_layers = num_layers
        self.max_pending = max_pending
        self._entries: dict[int, PendingToken] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def positions(self) -> list[int]:
        return sorted(self._entries)

    def pending_at(self, layer: int) -> list[PendingToken]:
        """Entries whose remaining work includes `layer` (the list P[layer])."""
        return [e for _, e in sorted(self._entries.items()) if e.next_layer <= layer <= self.num_layers]

    def enqueue(self, position: int, token: int, exit_layer: int, hidden: np.ndarray):
        if exit_layer >= self.num_layers:
            raise ValueError(f"exit layer {exit_layer} must be < {self.num_layers}")
        if len(self._entries) >= self.max_pending:
            raise PendingCapacityError(
                f"{len(self._entries)} tokens already pending (max {self.max_pending}); "
                "run a full pass instead"
            )
        self._entries[position] = PendingToken(
            activation=LayerActivation(position=position, token=token, hidden=hidden),
            exit_layer=exit_layer,
            next_layer=exit_layer + 1,
        )

    def take_batch(
        self, layer: int, current: LayerActivation | None
    ) -> tuple[ActivationBatch, list[PendingToken]]:
        """Batch for one layer call: ready pending entries, then `current`.

        Ready entries are those whose next unprocessed layer is exactly
        `layer`; during a normal ascent that is every member of P[layer],
        because the current token sweeps pending work one layer at a time.
        The returned positions must be strictly increasing and contiguous.
        """
        ready = [e for _, e in sorted(self._entries.items()) if e.next_layer == layer]
        stale = [e for e in self._entries.values() if e.next_layer < layer]
        if stale:
            raise CacheGapError(
                f"pending entries at positions {[e.position for e in stale]} "
                f"missed processing before layer {layer}"
            )
        acts = [e.activation for e in ready]
        if current is not None:
            if acts and current.position <= acts[-1].position:
                raise CacheGapError(
                    f"current position {current.position} does not exceed pending "
                    f"positions {[a.position for a in acts]}"
                )
            acts.append(current)
        if not acts:
            return ActivationBatch(
                positions=np.empty(0, dtype=np.int64),
                tokens=np.empty(0, dtype=np.int64),
                hidden=np.empty((0, 0)),
            ), []
        positions = np.array([a.position for a in acts], dtype=np.int64)
        if np.any(np.diff(positions) != 1):
            raise CacheGapError(f"batch positions {positions.tolist()} not contiguous")
        batch = ActivationBatch(
            positions=positions,
            tokens=np.array([a.token for a in acts], dtype=np.int64),
            hidden=np.stack([a.hidden for a in acts]),
        )
        return batch, ready

    def advance(self, entry: PendingToken, new_hidden: np.ndarray) -> bool:
        """Record one completed layer; True when the entry just finished layer L."""
        entry.activation.hidden = new_hidden
        entry.next_layer += 1
        if entry.next_layer > self.num_layers:
            del self._entries[entry.position]
            return True
        return False

    def min_ready_layer(self) -> int | None:
        if not self._entries:
            return None
        return min(e.next_layer for e in self._entries.values())

    def drop_from(self, position: int):
        for pos in [p for p in self._entries if p >= position]:
            del self._entries[pos]


def rollback(store: KvStore, ledger: PendingLedger, from_position: int):
    """Remove all KV rows and pending entries at positions >= from_position."""
    store.rollback(from_position)
    ledger.drop_from(from_position)
