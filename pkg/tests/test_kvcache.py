import numpy as np
import pytest

from adadecode.errors import CacheGapError, PendingCapacityError
from adadecode.kvcache import KvStore, PendingLedger, rollback
from adadecode.model import LayerActivation, ModelConfig

CFG = ModelConfig(num_layers=8, hidden_dim=64, vocab_size=256, max_positions=64)
D = CFG.hidden_dim


def _hidden(value):
    return np.full(D, float(value))


def _current(pos):
    return LayerActivation(position=pos, token=pos % 7, hidden=_hidden(pos))


class TestKvStore:
    def test_commit_advances_watermark(self):
        store = KvStore(CFG)
        store.commit(3, np.arange(5), np.ones((5, D)), np.ones((5, D)))
        assert store.watermark(3) == 4
        store.commit(3, np.array([5, 6]), np.ones((2, D)), np.ones((2, D)))
        assert store.watermark(3) == 6

    def test_gap_rejected(self):
        store = KvStore(CFG)
        store.commit(1, np.arange(5), np.ones((5, D)), np.ones((5, D)))
        with pytest.raises(CacheGapError):
            store.commit(1, np.array([7]), np.ones((1, D)), np.ones((1, D)))

    def test_visible_returns_committed_prefix(self):
        store = KvStore(CFG)
        k = np.arange(3 * D, dtype=np.float64).reshape(3, D)
        store.commit(2, np.arange(3), k, k + 1)
        got_k, got_v = store.visible(2)
        assert np.array_equal(got_k, k)
        assert np.array_equal(got_v, k + 1)

    def test_rollback_rewinds(self):
        store = KvStore(CFG)
        for layer in range(1, CFG.num_layers + 1):
            store.commit(layer, np.arange(6), np.ones((6, D)), np.ones((6, D)))
        store.rollback(2)
        assert all(w == 1 for w in store.watermarks())

    def test_rollback_past_end_is_noop(self):
        store = KvStore(CFG)
        store.commit(1, np.arange(4), np.ones((4, D)), np.ones((4, D)))
        store.rollback(100)
        assert store.watermark(1) == 3


class TestPendingLedger:
    def test_membership_after_enqueue(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(10, token=3, exit_layer=4, hidden=_hidden(1))
        for layer in range(1, 5):
            assert ledger.pending_at(layer) == []
        for layer in range(5, 9):
            assert [e.position for e in ledger.pending_at(layer)] == [10]

    def test_two_exits_set_containment(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(10, token=1, exit_layer=2, hidden=_hidden(1))
        ledger.enqueue(11, token=2, exit_layer=4, hidden=_hidden(2))
        assert [e.position for e in ledger.pending_at(5)] == [10, 11]
        assert [e.position for e in ledger.pending_at(3)] == [10]

    def test_capacity_enforced(self):
        ledger = PendingLedger(8, 2)
        ledger.enqueue(1, 0, 4, _hidden(0))
        ledger.enqueue(2, 0, 4, _hidden(0))
        with pytest.raises(PendingCapacityError):
            ledger.enqueue(3, 0, 4, _hidden(0))

    def test_exit_layer_must_be_internal(self):
        ledger = PendingLedger(8, 5)
        with pytest.raises(ValueError):
            ledger.enqueue(1, 0, 8, _hidden(0))

    def test_take_batch_vanilla_case(self):
        ledger = PendingLedger(8, 5)
        batch, entries = ledger.take_batch(3, _current(6))
        assert len(batch) == 1 and entries == []
        assert batch.positions.tolist() == [6]

    def test_take_batch_prepends_pending(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(5, token=2, exit_layer=2, hidden=_hidden(5))
        batch, entries = ledger.take_batch(3, _current(6))
        assert batch.positions.tolist() == [5, 6]
        assert [e.position for e in entries] == [5]
        # consumed at layer 3 only after advance; deeper lists still hold it
        ledger.advance(entries[0], _hidden(50))
        assert ledger.pending_at(3) == []
        assert [e.position for e in ledger.pending_at(4)] == [5]

    def test_take_batch_rejects_gap(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(4, token=2, exit_layer=2, hidden=_hidden(4))
        with pytest.raises(CacheGapError):
            ledger.take_batch(3, _current(6))  # positions 4, 6: gap

    def test_take_batch_rejects_stale_entry(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(5, token=2, exit_layer=2, hidden=_hidden(5))
        with pytest.raises(CacheGapError):
            ledger.take_batch(4, _current(6))  # entry still needs layer 3

    def test_advance_through_final_layer_removes(self):
        ledger = PendingLedger(8, 5)
        ledger.enqueue(5, token=2, exit_layer=7, hidden=_hidden(5))
        (entry,) = ledger.pending_at(8)
        assert ledger.advance(entry, _hidden(9)) is True
        assert len(ledger) == 0

    def test_rollback_clears_from_position(self):
        store = KvStore(CFG)
        store.commit(1, np.arange(4), np.ones((4, D)), np.ones((4, D)))
        ledger = PendingLedger(8, 5)
        ledger.enqueue(2, 0, 4, _hidden(2))
        ledger.enqueue(3, 0, 4, _hidden(3))
        rollback(store, ledger, 3)
        assert ledger.positions() == [2]
        assert store.watermark(1) == 2
        rollback(store, ledger, 0)
        assert len(ledger) == 0
        assert store.watermark(1) == -1
