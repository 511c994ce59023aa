"""Unit tests for workers.py module."""

import threading

import pytest

from volterra_lab.workers import default_threads, map_blocks, split_blocks


class TestSplitBlocks:
    def test_partition(self) -> None:
        blocks = split_blocks(10, 4)
        assert blocks == [range(0, 4), range(4, 8), range(8, 10)]

    def test_empty(self) -> None:
        assert split_blocks(0, 4) == []

    def test_rejects_bad_block_size(self) -> None:
        with pytest.raises(ValueError):
            split_blocks(10, 0)


class TestMapBlocks:
    def test_order_is_preserved(self) -> None:
        blocks = split_blocks(100, 7)
        assert map_blocks(lambda b: b.start, blocks, threads=8) == [b.start for b in blocks]

    def test_runs_on_worker_threads(self) -> None:
        seen = set()
        lock = threading.Lock()

        def record(_: range) -> None:
            with lock:
                seen.add(threading.get_ident())

        map_blocks(record, split_blocks(4, 1), threads=1)
        assert seen == {threading.get_ident()}

    def test_default_threads(self) -> None:
        assert default_threads() >= 1
