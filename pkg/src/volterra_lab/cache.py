import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from numpy.typing import NDArray
from opentelemetry import trace

from volterra_lab.kernels import Kernel

logger: logging.Logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

CacheStatus = Literal["table_from_cache", "new_table_built"]


@dataclass(frozen=True)
class KernelTables:
    """Kernel values the scheme reuses for one (kernel, grid) pair.

    ``lags[i]`` is K(i h) on the fine grid, ``node_weights[k, j]`` is
    K(t_k - t_j) / K(0) for coarse nodes j <= k (0 above the diagonal) and
    ``fine_weights[i, j]`` is K(s_i - t_j) / K(0) for fine times s_i >= t_j.
    """

    k0: float
    lags: NDArray[np.float64]
    node_weights: NDArray[np.float64]
    fine_weights: NDArray[np.float64]


def build_tables(kernel: Kernel, T: float, N: int, n_sub: int) -> KernelTables:
    n_fine = N * n_sub
    h = T / n_fine
    lag_index = np.arange(n_fine + 1)
    lags = kernel.eval(h * lag_index)
    k0 = kernel.k0
    # lags are integer multiples of h, so every weight is read off the same table
    node_lag = n_sub * (np.arange(N + 1)[:, None] - np.arange(N + 1)[None, :])
    node_weights = np.where(node_lag >= 0, lags[np.clip(node_lag, 0, None)], 0.0) / k0
    fine_lag = lag_index[:, None] - n_sub * np.arange(N + 1)[None, :]
    fine_weights = np.where(fine_lag >= 0, lags[np.clip(fine_lag, 0, None)], 0.0) / k0
    return KernelTables(k0=k0, lags=lags, node_weights=node_weights, fine_weights=fine_weights)


class KernelTableCache:
    def __init__(self, max_entries: int = 16):
        # key -> tables, most recently used last
        self._cache: "OrderedDict[str, KernelTables]" = OrderedDict()
        self._max_entries = max_entries
        self._lock = threading.Lock()

    def _get_key(self, kernel: Kernel, T: float, N: int, n_sub: int) -> str:
        """Stable hash of the kernel description and the grid."""
        payload = json.dumps({"kernel": kernel.describe(), "T": T, "N": N, "n_sub": n_sub}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def get_tables(self, kernel: Kernel, T: float, N: int, n_sub: int) -> Tuple[KernelTables, CacheStatus]:
        with tracer.start_as_current_span("get_kernel_tables") as span:
            span.set_attribute("grid.N", N)
            span.set_attribute("grid.n_sub", n_sub)
            key = self._get_key(kernel, T, N, n_sub)
            with self._lock:
                if key in self._cache:
                    self._cache.move_to_end(key)
                    span.add_event("kernel_table_cache_hit")
                    return self._cache[key], "table_from_cache"

                span.add_event("kernel_table_cache_miss")
                tables = build_tables(kernel, T, N, n_sub)
                self._cache[key] = tables
                while len(self._cache) > self._max_entries:
                    evicted, _ = self._cache.popitem(last=False)
                    logger.debug("Evicted kernel tables %s", evicted[:12])
                return tables, "new_table_built"

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()

    def __len__(self) -> int:
        return len(self._cache)


# Shared instance used by the scheme
kernel_table_cache: KernelTableCache = KernelTableCache()
