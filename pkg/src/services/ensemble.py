"""
Replicate ensemble runner.

Requirements:
1. Run independent replicate jobs concurrently, bounded by a worker count
   (`--threads`, then PDMP_LAB_THREADS, then available parallelism).
2. Replicate i of an experiment with base stream s draws from RngStream(seed, s + i),
   so results do not depend on scheduling.
3. Return results ordered by replicate index so every reduction is deterministic.
"""

import asyncio
import time
from dataclasses import dataclass
from typing import Any, Callable, List, Optional

from src.core.config import resolve_threads
from src.core.logging import logger
from src.core.rng import RngStream


@dataclass
class EnsembleStats:
    """Bookkeeping of the last ensemble run."""
    replicates: int = 0
    threads: int = 1
    elapsed_seconds: float = 0.0


class EnsembleRunner:
    """
    Bounded asyncio pool over worker threads.

    Usage example:
    ```python
    runner = EnsembleRunner(threads=4)
    paths = runner.run_replicates(lambda i, rng: simulate_bps(p, z0, cfg, rng), 20, seed=7)
    ```
    """

    def __init__(self, threads: Optional[int] = None):
        self.threads = resolve_threads(threads)
        self.stats = EnsembleStats(threads=self.threads)

    async def _run_one(self, semaphore: asyncio.Semaphore, fn: Callable[[int, RngStream], Any],
                       index: int, rng: RngStream) -> Any:
        async with semaphore:
            return await asyncio.to_thread(fn, index, rng)

    async def gather(self, fn: Callable[[int, RngStream], Any], n: int, seed: int, stream: int = 0) -> List[Any]:
        """Run fn(i, RngStream(seed, stream + i)) for i < n; results in replicate order."""
        semaphore = asyncio.Semaphore(self.threads)
        started = time.perf_counter()
        results = await asyncio.gather(*[
            self._run_one(semaphore, fn, i, RngStream(seed, stream + i)) for i in range(n)
        ])
        self.stats = EnsembleStats(replicates=n, threads=self.threads, elapsed_seconds=time.perf_counter() - started)
        logger.info(f"Ensemble of {n} replicates finished in {self.stats.elapsed_seconds:.2f}s on {self.threads} workers")
        return list(results)

    def run_replicates(self, fn: Callable[[int, RngStream], Any], n: int, seed: int, stream: int = 0) -> List[Any]:
        """Synchronous entry point around `gather`."""
        if n < 1:
            return []
        return asyncio.run(self.gather(fn, n, seed, stream))


def run_replicates(fn: Callable[[int, RngStream], Any], n: int, seed: int, stream: int = 0,
                   threads: Optional[int] = None) -> List[Any]:
    return EnsembleRunner(threads).run_replicates(fn, n, seed, stream)
