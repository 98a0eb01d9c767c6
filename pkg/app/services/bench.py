"""
Timing and size benchmarks.

Timings are best-of-N wall times and vary between machines; the structure
of the report (entry names and order) does not.
"""

import logging
import time
from typing import Callable

import numpy as np

from app.schemas.config import Branches, NetworkConfig
from app.schemas.reports import BenchReport, ParamCountEntry, TimingEntry
from app.services.network import backward, build_model, forward, param_count
from app.services.transforms import fwht_1d, hadamard_matrix

logger = logging.getLogger(__name__)

REPEATS = 5
TRANSFORM_SIZE = 128
TRANSFORM_BATCH = 1024
BENCH_BATCH = 2
BENCH_WIDTHS = (4, 8)

# Shipped multi-day configurations (40 input channels at 128 x 128) with
# their published parameter counts.
REFERENCE_CONFIGS: dict[str, tuple[NetworkConfig, int]] = {
    "ht-unet[B=8]": (
        NetworkConfig(branches=Branches.HT_ONLY, base_width=8, in_channels=40, in_size=128),
        169_000,
    ),
    "td-fusion-unet[B=4]": (
        NetworkConfig(branches=Branches.HT_DCT, base_width=4, in_channels=40, in_size=128),
        159_000,
    ),
    "td-fusion-unet[B=8]": (
        NetworkConfig(branches=Branches.HT_DCT, base_width=8, in_channels=40, in_size=128),
        370_000,
    ),
}


def best_time(fn: Callable[[], object], repeats: int = REPEATS) -> float:
    """Fastest of `repeats` wall-clock runs, in seconds."""
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def reference_param_counts() -> list[ParamCountEntry]:
    """param_count of every shipped configuration next to its reference."""
    return [
        ParamCountEntry(name=name, count=param_count(build_model(cfg)), reference=reference)
        for name, (cfg, reference) in REFERENCE_CONFIGS.items()
    ]


def naive_hadamard(h: list[list[int]], v: list[float]) -> list[float]:
    """H @ v by explicit row-by-column sums, the O(N^2) reference."""
    return [sum(h_ij * v_j for h_ij, v_j in zip(row, v)) for row in h]


def _transform_timings(rng: np.random.Generator) -> list[TimingEntry]:
    n = TRANSFORM_SIZE
    vector = rng.standard_normal(n)
    vectors = rng.standard_normal((TRANSFORM_BATCH, n))
    h = hadamard_matrix(n)
    h_rows, v_list = h.tolist(), vector.tolist()
    h64 = h.astype(np.float64)
    return [
        TimingEntry(name=f"fwht_1d[N={n}]", seconds=best_time(lambda: fwht_1d(vector))),
        TimingEntry(name=f"hadamard_naive[N={n}]", seconds=best_time(lambda: naive_hadamard(h_rows, v_list))),
        TimingEntry(
            name=f"fwht_1d[N={n},batch={TRANSFORM_BATCH}]", seconds=best_time(lambda: fwht_1d(vectors))
        ),
        TimingEntry(
            name=f"hadamard_matmul[N={n},batch={TRANSFORM_BATCH}]", seconds=best_time(lambda: vectors @ h64.T)
        ),
    ]


def _network_timings(base: NetworkConfig, rng: np.random.Generator) -> list[TimingEntry]:
    entries = []
    x = rng.standard_normal((BENCH_BATCH, base.in_channels, base.in_size, base.in_size)).astype(np.float32)
    for branches, label in ((Branches.HT_ONLY, "ht-unet"), (Branches.HT_DCT, "td-fusion-unet")):
        for width in BENCH_WIDTHS:
            model = build_model(base.model_copy(update={"branches": branches, "base_width": width}))

            def step() -> None:
                probs, trace = forward(model, x, "train")
                backward(model, trace, np.ones_like(probs))

            entries.append(
                TimingEntry(
                    name=f"{label}[B={width}].forward",
                    seconds=best_time(lambda: forward(model, x, "eval")),
                )
            )
            entries.append(TimingEntry(name=f"{label}[B={width}].forward_backward", seconds=best_time(step)))
    return entries


def run_bench(network: NetworkConfig, seed: int = 0) -> BenchReport:
    """Transform timings, network timings at the configured input shape, and reference sizes."""
    rng = np.random.default_rng(seed)
    timings = _transform_timings(rng) + _network_timings(network, rng)
    for entry in timings:
        logger.info(f"bench {entry.name}: {entry.seconds * 1e3:.3f} ms")
    return BenchReport(timings=timings, param_counts=reference_param_counts())
