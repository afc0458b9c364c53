"""Wall-clock and peak-allocation measurements for the scan and for inference."""

from __future__ import annotations

import csv
import time
import tracemalloc
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff.tensor import Tensor, no_tape
from .config import RunConfig
from .scene import generate_scene
from .ssm import SsmBlockParams, ssm_scan
from .training import FmoccModel, infer

COLUMNS = ("kind", "size", "seconds", "peak_bytes")


@dataclass
class BenchRow:
    kind: str  # "ssm_scan" (size = L) or "infer" (size = n_euler_steps)
    size: int
    seconds: float
    peak_bytes: int


def measure(fn: Callable[[], object], repeats: int) -> tuple[float, int]:
    """Best-of-``repeats`` wall time and the peak traced allocation of one extra call."""
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return best, peak


def bench_scan(lengths, channels: int, state_size: int, repeats: int, seed: int = 0,
               chunk: int = 32) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    p = SsmBlockParams(channels, state_size, rng)
    rows = []
    for L in lengths:
        x = Tensor(rng.standard_normal((1, L, channels)))

        def run():
            with no_tape():
                return ssm_scan(x, p, chunk)

        sec, peak = measure(run, repeats)
        rows.append(BenchRow("ssm_scan", int(L), sec, peak))
    return rows


def bench_infer(cfg: RunConfig, steps, repeats: int) -> list[BenchRow]:
    model = FmoccModel.from_config(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scene = generate_scene(cfg.scene.spec(), cfg.seed)
    rows = []
    for n in steps:
        sec, peak = measure(lambda: infer(scene.features, model, n), repeats)
        rows.append(BenchRow("infer", int(n), sec, peak))
    return rows


def run_bench(cfg: RunConfig) -> list[BenchRow]:
    b = cfg.bench
    rows = bench_scan(b.scan_lengths, cfg.scene.channels, cfg.model.state_size, b.repeats,
                      cfg.seed, cfg.model.scan_chunk)
    rows += bench_infer(cfg, b.euler_steps, b.repeats)
    return rows


def scan_ratio(rows: list[BenchRow], long: int = 4096, short: int = 1024) -> float:
    t = {r.size: r.seconds for r in rows if r.kind == "ssm_scan"}
    return t[long] / t[short]


def write_bench(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([r.kind, r.size, f"{r.seconds:.6g}", r.peak_bytes])


def read_bench(path) -> list[BenchRow]:
    with open(Path(path), newline="") as fh:
        return [BenchRow(d["kind"], int(d["size"]), float(d["seconds"]), int(d["peak_bytes"]))
                for d in csv.DictReader(fh)]
