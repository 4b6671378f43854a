"""Forward-pass latency benchmarking with analytic cost context.

Timing wraps only the forward call on a monotonic clock; warm-up passes are
excluded. The report carries the parameter count, analytic FLOPs, the
derived ms/GFLOP, the threading mode, and published reference figures for
the original configuration of this architecture (context, never asserted).
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import backends
from .model import (ModelConfig, PUBLISHED_REFERENCE, build_model,
                    count_params, estimate_flops)
from .tensor import Tensor, no_grad


@dataclass
class BenchReport:
    backend: str
    kernel_threads: int
    input_shape: tuple
    warmup: int
    samples_ms: List[float]
    params: int
    flops: int
    flagged_unstable: bool = False

    @property
    def repeats(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def ms_per_gflop(self) -> float:
        return self.mean_ms / self.gflops if self.flops else float("nan")

    def lines(self) -> List[str]:
        mode = ("single-threaded" if self.kernel_threads == 1
                else f"{self.kernel_threads or 'auto'} kernel threads")
        out = [
            f"backend {self.backend} ({mode}), input {self.input_shape}",
            f"timed samples: {self.repeats} (after {self.warmup} warm-up passes)",
            f"latency ms: mean {self.mean_ms:.2f}  median {self.median_ms:.2f}  "
            f"p95 {self.p95_ms:.2f}",
            f"params: {self.params:,}  analytic FLOPs: {self.gflops:.3f} G  "
            f"ms/GFLOP: {self.ms_per_gflop:.3f}",
        ]
        if self.flagged_unstable:
            out.append("note: median > 1.5x mean; timing looks unstable on this machine")
        ref = PUBLISHED_REFERENCE
        out.append(
            f"published reference (original configuration, {ref['input']}): "
            f"{ref['params_millions']}M params, {ref['gflops']} GFLOPs, "
            f"{ref['gpu_ms']} ms GPU / {ref['cpu_ms']} ms CPU, "
            f"ms/GFLOP {ref['ms_per_gflop']} -- context only, not asserted")
        return out


def bench_model(config: ModelConfig, input_shape, repeats: int = 200,
                warmup: int = 5, threads: int = 1, batch: int = 1,
                backend: Optional[str] = None) -> BenchReport:
    d, h, w = (int(s) for s in input_shape)
    previous = None
    if backend is not None:
        previous = backends.use_backend(backend)
    if backends.NATIVE_AVAILABLE:
        from . import _native
        _native.set_num_threads(threads)
    try:
        model = build_model(config)
        x = Tensor(np.random.default_rng(0).standard_normal(
            (batch, config.in_channels, d, h, w)).astype(np.float32))
        with no_grad():
            for _ in range(warmup):
                model.forward(x, training=False)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.forward(x, training=False)
                samples.append(1e3 * (time.perf_counter() - t0))
    finally:
        if previous is not None:
            backends.use_backend(previous)

    params, _ = count_params(model)
    flops, _ = estimate_flops(config, (d, h, w))
    report = BenchReport(
        backend=backend or backends.current_backend(),
        kernel_threads=threads,
        input_shape=(batch, config.in_channels, d, h, w),
        warmup=warmup,
        samples_ms=samples,
        params=params,
        flops=flops * batch,
    )
    report.flagged_unstable = report.median_ms > 1.5 * report.mean_ms
    return report


def compare_backends(config: ModelConfig, input_shape, repeats: int = 20,
                     warmup: int = 3, threads: int = 1) -> Dict[str, BenchReport]:
    """Time the same model under every available kernel backend."""
    return {name: bench_model(config, input_shape, repeats=repeats, warmup=warmup,
                              threads=threads, backend=name)
            for name in backends.available_backends()}
