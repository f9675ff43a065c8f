"""Wall-clock scaling of token self-attention versus cross-covariance attention."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import XCA, Attention, Init

TABLE_HEADER = "mechanism\tN\tmedian_us\tp10_us\tp90_us"


@dataclass
class BenchRow:
    mechanism: str
    n: int
    median_us: float
    p10_us: float
    p90_us: float
    map_shape: tuple[int, ...]

    def line(self) -> str:
        return f"{self.mechanism}\t{self.n}\t{self.median_us:.1f}\t{self.p10_us:.1f}\t{self.p90_us:.1f}"


@dataclass
class BenchResult:
    rows: list[BenchRow]

    def slopes(self) -> dict[str, float]:
        """Log-log growth exponent of median time against N, per mechanism."""
        out = {}
        for mech in sorted({r.mechanism for r in self.rows}):
            rows = [r for r in self.rows if r.mechanism == mech]
            n = np.log([r.n for r in rows])
            t = np.log([r.median_us for r in rows])
            out[mech] = float(np.polyfit(n, t, 1)[0]) if len(rows) > 1 else float("nan")
        return out

    def ratios(self) -> dict[str, list[float]]:
        """time(N_{i+1}) / time(N_i) per mechanism."""
        out = {}
        for mech in sorted({r.mechanism for r in self.rows}):
            med = [r.median_us for r in self.rows if r.mechanism == mech]
            out[mech] = [b / a for a, b in zip(med[:-1], med[1:])]
        return out

    def table(self) -> str:
        return "\n".join([TABLE_HEADER] + [r.line() for r in self.rows]) + "\n"

    def summary(self) -> str:
        slopes = self.slopes()
        lines = [f"slope[{m}] = {s:.3f}" for m, s in slopes.items()]
        if "self_attention" in slopes and "xca" in slopes:
            lines.append(f"slope_gap = {slopes['self_attention'] - slopes['xca']:.3f}")
        return "\n".join(lines) + "\n"


def _time(fn, repetitions: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = np.empty(repetitions)
    for i in range(repetitions):
        start = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - start
    return times * 1e6


def bench_attention_scaling(token_counts, d: int = 64, repetitions: int = 5, heads: int = 1,
                            warmup: int = 1, seed: int = 0, dtype=np.float32) -> BenchResult:
    """Median forward time of self-attention and XCA at each token count."""
    token_counts = [int(n) for n in token_counts]
    if token_counts != sorted(token_counts):
        raise ValueError("token counts must be sorted ascending")
    rng = np.random.default_rng(seed)
    with ad.precision(dtype), ad.no_grad():
        init = Init(rng, dtype)
        attn = Attention(d, heads, init)
        cov = XCA(d, heads, init)
        rows = []
        for n in token_counts:
            x = Tensor(rng.standard_normal((1, n, d)), dtype=dtype)
            _, w_sa = attn(x, x, x, return_weights=True)
            _, w_xca = cov(x, return_weights=True)
            for name, fn, shape in (("self_attention", lambda: attn(x, x, x), w_sa.shape),
                                    ("xca", lambda: cov(x), w_xca.shape)):
                t = _time(fn, repetitions, warmup)
                rows.append(BenchRow(name, n, float(np.median(t)), float(np.percentile(t, 10)),
                                     float(np.percentile(t, 90)), tuple(shape)))
    return BenchResult(rows)
