"""Analytic attention cost model, MAC instrumentation, and latency harness.

The two closed-form multiply-accumulate counts:

    mhsa(N, D)       = 4*N*D^2 + 2*N^2*D
    mhla(N, D, h, k) = 4*N*D^2 + N*D + 3*N*D^2/h + k^2*N*D

Both count projection and attention-core matrix products (plus the depthwise
convolution for the linear case) and nothing else: activations, epsilon
offsets, additions, and the normalizer divide are free. The instrumented
counter in ``tensor`` tallies exactly those two op kinds, so for a batch-one
attention forward the counted total must equal the formula as an integer.

Latency numbers are reported, never asserted against: wall-clock behavior is
hardware-specific, and the interesting observation (cost up, latency flat as
heads shrink) only appears on parallel hardware.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import attention, tensor as T
from .errors import ConfigurationError

CSV_FIELDS = (
    "variant", "N", "D", "h", "k",
    "analytic_macs", "counted_macs", "latency_mean_s", "latency_std_s", "trials",
)


def gmacs_mhsa(n_tokens, hidden_dim):
    """Closed-form MACs of multi-head softmax attention (head-count free)."""
    if n_tokens < 1 or hidden_dim < 1:
        raise ConfigurationError("token count and hidden dim must be >= 1")
    n, d = int(n_tokens), int(hidden_dim)
    return 4 * n * d * d + 2 * n * n * d


def gmacs_mhla(n_tokens, hidden_dim, heads, kernel):
    """Closed-form MACs of DWC-augmented multi-head linear attention."""
    if n_tokens < 1 or hidden_dim < 1 or heads < 1 or kernel < 1:
        raise ConfigurationError("all cost-model arguments must be >= 1")
    if hidden_dim % heads != 0:
        raise ConfigurationError(f"heads {heads} must divide hidden dim {hidden_dim}")
    n, d, h, k = int(n_tokens), int(hidden_dim), int(heads), int(kernel)
    return 4 * n * d * d + n * d + 3 * n * d * d // h + k * k * n * d


def analytic_macs(cfg: attention.AttentionConfig, n_tokens):
    """Formula value for one batch-one forward of the given variant."""
    if cfg.variant == "softmax":
        return gmacs_mhsa(n_tokens, cfg.hidden_dim)
    macs = gmacs_mhla(n_tokens, cfg.hidden_dim, cfg.num_heads, cfg.dwc_kernel)
    if not cfg.uses_dwc:  # bare baseline has no convolution term
        macs -= cfg.dwc_kernel**2 * n_tokens * cfg.hidden_dim
    return macs


def count_macs(fn):
    """Run ``fn`` once with instrumentation on; return matmul+conv MACs."""
    with T.mac_tally() as tally, T.no_grad():
        fn()
        return T.macs_executed()


@dataclass
class CostReport:
    variant: str
    n_tokens: int
    hidden_dim: int
    heads: int
    kernel: int
    analytic_macs: int
    counted_macs: int
    latency_mean_s: float
    latency_std_s: float
    latency_min_s: float
    trials: int
    batch: int

    @property
    def analytic_gmacs(self):
        return self.analytic_macs / 1e9

    def csv_row(self):
        return {
            "variant": self.variant,
            "N": self.n_tokens,
            "D": self.hidden_dim,
            "h": self.heads,
            "k": self.kernel,
            "analytic_macs": self.analytic_macs,
            "counted_macs": self.counted_macs,
            "latency_mean_s": f"{self.latency_mean_s:.9g}",
            "latency_std_s": f"{self.latency_std_s:.9g}",
            "trials": self.trials,
        }


def _bench_setup(cfg, grid_side, batch, seed):
    rng = np.random.default_rng(seed)
    params = attention.params_from_dict(attention.init_attention_params(cfg, rng))
    n = grid_side * grid_side
    x = T.Tensor(rng.standard_normal((batch, n, cfg.hidden_dim)).astype(T.default_dtype()))
    hw = (grid_side, grid_side)
    return params, x, hw


def attention_macs(cfg, grid_side, seed=0):
    """(analytic, counted) MAC pair for one batch-one attention forward."""
    params, x, hw = _bench_setup(cfg, grid_side, 1, seed)
    counted = count_macs(lambda: attention.attention_forward(x, params, cfg, hw=hw))
    return analytic_macs(cfg, grid_side * grid_side), counted


def bench_latency(cfg, grid_side, batch=1, trials=30, warmup=1, seed=0):
    """Wall-clock statistics over ``trials`` timed forwards (after warmup).

    The MAC columns always refer to a batch-one forward so they stay
    comparable to the formulas regardless of the timed batch size.
    """
    if trials < 1 or warmup < 1:
        raise ConfigurationError("trials and warmup must be >= 1")
    params, x, hw = _bench_setup(cfg, grid_side, batch, seed)
    analytic, counted = attention_macs(cfg, grid_side, seed)

    with T.no_grad():
        for _ in range(warmup):
            attention.attention_forward(x, params, cfg, hw=hw)
        times = np.empty(trials)
        for i in range(trials):
            start = time.perf_counter()
            attention.attention_forward(x, params, cfg, hw=hw)
            times[i] = time.perf_counter() - start

    return CostReport(
        variant=cfg.variant,
        n_tokens=grid_side * grid_side,
        hidden_dim=cfg.hidden_dim,
        heads=cfg.num_heads,
        kernel=cfg.dwc_kernel,
        analytic_macs=analytic,
        counted_macs=counted,
        latency_mean_s=float(times.mean()),
        latency_std_s=float(times.std()),
        latency_min_s=float(times.min()),
        trials=trials,
        batch=batch,
    )


def sweep_heads(heads_list, hidden_dim, grid_side, kernel=5, variant="linear_relu_dwc",
                batch=1, trials=30, warmup=1, seed=0):
    """One CostReport per head count, same geometry throughout."""
    reports = []
    for h in heads_list:
        cfg = attention.AttentionConfig(
            hidden_dim=hidden_dim, num_heads=h, variant=variant, dwc_kernel=kernel
        )
        reports.append(bench_latency(cfg, grid_side, batch=batch, trials=trials,
                                     warmup=warmup, seed=seed))
    return reports


def crossover_tokens(hidden_dim, heads, kernel, n_max=1 << 22):
    """Smallest token count where linear attention is cheaper than softmax.

    Found by scan; existence is guaranteed because the softmax cost grows
    quadratically in N while the linear cost grows linearly.
    """
    for n in range(1, n_max + 1):
        if gmacs_mhla(n, hidden_dim, heads, kernel) < gmacs_mhsa(n, hidden_dim):
            return n
    return None


def write_cost_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row())


def report_dict(report):
    return asdict(report)
