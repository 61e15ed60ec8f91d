"""Attention variants: softmax plus DWC-augmented linear attention.

The linear attention comes in three algebraically equivalent evaluation
orders, all exposed so they can cross-check each other:

* ``linear_attention_quadratic`` materializes the explicit NxN similarity
  matrix (reference semantics, O(N^2) cost);
* ``linear_attention_unscaled`` applies associativity to compute the d x d
  key-value state first (O(N) cost, plain form);
* ``linear_attention_factorized`` is the production path: the key-value state
  is formed from 1/sqrt(N)-scaled operands and the normalizer from the key
  mean, which keeps intermediate magnitudes O(1) for long sequences.

All three share one denominator convention: the kernelized similarity sum
plus N * z_eps, clamped to that magnitude from below. The offset is the
scaled path's epsilon expressed in unscaled form, so the paths agree to
rounding error rather than to epsilon error.

The production normalizer is applied through the same [N,d] x [d,d] product
as the value state (the key mean broadcast across columns). That keeps the
core's executed multiply-accumulates identical to the analytic cost model's
attention bracket; see ``complexity``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor

VARIANTS = ("softmax", "linear_relu", "linear_relu_dwc", "focused_relu", "focused_gelu")

# plain linear_relu is the bare baseline; every refined variant keeps the DWC
_DWC_VARIANTS = ("linear_relu_dwc", "focused_relu", "focused_gelu")
_GELU_VARIANTS = ("focused_gelu",)
_FOCUSED_VARIANTS = ("focused_relu", "focused_gelu")


@dataclass
class AttentionConfig:
    hidden_dim: int
    num_heads: int
    variant: str = "linear_relu_dwc"
    dwc_kernel: int = 5
    kernel_eps: float = 1e-6
    z_eps: float = 1e-6
    focused_power: int = 3
    fused_kv: bool = True
    use_bias: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown attention variant {self.variant!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.dwc_kernel % 2 == 0 or self.dwc_kernel < 1:
            raise ConfigurationError(f"dwc_kernel must be odd and positive, got {self.dwc_kernel}")
        if self.kernel_eps <= 0 or self.z_eps <= 0:
            raise ConfigurationError("kernel_eps and z_eps must be positive")
        if self.focused_power < 1:
            raise ConfigurationError(f"focused_power must be >= 1, got {self.focused_power}")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    @property
    def uses_dwc(self):
        return self.variant in _DWC_VARIANTS

    @property
    def uses_focused(self):
        return self.variant in _FOCUSED_VARIANTS

    @property
    def is_linear(self):
        return self.variant != "softmax"


@dataclass
class AttentionParams:
    """Projection and DWC parameters for one attention layer.

    Either the fused key-value projection (w_kv: [D, 2D]) or the separate
    pair (w_k, w_v: [D, D] each) is populated, never both.
    """

    w_q: Tensor
    w_o: Tensor
    w_kv: Tensor | None = None
    w_k: Tensor | None = None
    w_v: Tensor | None = None
    b_q: Tensor | None = None
    b_kv: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None
    dwc_weight: Tensor | None = None
    dwc_bias: Tensor | None = None

    @property
    def fused_kv(self):
        return self.w_kv is not None


def init_attention_params(cfg: AttentionConfig, rng) -> dict:
    """Freshly initialized parameter leaves, keyed by canonical leaf name."""
    d_model = cfg.hidden_dim
    leaves = {"w_q": T.trunc_normal((d_model, d_model), 0.02, rng)}
    if cfg.fused_kv:
        leaves["w_kv"] = T.trunc_normal((d_model, 2 * d_model), 0.02, rng)
    else:
        leaves["w_k"] = T.trunc_normal((d_model, d_model), 0.02, rng)
        leaves["w_v"] = T.trunc_normal((d_model, d_model), 0.02, rng)
    leaves["w_o"] = T.trunc_normal((d_model, d_model), 0.02, rng)
    if cfg.use_bias:
        leaves["b_q"] = np.zeros(d_model)
        if cfg.fused_kv:
            leaves["b_kv"] = np.zeros(2 * d_model)
        else:
            leaves["b_k"] = np.zeros(d_model)
            leaves["b_v"] = np.zeros(d_model)
        leaves["b_o"] = np.zeros(d_model)
    if cfg.uses_dwc:
        k, d = cfg.dwc_kernel, cfg.head_dim
        leaves["dwc_weight"] = T.trunc_normal((d, 1, k, k), 0.02, rng)
        leaves["dwc_bias"] = np.zeros(d)
    return {name: Tensor(value, requires_grad=True, dtype=T.default_dtype()) for name, value in leaves.items()}


def params_from_dict(leaves: dict) -> AttentionParams:
    return AttentionParams(**leaves)


# ---------------------------------------------------------------------------
# shared plumbing


def _linear(x, w, b):
    out = x @ w
    return out if b is None else out + b


def _project_qkv(x, params: AttentionParams):
    """x: [b, N, D] -> (q, k, v), each [b, N, D], before any kernel."""
    q = _linear(x, params.w_q, params.b_q)
    if params.fused_kv:
        d_model = params.w_q.shape[0]
        kv = _linear(x, params.w_kv, params.b_kv)
        k = kv[..., :d_model]
        v = kv[..., d_model:]
    else:
        k = _linear(x, params.w_k, params.b_k)
        v = _linear(x, params.w_v, params.b_v)
    return q, k, v


def _split_heads(x, num_heads):
    b, n, d_model = x.shape
    d = d_model // num_heads
    return x.reshape(b, n, num_heads, d).transpose(0, 2, 1, 3)  # [b, h, N, d]


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _resolve_hw(n, hw):
    if hw is not None:
        h, w = hw
        if h * w != n:
            raise DimensionError(f"token count {n} does not factor as {h}x{w}")
        return h, w
    side = int(round(n**0.5))
    if side * side != n:
        raise DimensionError(f"token count {n} is not a perfect square; pass hw explicitly")
    return side, side


def focused_kernel(x, p):
    """Sharpen rows by the elementwise power p while preserving each row norm.

    f(x) = ||x|| * x^p / ||x^p|| over the trailing axis; all-zero rows pass
    through unchanged.
    """
    if not isinstance(p, int) or p < 1:
        raise ConfigurationError(f"focused power must be a positive integer, got {p!r}")
    norm = T.sqrt(T.sum_(x * x, axis=-1, keepdims=True))
    xp = T.power(x, p)
    norm_p = T.sqrt(T.sum_(xp * xp, axis=-1, keepdims=True))
    zero_rows = (norm_p.data == 0.0).astype(x.dtype)  # 0/0 guard; those rows are all zero anyway
    return xp * (norm / (norm_p + Tensor(zero_rows)))


def apply_kernel(x, cfg: AttentionConfig):
    """The similarity feature map for linear variants: activation + eps offset,
    then the focused sharpening where the variant calls for it."""
    base = T.gelu(x) if cfg.variant in _GELU_VARIANTS else T.relu(x)
    phi = base + cfg.kernel_eps
    if cfg.uses_focused:
        phi = focused_kernel(phi, cfg.focused_power)
    return phi


def _stabilized_denominator(raw, n_tokens, z_eps, diag=None):
    """Shared convention: offset by N*z_eps, clamp magnitude at N*z_eps.

    ``raw`` holds per-query similarity sums in unscaled form. With the ReLU
    kernel the sums are strictly positive and the clamp is inert; the GELU
    kernel can drive them negative, in which case the clamp keeps the divide
    finite and ``diag`` records how many queries were affected.
    """
    floor = n_tokens * z_eps
    shifted = raw + floor
    if diag is not None:
        diag["denominator_clamped"] = int((np.abs(shifted.data) < floor).sum())
        diag["clamp_floor"] = floor
    return T.clamp_magnitude(shifted, floor)


def dwc_value_augment(attn_out, v_heads, weight, bias, height, width):
    """Add the depthwise-convolved value field to the attention output.

    attn_out: [b, N, D]; v_heads: [b, h, N, d]. The per-head value tokens are
    laid out on the (height, width) grid, convolved per channel, and merged
    back in the same head-major channel order the attention output uses.
    """
    b, h, n, d = v_heads.shape
    if n != height * width:
        raise DimensionError(f"value tokens {n} do not tile a {height}x{width} grid")
    grid = v_heads.reshape(b * h, height, width, d).transpose(0, 3, 1, 2)
    conv = T.conv2d_depthwise(grid, weight, bias)
    field = conv.reshape(b, h * d, n).transpose(0, 2, 1)
    return attn_out + field


# ---------------------------------------------------------------------------
# the four variants / three linear paths


def softmax_attention(x, params: AttentionParams, cfg: AttentionConfig):
    """Per-head scaled-dot-product attention with output projection."""
    b, n, _ = x.shape
    q, k, v = _project_qkv(x, params)
    q = _split_heads(q, cfg.num_heads)
    k = _split_heads(k, cfg.num_heads)
    v = _split_heads(v, cfg.num_heads)
    scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(cfg.head_dim))
    core = T.softmax(scores, axis=-1) @ v
    return _linear(_merge_heads(core), params.w_o, params.b_o)


def _linear_attention(x, params, cfg, hw, path, diag):
    b, n, _ = x.shape
    q, k, v = _project_qkv(x, params)
    q = apply_kernel(q, cfg)
    k = apply_kernel(k, cfg)
    q = _split_heads(q, cfg.num_heads)
    k = _split_heads(k, cfg.num_heads)
    v = _split_heads(v, cfg.num_heads)

    if path == "quadratic":
        sim = q @ T.swap_last(k)  # [b, h, N, N]
        den = _stabilized_denominator(T.sum_(sim, axis=-1, keepdims=True), n, cfg.z_eps, diag)
        core = (sim @ v) / den
    elif path == "unscaled":
        kv = T.swap_last(k) @ v  # [b, h, d, d]
        k_sum = T.sum_(k, axis=-2, keepdims=True)
        den = _stabilized_denominator(T.sum_(q * k_sum, axis=-1, keepdims=True), n, cfg.z_eps, diag)
        core = (q @ kv) / den
    elif path == "factorized":
        d = cfg.head_dim
        scale = float(n) ** -0.5
        mean_weights = Tensor(np.full((n, 1), 1.0 / n, dtype=x.dtype))
        k_mean = T.swap_last(k) @ mean_weights  # [b, h, d, 1]
        # the normalizer goes through the same [N,d]x[d,d] apply as the value
        # state: every column of the product is the query/key-mean dot product
        den = (q @ T.repeat(k_mean, d, axis=-1))[..., :1] + cfg.z_eps
        if diag is not None:
            diag["denominator_clamped"] = int((np.abs(den.data) < cfg.z_eps).sum())
            diag["clamp_floor"] = cfg.z_eps
        den = T.clamp_magnitude(den, cfg.z_eps)
        kv = (T.swap_last(k) * scale) @ (v * scale)  # [b, h, d, d]
        core = (q @ kv) / den
    else:
        raise ConfigurationError(f"unknown linear attention path {path!r}")

    out = _merge_heads(core)
    if cfg.uses_dwc:
        height, width = _resolve_hw(n, hw)
        out = dwc_value_augment(out, v, params.dwc_weight, params.dwc_bias, height, width)
    return _linear(out, params.w_o, params.b_o)


def linear_attention_quadratic(x, params, cfg, hw=None, diag=None):
    """Explicit NxN similarity path; the permanent reference oracle."""
    return _linear_attention(x, params, cfg, hw, "quadratic", diag)


def linear_attention_unscaled(x, params, cfg, hw=None, diag=None):
    """Associativity-reordered path in plain (unscaled) form."""
    return _linear_attention(x, params, cfg, hw, "unscaled", diag)


def linear_attention_factorized(x, params, cfg, hw=None, diag=None):
    """Production path: scaled key-value state and key-mean normalizer."""
    return _linear_attention(x, params, cfg, hw, "factorized", diag)


def attention_forward(x, params, cfg, hw=None, path="factorized", diag=None):
    """Dispatch on the configured variant; linear variants pick an evaluation path."""
    if cfg.variant == "softmax":
        return softmax_attention(x, params, cfg)
    return _linear_attention(x, params, cfg, hw, path, diag)


# ---------------------------------------------------------------------------
# head-similarity diagnostic


def attention_maps(x, params, cfg, hw=None):
    """Row-normalized attention matrices, one per head: [b, h, N, N].

    Softmax variant: the softmax matrix itself. Linear variants: kernelized
    similarities divided by the stabilized per-query normalizer.
    """
    b, n, _ = x.shape
    q, k, _ = _project_qkv(x, params)
    if cfg.is_linear:
        q = apply_kernel(q, cfg)
        k = apply_kernel(k, cfg)
    q = _split_heads(q, cfg.num_heads)
    k = _split_heads(k, cfg.num_heads)
    if cfg.variant == "softmax":
        return T.softmax((q @ T.swap_last(k)) * (1.0 / np.sqrt(cfg.head_dim)), axis=-1)
    sim = q @ T.swap_last(k)
    den = _stabilized_denominator(T.sum_(sim, axis=-1, keepdims=True), n, cfg.z_eps)
    return sim / den


def head_similarity(maps):
    """Mean pairwise cosine similarity of the flattened per-head maps.

    maps: [h, N, N] (numpy array or Tensor), h >= 2. Result lies in [-1, 1].
    """
    data = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    if data.ndim != 3:
        raise DimensionError(f"expected [h, N, N] attention maps, got shape {data.shape}")
    h = data.shape[0]
    if h < 2:
        raise ContractError(f"head similarity needs at least 2 heads, got {h}")
    flat = data.reshape(h, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    normed = flat / np.where(norms == 0.0, 1.0, norms)[:, None]
    gram = normed @ normed.T
    upper = gram[np.triu_indices(h, k=1)]
    return float(upper.mean())
