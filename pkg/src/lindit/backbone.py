"""Transformer denoiser: patchified tokens, adaLN-Zero blocks, two-channel head.

The architecture is deliberately conventional: patch embedding plus fixed 2-D
sin/cos position codes, timestep + class-label conditioning summed into one
vector, pre-LN blocks whose shift/scale/gate modulation comes from a
zero-initialized linear layer (so a fresh block is the identity map), and a
zero-initialized final projection (so a fresh model predicts exactly zero
noise and zero variance coefficient).

Attention inside each block is any variant from ``attention``; everything
else is shared between the softmax teacher and the linear student, which is
what makes weight inheritance between them a pure copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention, tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, NumericFault
from .tensor import Tensor


class ParamStore:
    """Ordered map from parameter path to Tensor.

    Iteration order is insertion order and is identical across runs, which is
    what checkpoint layouts, EMA shadows, and inheritance reports rely on.
    """

    def __init__(self):
        self._params = {}

    def __setitem__(self, path, tensor):
        self._params[path] = tensor

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self):
        return list(self._params.keys())

    def clone(self):
        out = ParamStore()
        for path, p in self.items():
            t = Tensor(p.data.copy(), requires_grad=p.requires_grad)
            out[path] = t
        return out

    def num_values(self):
        return sum(p.size for _, p in self.items())


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    patch: int
    channels: int = 1
    image_size: int = 8
    num_classes: int = 4
    variant: str = "linear_relu_dwc"
    dwc_kernel: int = 5
    predicts_variance: bool = True
    kernel_eps: float = 1e-6
    z_eps: float = 1e-6
    focused_power: int = 3
    fused_kv: bool = True
    use_bias: bool = True
    freq_dim: int = 256
    ffn_ratio: int = 4
    label_drop_prob: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ConfigurationError(
                f"image side {self.image_size} not divisible by patch {self.patch}"
            )
        if self.hidden % 4 != 0:
            raise ConfigurationError("hidden dim must be a multiple of 4 (2-D position codes)")
        if self.freq_dim % 2 != 0:
            raise ConfigurationError("freq_dim must be even")
        self.attention_config()  # validates heads/kernel/eps combinations

    @property
    def grid_side(self):
        return self.image_size // self.patch

    @property
    def tokens(self):
        return self.grid_side**2

    @property
    def null_label(self):
        return self.num_classes

    @property
    def out_channels(self):
        return 2 * self.channels if self.predicts_variance else self.channels

    def attention_config(self):
        return attention.AttentionConfig(
            hidden_dim=self.hidden,
            num_heads=self.heads,
            variant=self.variant,
            dwc_kernel=self.dwc_kernel,
            kernel_eps=self.kernel_eps,
            z_eps=self.z_eps,
            focused_power=self.focused_power,
            fused_kv=self.fused_kv,
            use_bias=self.use_bias,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# architectural presets; the -micro pair is the desk-scale default experiment
PRESETS = {
    "dit-s": dict(layers=12, hidden=384, heads=6, patch=2, variant="softmax"),
    "lit-s": dict(layers=12, hidden=384, heads=2, patch=2, variant="linear_relu_dwc"),
    "dit-micro": dict(layers=4, hidden=64, heads=4, patch=2, variant="softmax"),
    "lit-micro": dict(layers=4, hidden=64, heads=2, patch=2, variant="linear_relu_dwc"),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# initialization


def init_params(cfg: ModelConfig, seed) -> ParamStore:
    """Fresh parameters: truncated normal (std 0.02) projections, zero biases,
    zero modulation and final layers (identity-at-init)."""
    rng = np.random.default_rng(seed)
    d_model, patch_dim = cfg.hidden, cfg.patch * cfg.patch * cfg.channels
    store = ParamStore()

    def param(path, value):
        store[path] = Tensor(value, requires_grad=True, dtype=T.default_dtype())

    param("patch_embed.weight", T.trunc_normal((patch_dim, d_model), 0.02, rng))
    param("patch_embed.bias", np.zeros(d_model))
    param("time_embed.w1", T.trunc_normal((cfg.freq_dim, d_model), 0.02, rng))
    param("time_embed.b1", np.zeros(d_model))
    param("time_embed.w2", T.trunc_normal((d_model, d_model), 0.02, rng))
    param("time_embed.b2", np.zeros(d_model))
    param("label_embed.table", T.trunc_normal((cfg.num_classes + 1, d_model), 0.02, rng))

    attn_cfg = cfg.attention_config()
    for i in range(cfg.layers):
        for leaf, tensor in attention.init_attention_params(attn_cfg, rng).items():
            store[f"blocks.{i}.attn.{leaf}"] = tensor
        hidden_ffn = cfg.ffn_ratio * d_model
        param(f"blocks.{i}.ffn.w1", T.trunc_normal((d_model, hidden_ffn), 0.02, rng))
        param(f"blocks.{i}.ffn.b1", np.zeros(hidden_ffn))
        param(f"blocks.{i}.ffn.w2", T.trunc_normal((hidden_ffn, d_model), 0.02, rng))
        param(f"blocks.{i}.ffn.b2", np.zeros(d_model))
        param(f"blocks.{i}.adaln.weight", np.zeros((d_model, 6 * d_model)))
        param(f"blocks.{i}.adaln.bias", np.zeros(6 * d_model))

    param("final.adaln.weight", np.zeros((d_model, 2 * d_model)))
    param("final.adaln.bias", np.zeros(2 * d_model))
    out_dim = cfg.patch * cfg.patch * cfg.out_channels
    param("final.linear.weight", np.zeros((d_model, out_dim)))
    param("final.linear.bias", np.zeros(out_dim))
    return store


def expected_param_count(cfg: ModelConfig):
    """Closed-form parameter count; must equal the store's actual size."""
    d_model = cfg.hidden
    patch_dim = cfg.patch * cfg.patch * cfg.channels
    bias = 1 if cfg.use_bias else 0
    total = patch_dim * d_model + d_model
    total += cfg.freq_dim * d_model + d_model + d_model * d_model + d_model
    total += (cfg.num_classes + 1) * d_model

    attn = d_model * d_model + bias * d_model            # q
    attn += 2 * d_model * d_model + bias * 2 * d_model   # kv (fused or separate, same size)
    attn += d_model * d_model + bias * d_model           # out
    attn_cfg = cfg.attention_config()
    if attn_cfg.uses_dwc:
        d_head = d_model // cfg.heads
        attn += d_head * cfg.dwc_kernel**2 + d_head
    ffn = 2 * cfg.ffn_ratio * d_model * d_model
    ffn += cfg.ffn_ratio * d_model + d_model
    adaln = 6 * d_model * d_model + 6 * d_model
    total += cfg.layers * (attn + ffn + adaln)

    total += 2 * d_model * d_model + 2 * d_model         # final modulation
    out_dim = cfg.patch * cfg.patch * cfg.out_channels
    total += d_model * out_dim + out_dim                 # final projection
    return total


# ---------------------------------------------------------------------------
# embeddings and layout


def patchify(x, patch):
    """[b, C, S, S] -> [b, N, patch*patch*C] token layout (no projection)."""
    x = T.as_tensor(x)
    b, c, s, s2 = x.shape
    if s != s2 or s % patch != 0:
        raise ConfigurationError(f"cannot patchify {x.shape} with patch {patch}")
    g = s // patch
    x = x.reshape(b, c, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # [b, gh, gw, p, p, c]
    return x.reshape(b, g * g, patch * patch * c)


def unpatchify(tokens, patch, channels, image_size):
    """Inverse of ``patchify`` at the token-layout level."""
    tokens = T.as_tensor(tokens)
    b, n, dim = tokens.shape
    g = image_size // patch
    if n != g * g or dim != patch * patch * channels:
        raise DimensionError(f"cannot unpatchify {tokens.shape} to {channels}x{image_size}^2")
    x = tokens.reshape(b, g, g, patch, patch, channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)  # [b, c, gh, p, gw, p]
    return x.reshape(b, channels, image_size, image_size)


def timestep_frequencies(t, freq_dim, max_period=10000.0):
    """Sinusoidal code for integer timesteps: sin block then cos block."""
    t = np.atleast_1d(np.asarray(t))
    if (t < 0).any():
        raise ContractError(f"timesteps must be nonnegative, got min {t.min()}")
    half = freq_dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb.astype(T.default_dtype())


def position_codes(cfg: ModelConfig):
    """Fixed 2-D sin/cos position table [N, hidden]; not a parameter."""
    g, d_model = cfg.grid_side, cfg.hidden
    quarter = d_model // 4
    freqs = np.exp(-math.log(10000.0) * np.arange(quarter) / quarter)
    coords = np.arange(g, dtype=np.float64)
    axis = coords[:, None] * freqs[None, :]
    axis = np.concatenate([np.sin(axis), np.cos(axis)], axis=-1)  # [g, d/2]
    rows = np.repeat(axis, g, axis=0)          # varies along grid rows
    cols = np.tile(axis, (g, 1))               # varies along grid cols
    return np.concatenate([rows, cols], axis=-1).astype(T.default_dtype())


def label_embedding(table, y, num_classes):
    """Row lookup; index num_classes is the learned null (unconditional) row."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if (y < 0).any() or (y > num_classes).any():
        raise ContractError(f"labels must lie in [0, {num_classes}], got {y.min()}..{y.max()}")
    return T.take_rows(table, y)


def conditioning_vector(store, cfg, t, y):
    """c = MLP(sinusoidal(t)) + label_table[y], shape [b, hidden]."""
    freqs = Tensor(timestep_frequencies(t, cfg.freq_dim))
    h = T.silu(freqs @ store["time_embed.w1"] + store["time_embed.b1"])
    t_emb = h @ store["time_embed.w2"] + store["time_embed.b2"]
    return t_emb + label_embedding(store["label_embed.table"], y, cfg.num_classes)


# ---------------------------------------------------------------------------
# blocks


def modulate(x, shift, scale):
    return x * (scale + 1.0) + shift


def adaln_modulation(c, weight, bias, pieces):
    """Map conditioning [b, D] -> ``pieces`` modulation tensors [b, 1, D]."""
    mods = T.silu(c) @ weight + bias
    d_model = weight.shape[0]
    b = mods.shape[0]
    return [mods[:, i * d_model : (i + 1) * d_model].reshape(b, 1, d_model) for i in range(pieces)]


def _attention_params(store, prefix):
    leaves = {}
    for name in ("w_q", "w_kv", "w_k", "w_v", "b_q", "b_kv", "b_k", "b_v",
                 "w_o", "b_o", "dwc_weight", "dwc_bias"):
        path = f"{prefix}.{name}"
        if path in store:
            leaves[name] = store[path]
    return attention.params_from_dict(leaves)


def block_forward(store, cfg, index, x, c, attn_path="factorized"):
    """One pre-LN block with adaLN-Zero modulation. Fresh blocks are identity."""
    attn_cfg = cfg.attention_config()
    prefix = f"blocks.{index}"
    shift1, scale1, gate1, shift2, scale2, gate2 = adaln_modulation(
        c, store[f"{prefix}.adaln.weight"], store[f"{prefix}.adaln.bias"], 6
    )
    hw = (cfg.grid_side, cfg.grid_side)
    h = modulate(T.layernorm(x), shift1, scale1)
    x = x + gate1 * attention.attention_forward(
        h, _attention_params(store, f"{prefix}.attn"), attn_cfg, hw=hw, path=attn_path
    )
    h = modulate(T.layernorm(x), shift2, scale2)
    h = T.gelu(h @ store[f"{prefix}.ffn.w1"] + store[f"{prefix}.ffn.b1"])
    return x + gate2 * (h @ store[f"{prefix}.ffn.w2"] + store[f"{prefix}.ffn.b2"])


def model_forward(store, cfg, x, t, y, attn_path="factorized"):
    """Denoise: (x_t, t, y) -> (eps_hat, v_hat or None), shapes like x.

    y uses index num_classes for the unconditional branch. Non-finite
    activations surface as NumericFault naming the offending block.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != cfg.image_size:
        raise DimensionError(f"input {x.shape} does not match config geometry")
    tokens = patchify(x, cfg.patch) @ store["patch_embed.weight"] + store["patch_embed.bias"]
    tokens = tokens + Tensor(position_codes(cfg))
    c = conditioning_vector(store, cfg, t, y)
    for i in range(cfg.layers):
        tokens = block_forward(store, cfg, i, tokens, c, attn_path)
        if not np.isfinite(tokens.data).all():
            raise NumericFault(f"non-finite activations after block {i}")
    shift, scale = adaln_modulation(c, store["final.adaln.weight"], store["final.adaln.bias"], 2)
    h = modulate(T.layernorm(tokens), shift, scale)
    out = h @ store["final.linear.weight"] + store["final.linear.bias"]
    image = unpatchify(out, cfg.patch, cfg.out_channels, cfg.image_size)
    if not np.isfinite(image.data).all():
        raise NumericFault("non-finite activations in the final projection")
    if cfg.predicts_variance:
        eps_hat = image[:, : cfg.channels]
        v_hat = image[:, cfg.channels :]
        return eps_hat, v_hat
    return image, None


class DenoiserModel:
    """Bundles a ParamStore with its ModelConfig.

    ``forward`` builds a differentiable graph; ``predict`` is the inference
    entry (no tape, numpy in / numpy out) used by samplers and teachers.
    """

    def __init__(self, store, config):
        self.store = store
        self.config = config

    def forward(self, x, t, y):
        return model_forward(self.store, self.config, x, t, y)

    def predict(self, x, t, y):
        with T.no_grad():
            eps_hat, v_hat = self.forward(x, t, y)
        return eps_hat.data, None if v_hat is None else v_hat.data
