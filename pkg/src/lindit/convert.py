"""Weight inheritance from a softmax teacher into a linear student, plus EMA.

A conversion builds a freshly initialized student store, then overwrites the
selected groups with bitwise copies of the teacher's tensors:

* feed-forward weights (``load_ffn``),
* adaLN modulation layers, block-level and final (``load_modulation``),
* patch / timestep / label embeddings and the final projection
  (``load_embeddings_and_final``),
* any subset of the attention projections Q, K, V, O (``attention_subset``).

The recommended configuration copies everything except the attention
projections, which stay randomly initialized: the two attention families
compute different things, so softmax-attention projections carry little
value for the linear student. Depthwise-convolution parameters are always
fresh (the teacher has none). Head counts are free to differ: projections
are [D, D] regardless of the head split.

Fused ([D, 2D]) and separate ([D, D] x 2) key-value layouts on either side
are reconciled by column slicing; a fused tensor with only one half copied is
reported as "partial".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone
from .backbone import ParamStore
from .errors import ConfigurationError, StructuralError
from .tensor import Tensor

_ATTENTION_UNITS = ("Q", "K", "V", "O")


@dataclass
class InheritSpec:
    source: str = "raw"  # "raw" for live weights, "ema" for the shadow
    attention_subset: frozenset = frozenset()
    load_ffn: bool = True
    load_modulation: bool = True
    load_embeddings_and_final: bool = True

    def __post_init__(self):
        if self.source not in ("raw", "ema"):
            raise ConfigurationError(f"inherit source must be 'raw' or 'ema', got {self.source!r}")
        self.attention_subset = frozenset(self.attention_subset)
        unknown = self.attention_subset - set(_ATTENTION_UNITS)
        if unknown:
            raise ConfigurationError(f"unknown attention units {sorted(unknown)}; valid: Q, K, V, O")

    def to_dict(self):
        return {
            "source": self.source,
            "attention_subset": sorted(self.attention_subset),
            "load_ffn": self.load_ffn,
            "load_modulation": self.load_modulation,
            "load_embeddings_and_final": self.load_embeddings_and_final,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            source=d.get("source", "raw"),
            attention_subset=frozenset(d.get("attention_subset", [])),
            load_ffn=d.get("load_ffn", True),
            load_modulation=d.get("load_modulation", True),
            load_embeddings_and_final=d.get("load_embeddings_and_final", True),
        )


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaState:
    shadow: ParamStore
    decay: float


def init_ema(store, decay=0.9999):
    if not (0.0 <= decay <= 1.0):
        raise ConfigurationError(f"EMA decay must lie in [0, 1], got {decay}")
    return EmaState(shadow=store.clone(), decay=decay)


def ema_update(live, ema: EmaState):
    """shadow <- decay * shadow + (1 - decay) * live, per parameter."""
    live_paths, shadow_paths = set(live.paths()), set(ema.shadow.paths())
    if live_paths != shadow_paths:
        missing = sorted(live_paths ^ shadow_paths)
        raise StructuralError(f"EMA shadow and live store diverge on paths: {missing}")
    d = ema.decay
    for path, p in live.items():
        s = ema.shadow[path].data
        s *= d
        s += (1.0 - d) * p.data


# ---------------------------------------------------------------------------
# inheritance


def _require_matching(teacher_cfg, student_cfg):
    fields_ = ("layers", "hidden", "patch", "channels", "image_size",
               "num_classes", "freq_dim", "ffn_ratio", "predicts_variance")
    mismatched = [
        f for f in fields_ if getattr(teacher_cfg, f) != getattr(student_cfg, f)
    ]
    if mismatched:
        raise StructuralError(
            "teacher/student configs must agree on "
            f"{mismatched}: teacher={[getattr(teacher_cfg, f) for f in mismatched]} "
            f"student={[getattr(student_cfg, f) for f in mismatched]}"
        )


def _kv_parts(store, prefix, fused, d_model):
    """Teacher K/V weights and biases as arrays, regardless of layout."""
    if fused:
        w = store[f"{prefix}.w_kv"].data
        parts = {"K": (w[:, :d_model], None), "V": (w[:, d_model:], None)}
        if f"{prefix}.b_kv" in store:
            b = store[f"{prefix}.b_kv"].data
            parts = {"K": (w[:, :d_model], b[:d_model]), "V": (w[:, d_model:], b[d_model:])}
        return parts
    out = {}
    for unit, leaf in (("K", "k"), ("V", "v")):
        w = store[f"{prefix}.w_{leaf}"].data
        b = store[f"{prefix}.b_{leaf}"].data if f"{prefix}.b_{leaf}" in store else None
        out[unit] = (w, b)
    return out


def _copy_whole(student, teacher, path, copied):
    student[path].data = teacher[path].data.copy().astype(student[path].dtype)
    copied.append(path)


def inherit(teacher_store, teacher_cfg, student_cfg, spec: InheritSpec, seed):
    """Build a student store: copied groups bitwise from the teacher,
    everything else freshly initialized from ``seed``.

    Returns (store, report). The report partitions every student path into
    copied / fresh, with fused key-value tensors that received exactly one
    half listed under "partial". The teacher store is never mutated.
    """
    _require_matching(teacher_cfg, student_cfg)
    student = backbone.init_params(student_cfg, seed)
    copied, partial = [], []

    def want(path):
        if ".attn." in path:
            return False  # handled by the subset logic below
        if path.startswith(("patch_embed.", "time_embed.", "label_embed.", "final.linear.")):
            return spec.load_embeddings_and_final
        if ".adaln." in path or path.startswith("final.adaln."):
            return spec.load_modulation
        if ".ffn." in path:
            return spec.load_ffn
        return False

    for path in student.paths():
        if want(path):
            if path not in teacher_store:
                raise StructuralError(f"teacher store lacks {path}")
            _copy_whole(student, teacher_store, path, copied)

    d_model = student_cfg.hidden
    for i in range(student_cfg.layers):
        prefix = f"blocks.{i}.attn"
        if "Q" in spec.attention_subset:
            _copy_whole(student, teacher_store, f"{prefix}.w_q", copied)
            if f"{prefix}.b_q" in student and f"{prefix}.b_q" in teacher_store:
                _copy_whole(student, teacher_store, f"{prefix}.b_q", copied)
        if "O" in spec.attention_subset:
            _copy_whole(student, teacher_store, f"{prefix}.w_o", copied)
            if f"{prefix}.b_o" in student and f"{prefix}.b_o" in teacher_store:
                _copy_whole(student, teacher_store, f"{prefix}.b_o", copied)

        kv_units = spec.attention_subset & {"K", "V"}
        if kv_units:
            parts = _kv_parts(teacher_store, prefix, teacher_cfg.fused_kv, d_model)
            if student_cfg.fused_kv:
                w = student[f"{prefix}.w_kv"].data
                b = student[f"{prefix}.b_kv"].data if f"{prefix}.b_kv" in student else None
                for unit in sorted(kv_units):
                    cols = slice(0, d_model) if unit == "K" else slice(d_model, 2 * d_model)
                    w[:, cols] = parts[unit][0]
                    if b is not None and parts[unit][1] is not None:
                        b[cols] = parts[unit][1]
                record = copied if kv_units == {"K", "V"} else partial
                record.append(f"{prefix}.w_kv")
                if b is not None:
                    record.append(f"{prefix}.b_kv")
            else:
                for unit in sorted(kv_units):
                    leaf = "k" if unit == "K" else "v"
                    w_t, b_t = parts[unit]
                    student[f"{prefix}.w_{leaf}"].data = w_t.copy().astype(
                        student[f"{prefix}.w_{leaf}"].dtype
                    )
                    copied.append(f"{prefix}.w_{leaf}")
                    if b_t is not None and f"{prefix}.b_{leaf}" in student:
                        student[f"{prefix}.b_{leaf}"].data = b_t.copy().astype(
                            student[f"{prefix}.b_{leaf}"].dtype
                        )
                        copied.append(f"{prefix}.b_{leaf}")

    fresh = [p for p in student.paths() if p not in copied and p not in partial]
    report = {
        "copied": sorted(copied),
        "partial": sorted(partial),
        "fresh": sorted(fresh),
        "attention_subset": sorted(spec.attention_subset),
        "source": spec.source,
        "init_seed": int(seed),
        "teacher_layout": "fused" if teacher_cfg.fused_kv else "separate",
        "student_layout": "fused" if student_cfg.fused_kv else "separate",
        "teacher_variant": teacher_cfg.variant,
        "student_variant": student_cfg.variant,
    }
    return student, report
