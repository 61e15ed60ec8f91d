"""Hybrid teacher supervision: noise matching plus moderate variance matching.

The total objective is

    total = l_simple + lambda1 * l_noise + lambda2 * l_var

where l_noise is the MSE between teacher and student noise predictions and
l_var the MSE between their interpolated reverse-process variances, both
evaluated at the same noised input. The teacher runs in inference mode, so
its parameters never receive gradients; when both lambdas are zero the
teacher is not evaluated at all and the returned loss is the plain denoising
objective, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion
from .errors import ConfigurationError


@dataclass
class DistillConfig:
    lambda1: float = 0.5
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("distillation weights must be nonnegative")

    @property
    def needs_teacher(self):
        return self.lambda1 > 0 or self.lambda2 > 0


def l_noise(eps_teacher, eps_student):
    """Squared Frobenius gap scaled by 1/(B*C*H*W): elementwise MSE."""
    return diffusion.mse(eps_student, eps_teacher)


def l_var(sigma_teacher, sigma_student):
    """Elementwise MSE between the two reverse-process variances."""
    return diffusion.mse(sigma_student, sigma_teacher)


def check_compatible(student_cfg, teacher_cfg):
    """Distillation only needs matching data geometry, not matching widths."""
    if (student_cfg.channels, student_cfg.image_size) != (
        teacher_cfg.channels,
        teacher_cfg.image_size,
    ):
        raise ConfigurationError(
            "teacher and student disagree on data geometry: "
            f"({teacher_cfg.channels}, {teacher_cfg.image_size}) vs "
            f"({student_cfg.channels}, {student_cfg.image_size})"
        )


def hybrid_loss(batch, student, teacher, schedule, cfg: DistillConfig):
    """Total loss plus per-component breakdown for logging.

    ``batch`` is (x_t, t, y, eps): the noised input, its timesteps, labels,
    and the true noise. Both networks see the identical (x_t, t, y). Returns
    (total Tensor, dict of float components).
    """
    x_t, t, y, eps = batch
    eps_student, v_student = student.forward(x_t, t, y)
    simple = diffusion.l_simple(eps_student, eps)

    if not cfg.needs_teacher:
        parts = {
            "l_simple": simple.item(),
            "l_noise": 0.0,
            "l_var": 0.0,
            "total": simple.item(),
        }
        return simple, parts

    if teacher is None:
        raise ConfigurationError("lambda1/lambda2 > 0 requires a teacher model")
    check_compatible(student.config, teacher.config)
    eps_teacher, v_teacher = teacher.predict(x_t, t, y)

    noise_term = l_noise(eps_teacher, eps_student)
    total = simple + cfg.lambda1 * noise_term

    var_value = 0.0
    if cfg.lambda2 > 0:
        if v_student is None or v_teacher is None:
            raise ConfigurationError("variance distillation needs variance heads on both models")
        sigma_student = diffusion.variance_from_v(v_student, t, schedule)
        sigma_teacher = diffusion.variance_from_v(v_teacher, t, schedule)
        var_term = l_var(sigma_teacher, sigma_student)
        total = total + cfg.lambda2 * var_term
        var_value = var_term.item()

    parts = {
        "l_simple": simple.item(),
        "l_noise": noise_term.item(),
        "l_var": var_value,
        "total": total.item(),
    }
    return total, parts
