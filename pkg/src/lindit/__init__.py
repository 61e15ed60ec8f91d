"""lindit: linear-attention diffusion transformers at desk scale.

Subpackages: tensor (autodiff core), attention (all attention variants),
backbone (the denoiser), diffusion (schedule, losses, sampler), distill
(hybrid teacher supervision), convert (weight inheritance / EMA), complexity
(cost model and benchmarks), pipeline_io (checkpoints, datasets, logs),
training (teacher/student loops), figures (report plots), cli (driver).
"""

__version__ = "0.1.0"
