"""Central finite-difference gradient verification.

These helpers evaluate the loss function only through forward passes, so they
are an independent check on the tape's backward sweep. Run them in 64-bit
mode (``tensor.precision("f64")``): at h=1e-5 the truncation and roundoff
errors then sit comfortably below the 1e-4 relative budget.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def numeric_gradient(fn, param, h=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. one tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        with T.no_grad():
            up = fn().item()
        flat[i] = saved - h
        with T.no_grad():
            down = fn().item()
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric):
    """Per-tensor relative disagreement: max|a-n| over the larger magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn, named_params, h=1e-5):
    """Compare tape gradients of ``fn()`` against finite differences.

    ``named_params`` is an iterable of (name, Tensor) pairs with
    requires_grad set. Returns {name: relative_error}.
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss = fn()
    T.backward(loss)
    errors = {}
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numeric_gradient(fn, p, h)
        errors[name] = max_relative_error(analytic, numeric)
    return errors


def run_gradient_suite(seed=0):
    """Gradient-check every differentiable operation plus a tiny full model.

    Returns {case_name: relative_error}; callers assert max() < 1e-4.
    """
    from . import backbone  # local import: keeps this module free of cycles

    results = {}
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        def leaf(shape):
            return T.Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)

        a, b = leaf((3, 4)), leaf((4, 2))
        results.update(_rename("matmul", check_gradients(lambda: (a @ b).sum(), [("a", a), ("b", b)])))

        x = leaf((2, 3, 4, 4))
        w = leaf((3, 1, 3, 3))
        bias = leaf((3,))
        results.update(_rename(
            "conv2d_depthwise",
            check_gradients(lambda: T.conv2d_depthwise(x, w, bias).sum(),
                            [("x", x), ("w", w), ("b", bias)]),
        ))

        unary = {
            "relu": T.relu, "gelu": T.gelu, "tanh": T.tanh, "sigmoid": T.sigmoid,
            "silu": T.silu, "exp": T.exp, "sqrt": lambda t: T.sqrt(T.add(T.mul(t, t), 0.5)),
            "log": lambda t: T.log(T.add(T.mul(t, t), 0.5)),
        }
        for name, op in unary.items():
            u = leaf((5, 3))
            # relu's kink at zero breaks central differences; nudge away from it
            u.data[np.abs(u.data) < 1e-3] = 0.1
            results.update(_rename(name, check_gradients(lambda op=op, u=u: op(u).sum(), [("x", u)])))

        s = leaf((4, 6))
        results.update(_rename(
            "softmax", check_gradients(lambda: T.mul(T.softmax(s, -1), rng_probe(s.shape)).sum(), [("x", s)])
        ))
        results.update(_rename(
            "layernorm", check_gradients(lambda: T.mul(T.layernorm(s, -1), rng_probe(s.shape)).sum(), [("x", s)])
        ))

        e, f = leaf((3, 5)), leaf((3, 5))
        results.update(_rename(
            "arith",
            check_gradients(
                lambda: (e * f + e - f / T.add(T.mul(f, f), 1.0)).mean(), [("a", e), ("b", f)]
            ),
        ))
        g0 = leaf((2, 3, 4))
        results.update(_rename(
            "shape_ops",
            check_gradients(
                lambda: T.mul(
                    T.concat([g0.transpose(1, 0, 2).reshape(3, 8), g0.reshape(3, 8)], axis=1)[:, 1:9],
                    rng_probe((3, 8)),
                ).sum(),
                [("x", g0)],
            ),
        ))

        # full tiny denoiser: every parameter of a 1-block model
        cfg = backbone.ModelConfig(
            layers=1, hidden=8, heads=2, patch=2, channels=1, image_size=4,
            num_classes=3, variant="linear_relu_dwc", dwc_kernel=3, freq_dim=8,
        )
        store = backbone.init_params(cfg, seed=seed)
        for _, p in store.items():  # randomize zero-initialized layers so every grad is live
            p.data = rng.uniform(-0.5, 0.5, p.shape).astype(p.dtype) * 0.2
        xin = rng.uniform(-1.0, 1.0, (2, 1, 4, 4))
        tin = np.array([1, 3])
        yin = np.array([0, 2])
        probe_eps = rng.standard_normal((2, 1, 4, 4))
        probe_v = rng.standard_normal((2, 1, 4, 4))

        def model_loss():
            eps_hat, v_hat = backbone.model_forward(store, cfg, xin, tin, yin)
            return T.add(T.mul(eps_hat, probe_eps).sum(), T.mul(v_hat, probe_v).sum())

        model_errs = check_gradients(model_loss, store.items())
        results.update(_rename("model", model_errs))
    return results


def rng_probe(shape, seed=1234):
    """Fixed random weighting so reductions probe every output element."""
    return np.random.default_rng(seed).standard_normal(shape)


def _rename(prefix, errors):
    return {f"{prefix}.{k}": v for k, v in errors.items()}
