"""Central finite-difference checks of every hand-written backward pass (float64).

Each registered check builds a small random problem, a scalar loss
``sum(R * output)`` (or the model loss) and compares the analytic gradient of
every input tensor with central differences.

The relative error of a tensor is ``max|a - n| / max(max|a|, max|n|, floor)``
with ``floor = max(1e-6, 1e-3 * largest gradient entry of the check)``. The
floor keeps tensors whose true gradient is zero (a bias feeding a train-mode
batch norm, say) from dividing round-off by round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff_ops, model, nonlocal_module
from .nonlocal_module import METRICS, CorrelationState, NonLocalWeights

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    group: str
    errors: dict  # tensor name -> relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shape {a.shape} != numeric shape {n.shape}")
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_gradients(f, tensors: dict, names=None, step: float = STEP) -> dict:
    """Central differences of scalar ``f()`` w.r.t. arrays in ``tensors`` (perturbed in place)."""
    out = {}
    for name in names or list(tensors):
        arr = tensors[name]
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = grad
    return out


def _compare(name, group, analytic: dict, numeric: dict) -> CheckResult:
    top = max(float(np.abs(v).max(initial=0.0)) for v in numeric.values())
    floor = max(FLOOR, REL_FLOOR * top)
    return CheckResult(
        name, group, {k: relative_error(analytic[k], numeric[k], floor) for k in numeric}
    )


# ----------------------------------------------------------------------------
# primitives


def _check_conv(k: int):
    def run(rng):
        x = rng.normal(size=(2, 3, 5, 4))
        layer = diff_ops.ConvLayer(rng.normal(size=(4, 3, k, k)), rng.normal(size=4))
        r = rng.normal(size=(2, 4, 5, 4))
        t = {"x": x, "kernel": layer.kernel, "bias": layer.bias}

        def f():
            return float(np.sum(r * diff_ops.conv2d_forward(x, layer)[0]))

        _, tape = diff_ops.conv2d_forward(x, layer)
        gx, gk, gb = diff_ops.conv2d_backward(tape, r)
        return {"x": gx, "kernel": gk, "bias": gb}, numeric_gradients(f, t)

    return run


def _check_relu(rng):
    x = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    r = rng.normal(size=x.shape)

    def f():
        return float(np.sum(r * diff_ops.relu_forward(x)[0]))

    _, tape = diff_ops.relu_forward(x)
    return {"x": diff_ops.relu_backward(tape, r)}, numeric_gradients(f, {"x": x})


def _check_batchnorm(mode: str):
    def run(rng):
        x = rng.normal(size=(3, 4, 3, 3)) * 2 + 0.5
        layer = diff_ops.BatchNormLayer(
            rng.normal(size=4), rng.normal(size=4), rng.normal(size=4), rng.uniform(0.5, 2, size=4)
        )
        r = rng.normal(size=x.shape)
        t = {"x": x, "gamma": layer.gamma, "beta": layer.beta}

        def f():
            probe = diff_ops.BatchNormLayer(
                layer.gamma, layer.beta, layer.running_mean.copy(), layer.running_var.copy()
            )
            return float(np.sum(r * diff_ops.batchnorm_forward(x, probe, mode)[0]))

        probe = diff_ops.BatchNormLayer(
            layer.gamma, layer.beta, layer.running_mean.copy(), layer.running_var.copy()
        )
        _, tape = diff_ops.batchnorm_forward(x, probe, mode)
        gx, gg, gb = diff_ops.batchnorm_backward(tape, r)
        return {"x": gx, "gamma": gg, "beta": gb}, numeric_gradients(f, t)

    return run


def _check_softmax(rng):
    x = rng.normal(size=(4, 7)) * 2
    r = rng.normal(size=x.shape)

    def f():
        return float(np.sum(r * diff_ops.softmax_rows_forward(x)[0]))

    _, tape = diff_ops.softmax_rows_forward(x)
    return {"x": diff_ops.softmax_rows_backward(tape, r)}, numeric_gradients(f, {"x": x})


# ----------------------------------------------------------------------------
# non-local module


def _check_nonlocal(metric: str):
    def run(rng):
        n, m, l, h, w, q = 2, 4, 2, 5, 5, 3
        x = rng.normal(size=(n, m, h, w)) * 0.5
        weights = NonLocalWeights(
            rng.normal(size=(m, l)) * 0.5,
            rng.normal(size=(m, l)) * 0.5,
            rng.normal(size=(m, m)) * 0.5,
            metric=metric,
            h=1.3,
        )
        prior = rng.normal(size=(n, q * q, h, w))
        r_out = rng.normal(size=x.shape)
        r_state = rng.normal(size=prior.shape)
        t = {"x": x, "w_theta": weights.w_theta, "w_psi": weights.w_psi, "w_g": weights.w_g, "prior": prior}

        def f():
            out, state, _ = nonlocal_module.nonlocal_forward(x, weights, q, CorrelationState(prior, q))
            return float(np.sum(r_out * out) + np.sum(r_state * state.logits))

        _, _, tape = nonlocal_module.nonlocal_forward(x, weights, q, CorrelationState(prior.copy(), q))
        gx, gt, gp, gg, gprior = nonlocal_module.nonlocal_backward(tape, r_out, r_state)
        analytic = {"x": gx, "w_theta": gt, "w_psi": gp, "w_g": gg, "prior": gprior}
        return analytic, numeric_gradients(f, t)

    return run


# ----------------------------------------------------------------------------
# end-to-end network


def _check_nlrn(rng):
    cfg = model.NlrnConfig(channels=4, embed=2, neighborhood=3, unroll=2)
    params = model.init_params(cfg, rng, dtype=np.float64)
    for name, arr in params.tensors.items():
        # move off the zero / unit initial values so no gradient path is trivially dead
        arr += rng.normal(size=arr.shape) * (0.3 if arr.ndim > 1 else 0.2)
    image = rng.uniform(size=(2, 6, 6))
    target = rng.uniform(size=(2, 6, 6))

    def f():
        _, rec = model.forward(image, params.copy(), mode="train")
        return model.loss(rec, target)

    _, rec = model.forward(image, params.copy(), mode="train")
    analytic = model.backward(rec, target)
    return analytic, numeric_gradients(f, params.tensors)


REGISTRY = {
    "conv2d_1x1": ("diff_ops", _check_conv(1)),
    "conv2d_3x3": ("diff_ops", _check_conv(3)),
    "relu": ("diff_ops", _check_relu),
    "batchnorm_train": ("diff_ops", _check_batchnorm("train")),
    "batchnorm_infer": ("diff_ops", _check_batchnorm("infer")),
    "softmax_rows": ("diff_ops", _check_softmax),
    **{f"nonlocal_{m}": ("nonlocal", _check_nonlocal(m)) for m in METRICS},
    "nlrn": ("nlrn", _check_nlrn),
}
GROUPS = ("diff_ops", "nonlocal", "nlrn")


def run_checks(module: str = "all", seed: int = 0, registry=None) -> list:
    """Run every registered check in ``module`` (``all`` or one of :data:`GROUPS`)."""
    registry = REGISTRY if registry is None else registry
    if module != "all" and module not in GROUPS:
        raise ValueError(f"module must be 'all' or one of {GROUPS}, got {module!r}")
    results = []
    for i, (name, (group, fn)) in enumerate(registry.items()):
        if module not in ("all", group):
            continue
        analytic, numeric = fn(np.random.default_rng([seed, i]))
        results.append(_compare(name, group, analytic, numeric))
    return results
