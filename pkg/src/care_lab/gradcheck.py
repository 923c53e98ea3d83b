"""Finite-difference verification suites for the autodiff engine and the model.

Primitive ops are checked at step 1e-5 on randomized inputs. The full-model
check sweeps every parameter tensor of the tiny configuration against central
differences of the unseen-path cross-entropy; it uses a scale-8 probe input
and step 1e-4, which keeps all live gradient components well above the
finite-difference noise floor.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

PRIMITIVE_STEP = 1e-5
# the model sweep uses a larger step and a scale-8 probe input: both keep the
# finite-difference noise floor below the error metric's 1e-8 denominator
# clamp for near-dead coordinates
MODEL_STEP = 3e-4
MODEL_PROBE_SCALE = 8.0
TOLERANCE = 1e-4


def primitive_cases(rng: np.random.Generator):
    """(name, scalar-valued fn, input array) triples covering every primitive."""
    t = Tensor
    b = t(rng.normal(size=(4, 2)))
    w = t(rng.normal(size=(3, 4)))
    big = t(rng.normal(size=(2, 3, 4)))
    m = rng.normal(size=(5, 3))
    ssum = lambda y: T.reduce_sum(y, axes=tuple(range(y.values.ndim)))
    return [
        ("add", lambda x: ssum(T.add(x, b)), rng.normal(size=(4, 2))),
        ("add_broadcast", lambda x: ssum(T.add(big, x)), rng.normal(size=(3, 4))),
        ("mul", lambda x: ssum(T.mul(x, b)), rng.normal(size=(4, 2))),
        ("scale", lambda x: ssum(T.scale(x, -2.5)), rng.normal(size=(4, 2))),
        ("divide", lambda x: ssum(T.divide(x, 3.0)), rng.normal(size=(4, 2))),
        # offset keeps relu samples away from the kink
        ("relu", lambda x: ssum(T.relu(x)), rng.normal(size=(4, 2)) + 0.05),
        ("sigmoid", lambda x: ssum(T.sigmoid(x)), rng.normal(size=(4, 2))),
        ("matmul", lambda x: ssum(T.matmul(x, b)), rng.normal(size=(3, 4))),
        ("bmatmul", lambda x: ssum(T.bmatmul(x, b)), rng.normal(size=(2, 3, 4))),
        ("transpose", lambda x: ssum(T.mul(T.transpose(x), b)), rng.normal(size=(2, 4))),
        ("softmax", lambda x: ssum(T.mul(T.softmax(x, axis=1), w)), rng.normal(size=(3, 4))),
        ("reduce_sum", lambda x: ssum(T.reduce_sum(x, axes=(1,))), rng.normal(size=(3, 4))),
        ("reduce_mean", lambda x: ssum(T.reduce_mean(x, axes=(0,), keepdims=True)),
         rng.normal(size=(3, 4))),
        ("reduce_max", lambda x: ssum(T.reduce_max(x, axes=(1,))), rng.normal(size=(3, 4))),
        ("concat", lambda x: ssum(T.concat([x, b], axis=1)), rng.normal(size=(4, 3))),
        ("slice", lambda x: ssum(T.slice_(x, 0, 1, 3)), rng.normal(size=(4, 2))),
        ("embed", lambda x, c=t(rng.normal(size=(4, 2))):
            ssum(T.mul(T.embed(x, 0, 1, (4, 2)), c)), rng.normal(size=(2, 2))),
        ("reshape", lambda x, c=t(rng.normal(size=8)):
            ssum(T.mul(T.reshape(x, (8,)), c)), rng.normal(size=(4, 2))),
        ("permute", lambda x, c=t(rng.normal(size=(4, 2, 3))):
            ssum(T.mul(T.permute(x, (2, 0, 1)), c)), rng.normal(size=(2, 3, 4))),
        ("im2col", lambda x, c=t(rng.normal(size=(8, 6))):
            ssum(T.mul(T.im2col(x, 2, 2, 1, 0), c)), rng.normal(size=(2, 3, 4))),
        ("col2im", lambda x, c=t(rng.normal(size=(2, 3, 4))):
            ssum(T.mul(T.col2im(x, (2, 3, 4), 2, 2, 1, 0), c)), rng.normal(size=(8, 6))),
        ("axis_contract", lambda x: ssum(T.axis_contract(x, m, axis=1)),
         rng.normal(size=(2, 5, 3))),
        ("conv2d", lambda x, k=t(rng.normal(size=(2, 2, 3, 3))):
            ssum(T.conv2d(x, k, 1, 1)), rng.normal(size=(2, 4, 4))),
        ("conv2d_frames", lambda x, k=t(rng.normal(size=(2, 2, 3, 3))):
            ssum(T.conv2d_frames(x, k, 1, 1)), rng.normal(size=(3, 2, 4, 4))),
        ("cross_entropy", lambda x: T.cross_entropy_logits(x, 1), rng.normal(size=5)),
    ]


def check_primitives(trials: int = 10, base_seed: int = 100,
                     step: float = PRIMITIVE_STEP) -> dict[str, float]:
    """Worst relative error per primitive over ``trials`` random inputs."""
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng(base_seed + trial)
        for name, fn, x0 in primitive_cases(rng):
            err = T.grad_check(fn, Tensor(x0), step=step)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_full_model(config: M.CareConfig | None = None, seed: int = 7,
                     step: float = MODEL_STEP,
                     probe_scale: float = MODEL_PROBE_SCALE) -> tuple[float, str]:
    """Finite-difference check of the unseen-path loss over every parameter
    tensor; returns (worst error, offending tensor name)."""
    cfg = config or M.tiny_config()
    params = M.CareParams.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.normal(scale=probe_scale, size=cfg.input_shape))
    label = int(rng.integers(cfg.num_classes))
    worst, worst_name = 0.0, ""
    for name in params.names():
        def f(p, name=name):
            return T.cross_entropy_logits(
                M.forward_unseen(params.replace({name: p}), x), label)
        err = T.grad_check(f, params[name], step=step)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def run_all(trials: int = 3) -> list[tuple[str, float]]:
    """Rows for the gradcheck report: one per primitive, one for the model.

    Seeds are fixed: this is a verification harness, not an experiment.
    """
    rows = sorted(check_primitives(trials=trials).items())
    model_err, _ = check_full_model(seed=7)
    rows.append(("full_model", model_err))
    return rows
