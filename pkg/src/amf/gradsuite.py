"""Finite-difference verification suite covering every autodiff primitive and
the full gated-model loss. Used by the `grad-check` CLI command and the
acceptance tests.

Two precision modes:

- "f64": tensors are float64 end to end; analytic gradients must match
  central differences to 1e-6.
- "f32": analytic gradients are computed by the float32 forward/backward,
  then compared at tolerance 1e-4 against central differences of the same
  function with the (float32-rounded) values promoted to float64. Promoting
  the finite-difference side removes float32 evaluation noise, which would
  otherwise swamp small-gradient coordinates, while still validating the
  32-bit implementation's gradients.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, new_rng
from .errors import UsageError
from .models import AMFModel

MODES = {"f64": (np.float64, 1e-6, 1e-5), "f32": (np.float32, 1e-4, 1e-4)}


def _t(rng, shape, dtype, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def _op_cases(dtype):
    """One case builder per primitive; each returns (params, build_loss)."""

    def matmul(rng):
        a, b = _t(rng, (2, 3), dtype), _t(rng, (3, 2), dtype)
        return [a, b], lambda: ad.sum_all(ad.matmul(a, b))

    def add_bias(rng):
        x, b = _t(rng, (2, 3), dtype), _t(rng, (3,), dtype)
        return [x, b], lambda: ad.sum_all(ad.relu(ad.add_bias(x, b)))

    def conv2d(rng):
        x = _t(rng, (1, 2, 4, 4), dtype)
        w = _t(rng, (2, 2, 3, 3), dtype, scale=0.5)
        b = _t(rng, (2,), dtype)
        return [x, w, b], lambda: ad.sum_all(ad.conv2d(x, w, b))

    def relu(rng):
        x = _t(rng, (2, 5), dtype)
        # keep samples away from the kink so central differences are valid
        x.data[np.abs(x.data) < 0.05] += 0.1
        return [x], lambda: ad.sum_all(ad.relu(x))

    def maxpool2(rng):
        x = _t(rng, (1, 1, 4, 4), dtype)
        return [x], lambda: ad.sum_all(ad.maxpool2(x))

    def concat(rng):
        a, b = _t(rng, (2, 2), dtype), _t(rng, (2, 3), dtype)
        return [a, b], lambda: ad.sum_all(ad.concat([a, b]))

    def scale_rows(rng):
        m, h = _t(rng, (3, 4), dtype), _t(rng, (3, 1), dtype)
        return [m, h], lambda: ad.sum_all(ad.scale_rows(m, h))

    def softmax(rng):
        x = _t(rng, (2, 4), dtype)
        w = _t(rng, (4, 1), dtype)
        return [x, w], lambda: ad.sum_all(ad.matmul(ad.softmax(x), w))

    def cross_entropy(rng):
        x = _t(rng, (3, 4), dtype)
        labels = rng.integers(0, 4, size=3)
        return [x], lambda: ad.cross_entropy(x, labels)

    return {
        "matmul": matmul,
        "add_bias": add_bias,
        "conv2d": conv2d,
        "relu": relu,
        "maxpool2": maxpool2,
        "concat": concat,
        "scale_rows": scale_rows,
        "softmax": softmax,
        "cross_entropy": cross_entropy,
    }


OP_NAMES = tuple(_op_cases(np.float64))


def _fd_vs_analytic(params, build_loss, eps, max_coords=None, pick_seed=0) -> float:
    """Max relative error between stored analytic grads and central differences.

    Call only after analytic grads are populated; the finite differences run
    in whatever dtype the parameter data currently holds.
    """
    analytic = [np.array(p.grad if p.grad is not None else np.zeros(p.shape)) for p in params]
    pick = new_rng(pick_seed)
    max_rel = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = pick.permutation(flat.size)[:max_coords]
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss().data)
            flat[i] = orig - eps
            f_minus = float(build_loss().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            an = a.reshape(-1)[i]
            max_rel = max(max_rel, abs(an - num) / max(abs(an), abs(num), 1e-8))
    return max_rel


def _run_case(params, build_loss, mode, max_coords=None, pick_seed=0, eps=None,
              promote=None) -> float:
    if mode not in MODES:
        raise UsageError(f"unknown precision mode {mode!r}")
    _, _, default_eps = MODES[mode]
    eps = eps or default_eps
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    if mode == "f32":
        # promote everything feeding the finite differences to float64
        for p in (promote or params):
            p.data = p.data.astype(np.float64)
    return _fd_vs_analytic(params, build_loss, eps, max_coords, pick_seed)


def check_primitive(op: str, seed: int, mode: str = "f64") -> float:
    dtype = MODES[mode][0]
    params, build = _op_cases(dtype)[op](new_rng(seed))
    return _run_case(params, build, mode)


def check_amf_loss(seed: int, mode: str = "f64", param_filter: str = "",
                   max_coords: int | None = None) -> float:
    """Finite differences on the full gated-model cross-entropy loss.

    ``param_filter`` restricts which parameters are perturbed (name prefix);
    ``max_coords`` caps the checked coordinates per parameter for speed.
    """
    dtype = MODES[mode][0]
    rng = new_rng(seed)
    model = AMFModel(n=2, d=4, num_classes=3, in_channels=1, image_hw=8, seed=seed)
    for t in model.params.values():
        t.data = t.data.astype(dtype)
    x = Tensor(rng.normal(0.5, 0.3, size=(2, 1, 8, 8)).astype(dtype))
    labels = rng.integers(0, 3, size=2)
    params = [t for k, t in model.params.items() if k.startswith(param_filter)]

    def build():
        return ad.cross_entropy(model.forward(x).logits, labels)

    return _run_case(params, build, mode, max_coords=max_coords, pick_seed=seed + 1,
                     eps=1e-4, promote=list(model.params.values()) + [x])


def run_suite(num_seeds: int = 100, mode: str = "f64",
              amf_seeds: int = 5, amf_coords: int = 20) -> list[dict]:
    """Run every primitive over ``num_seeds`` random instances plus the full
    model loss; returns one report dict per op."""
    tol = MODES[mode][1]
    reports = []
    for op in OP_NAMES:
        worst = max(check_primitive(op, seed, mode) for seed in range(num_seeds))
        reports.append({"op": op, "max_rel_err": worst, "tol": tol, "passed": worst < tol})
    worst = max(check_amf_loss(seed, mode, max_coords=amf_coords) for seed in range(amf_seeds))
    reports.append({"op": "amf_loss", "max_rel_err": worst, "tol": tol, "passed": worst < tol})
    return reports
