"""Finite-difference verification of analytic gradients.

The check projects the op output onto a fixed random direction to get a
scalar, differentiates that scalar both ways, and reports the worst
relative disagreement over all input coordinates.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import EngineError, Tape, Tensor, apply, mul, total, using_dtype

# Ops with a kink where central differences are unreliable.
_KINKED = {"relu": 0.0, "clip-min": None}
_KINK_MARGIN = 1e-3
_RESAMPLE_LIMIT = 100


def _resample_near_kink(arrays: list[np.ndarray], kink: float,
                        rng: np.random.Generator) -> None:
    for arr in arrays:
        for _ in range(_RESAMPLE_LIMIT):
            near = np.abs(arr - kink) < _KINK_MARGIN
            if not near.any():
                break
            arr[near] = rng.uniform(-1.0, 1.0, size=int(near.sum()))
        else:
            raise EngineError("could not sample away from kink within retry limit")


def gradient_check(op_kind: str | Callable, inputs: Sequence[np.ndarray],
                   epsilon: float = 1e-6, seed: int = 0, **kwargs) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op_kind`` is a registry name or any callable taking Tensors. All
    arithmetic runs in 64-bit regardless of the ambient precision mode.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    if isinstance(op_kind, str) and op_kind in _KINKED:
        _resample_near_kink(arrays, _KINKED[op_kind] if _KINKED[op_kind] is not None
                            else kwargs.get("lo", 0.0), rng)
    fn = (lambda *ts: apply(op_kind, *ts, **kwargs)) if isinstance(op_kind, str) \
        else (lambda *ts: op_kind(*ts, **kwargs))

    with using_dtype("f64"):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*tensors)
            proj = Tensor(rng.standard_normal(out.shape))
            loss = total(mul(out, proj))
        grads = tape.gradients(loss)
        analytic = [grads.get(t.tid, np.zeros_like(t.data)) for t in tensors]

        def scalar_at(which: int, flat_idx: int, delta: float) -> float:
            probes = [a.copy() for a in arrays]
            probes[which].flat[flat_idx] += delta
            val = fn(*[Tensor(p) for p in probes])
            return float((val.data * proj.data).sum())

        worst = 0.0
        for i, arr in enumerate(arrays):
            for j in range(arr.size):
                hi = scalar_at(i, j, epsilon)
                lo = scalar_at(i, j, -epsilon)
                fd = (hi - lo) / (2.0 * epsilon)
                err = abs(analytic[i].flat[j] - fd) / max(1e-8, abs(fd))
                worst = max(worst, err)
    return worst
