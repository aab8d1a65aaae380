"""Central finite-difference checks against tape gradients."""

import numpy as np

from . import tensor as T


def relative_error(a, b, floor=1e-10):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def analytic_grads(fn, inputs):
    for x in inputs:
        x.grad = None
    with T.Tape():
        out = fn(*inputs)
    T.backward(out)
    return [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]


def numeric_grad(fn, inputs, which, index, h=1e-5):
    x = inputs[which]
    old = x.data[index]
    x.data[index] = old + h
    fp = fn(*inputs).item()
    x.data[index] = old - h
    fm = fn(*inputs).item()
    x.data[index] = old
    return (fp - fm) / (2 * h)


def check(fn, inputs, h=1e-5, samples=None, rng=None, floor=1e-10):
    """Max relative error over (sampled) entries of every input.

    ``fn`` maps the input tensors to a scalar tensor. Without ``samples``
    every entry is perturbed.
    """
    grads = analytic_grads(fn, inputs)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for w, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        if samples is None or samples >= x.size:
            flat = range(x.size)
        else:
            flat = rng.choice(x.size, size=samples, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), x.shape)
            num = numeric_grad(fn, inputs, w, idx, h)
            worst = max(worst, float(relative_error(grads[w][idx], num, floor)))
    return worst
