import numpy as np
import pytest

from dcbf import nn


def central_diff(f, store, names=None, h=1e-5, coords=None, rng=None):
    """Central finite differences of scalar f() w.r.t. store parameters.

    coords: number of randomly sampled coordinates per tensor (None = all).
    Returns {name: {flat_index: derivative}}.
    """
    out = {}
    for name in names if names is not None else store.names():
        arr = store[name]
        flat = arr.reshape(-1)
        if coords is None:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        per = {}
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            store.version += 1
            up = f()
            flat[i] = orig - h
            store.version += 1
            dn = f()
            flat[i] = orig
            store.version += 1
            per[int(i)] = (up - dn) / (2.0 * h)
        out[name] = per
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst relative error between analytic grads and sampled FD grads."""
    worst = 0.0
    for name, per in numeric.items():
        a_flat = analytic[name].reshape(-1)
        for i, fd in per.items():
            a = a_flat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
