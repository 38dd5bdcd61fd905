import numpy as np
import pytest

from footfield import autodiff as ad
from footfield import synth


def finite_difference(f, x0: np.ndarray, h: float = 1e-4,
                      indices=None) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    xf = x0.reshape(-1)
    idx = range(xf.size) if indices is None else indices
    for i in idx:
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(build, params: list, h: float = 1e-4, indices=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``build()`` must construct the scalar loss Tensor from the current
    parameter data. ``params`` are the leaf tensors to check.
    """
    with ad.Tape() as tape:
        loss = build()
        grads = tape.backward(loss)
    worst = 0.0
    for p in params:
        def f(x, p=p):
            old = p.data
            p.data = x
            val = build().item()
            p.data = old
            return val
        num = finite_difference(f, p.data, h=h, indices=indices)
        got = grads[p.tid]
        if indices is not None:
            flat_n = num.reshape(-1)
            flat_g = got.reshape(-1)
            worst = max(worst, rel_err(flat_g[list(indices)], flat_n[list(indices)],
                                       floor=1e-8))
        else:
            worst = max(worst, rel_err(got, num, floor=1e-8))
    return worst


@pytest.fixture(scope="session")
def tiny_dataset():
    """3 train identities x 2 poses + 1 val identity, low-poly."""
    return synth.generate_synthetic_dataset(
        n_identities=3, poses_per_identity=2, seed=11, n_val_identities=1,
        quality=0.6)


@pytest.fixture(scope="session")
def template_foot():
    mesh, kp = synth.build_foot(synth.mean_shape(), synth.FootPose(), quality=0.8)
    return mesh, kp
