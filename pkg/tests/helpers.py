"""Shared test utilities: finite-difference oracles and error metrics."""

import numpy as np

from promptstream import numerics as nm


def rel_err(analytic, numeric, floor=1e-6):
    """Element-wise relative error with a small-denominator floor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def fd_grad(loss, leaf, h=1e-3):
    """Central finite differences of a recorded loss w.r.t. one leaf.

    Replays the tape at float64 for each perturbed element, so the
    estimate is limited by truncation error rather than float32 noise.
    """
    tape = loss.tape
    base = leaf.data.astype(np.float64)
    g = np.zeros(base.shape, dtype=np.float64)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        hi = base.copy()
        hi[ix] += h
        lo = base.copy()
        lo[ix] -= h
        f_hi = tape.replay({leaf.node: hi}, dtype=np.float64)[loss.node]
        f_lo = tape.replay({leaf.node: lo}, dtype=np.float64)[loss.node]
        g[ix] = (float(f_hi) - float(f_lo)) / (2.0 * h)
    return g


def check_grad(loss, leaves, h=1e-3, tol=1e-4):
    """Assert analytic gradients match FD within elementwise relative tol."""
    gs = nm.grad(loss, leaves)
    worst = 0.0
    for leaf, ga in zip(leaves, gs):
        gn = fd_grad(loss, leaf, h=h)
        e = rel_err(ga.data, gn)
        worst = max(worst, float(e.max()))
        assert e.max() <= tol, f"gradient mismatch: max rel err {e.max():.3e} > {tol}"
    return worst
