"""Shared test oracles: central finite differences and a naive convolution."""

import numpy as np

from vseg.tensor import Tensor, no_grad, tsum


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar callable f w.r.t. array x.

    f takes no arguments and must read the current contents of x; entries are
    perturbed in place and restored.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    """Max deviation normalized by the dominant gradient scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def fd_check_op(op, shapes, seeds, tol=1e-6, kink_margin=None, h=1e-5):
    """Finite-difference check of an op's gradients w.r.t. every input.

    op maps len(shapes) Tensors to one Tensor; the output is scalarized with a
    fixed random projection per seed. Inputs are drawn uniformly in [-1, 1];
    kink_margin pushes entries away from 0 for ops with non-smooth points.
    Returns the worst relative error seen.
    """
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        arrays = [rng.uniform(-1.0, 1.0, s) for s in shapes]
        if kink_margin:
            for a in arrays:
                small = np.abs(a) < kink_margin
                a[small] += 2.0 * kink_margin

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*tensors)
        proj = np.random.default_rng(seed + 90001).uniform(-1.0, 1.0, out.shape)

        def scalar():
            with no_grad():
                return float((op(*[Tensor(a) for a in arrays]).data * proj).sum())

        tsum(out * Tensor(proj)).backward()
        for t, a in zip(tensors, arrays):
            worst = max(worst, rel_err(t.grad, numeric_grad(scalar, a, h=h)))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def naive_conv3d(x, w, b, stride, pad):
    """Direct septuple-loop cross-correlation; the independent conv oracle."""
    bs, ci, s, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    so = (s + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((bs, co, so, ho, wo))
    for bi in range(bs):
        for o in range(co):
            for zi in range(so):
                for yi in range(ho):
                    for xi in range(wo):
                        acc = b[o]
                        for c in range(ci):
                            for i in range(kd):
                                z = zi * sd + i - pd
                                if z < 0 or z >= s:
                                    continue
                                for j in range(kh):
                                    y = yi * sh + j - ph
                                    if y < 0 or y >= h:
                                        continue
                                    for k in range(kw):
                                        u = xi * sw + k - pw
                                        if u < 0 or u >= wd:
                                            continue
                                        acc += x[bi, c, z, y, u] * w[o, c, i, j, k]
                        out[bi, o, zi, yi, xi] = acc
    return out
