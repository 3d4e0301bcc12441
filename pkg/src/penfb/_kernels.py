"""Compiled inner loop for the common operator/penalty pairs.

The numpy implementation in :mod:`penfb.solver` is the reference; this
kernel performs the same arithmetic replicate by replicate without
allocating, which matters for runs of millions of iterations. Pairs it does
not cover (affine operators, sparse or minibatch gradients) fall back to
numpy.
"""

import numpy as np
from numba import njit

OP_ZERO, OP_L1, OP_BOX, OP_L1_BOX = 0, 1, 2, 3
PEN_CHAINED, PEN_BOX, PEN_DENSE_LS = 0, 1, 2


def operator_code(op):
    """``(code, weights, shift, lower, upper)`` or ``None`` when unsupported."""
    d = op.dim
    zeros = np.zeros(d)
    inf = np.full(d, np.inf)
    if op.kind == "zero":
        return OP_ZERO, zeros, zeros, -inf, inf
    if op.kind in ("l1", "weighted_l1", "translated_l1"):
        return OP_L1, op.weights, op.shift, -inf, inf
    if op.kind == "box_cone":
        return OP_BOX, zeros, zeros, op.lower, op.upper
    if op.kind == "sum":
        l1, box = op._parts()
        w = l1[0].weights if l1 else zeros
        sh = l1[0].shift if l1 else zeros
        lo = box[0].lower if box else -inf
        hi = box[0].upper if box else inf
        return OP_L1_BOX, w, sh, lo, hi
    return None


def penalty_code(psi):
    """``(code, n_pinned, matrix, rhs, lower, upper)`` or ``None``."""
    d = psi.dim
    empty = np.zeros((0, d))
    if psi.kind == "chained":
        return PEN_CHAINED, psi.n_pinned, empty, np.zeros(0), np.zeros(d), np.zeros(d)
    if psi.kind == "box_distance":
        return PEN_BOX, 0, empty, np.zeros(0), psi.lower, psi.upper
    if psi.kind == "least_squares" and isinstance(psi.matrix, np.ndarray):
        return (PEN_DENSE_LS, 0, np.ascontiguousarray(psi.matrix), np.asarray(psi.rhs, dtype=float),
                np.zeros(d), np.zeros(d))
    return None


@njit(cache=True)
def _grad(pen, j, amat, rhs, plo, phi, x, g, res):
    d = x.size
    if pen == PEN_CHAINED:
        for i in range(d):
            g[i] = 0.0
        g[0] = x[0] - 1.0
        for i in range(j - 1):
            diff = x[i] - x[i + 1]
            g[i] += diff
            g[i + 1] -= diff
    elif pen == PEN_BOX:
        for i in range(d):
            v = x[i]
            if v < plo[i]:
                g[i] = v - plo[i]
            elif v > phi[i]:
                g[i] = v - phi[i]
            else:
                g[i] = 0.0
    else:
        m = amat.shape[0]
        for r in range(m):
            acc = 0.0
            for i in range(d):
                acc += amat[r, i] * x[i]
            res[r] = acc - rhs[r]
        for i in range(d):
            g[i] = 0.0
        for r in range(m):
            rr = res[r]
            for i in range(d):
                g[i] += amat[r, i] * rr


@njit(cache=True)
def _resolvent(opc, lam, w, sh, lo, hi, u):
    d = u.size
    if opc == OP_L1 or opc == OP_L1_BOX:
        for i in range(d):
            v = u[i] - sh[i]
            thr = lam * w[i]
            if v > thr:
                u[i] = sh[i] + (v - thr)
            elif v < -thr:
                u[i] = sh[i] + (v + thr)
            else:
                u[i] = sh[i]
    if opc == OP_BOX or opc == OP_L1_BOX:
        for i in range(d):
            if u[i] < lo[i]:
                u[i] = lo[i]
            elif u[i] > hi[i]:
                u[i] = hi[i]


@njit(cache=True)
def advance_segment(x, x_bar, z, sum_w, c_acc, delta_acc, alive, lam, beta, s, xi, noise_on,
                    sde_scaling, beta_noise, uniform, opc, w, sh, lo, hi, pen, j, amat, rhs, plo,
                    phi, bound):
    """Advance every live replicate through ``lam.size`` iterations in place.

    ``xi`` has shape ``(R, steps, d)`` (standard normals) when ``noise_on``.
    Replicates whose iterate leaves the ball of radius ``bound`` (or turns
    non-finite) are frozen and flagged in ``alive``.
    """
    r_count, d = x.shape
    g = np.empty(d)
    u = np.empty(d)
    res = np.empty(max(amat.shape[0], 1))
    for r in range(r_count):
        if not alive[r]:
            continue
        xr = x[r]
        for k in range(lam.size):
            lk, bk = lam[k], beta[k]
            _grad(pen, j, amat, rhs, plo, phi, xr, g, res)
            sq = np.sqrt(lk) * s[k]
            for i in range(d):
                push = 0.0
                if noise_on:
                    push = sq * xi[r, k, i]
                    if beta_noise:
                        push *= bk
                if sde_scaling:
                    u[i] = xr[i] - lk * bk * g[i] - push
                else:
                    u[i] = xr[i] - lk * (bk * g[i] + push)
            _resolvent(opc, lk, w, sh, lo, hi, u)
            nrm = 0.0
            for i in range(d):
                nrm += u[i] * u[i]
            nrm = np.sqrt(nrm)
            if not nrm <= bound:
                alive[r] = False
                break
            if noise_on:
                sig2 = s[k] * s[k] * d
                dd = 0.0
                for i in range(d):
                    diff = z[r, i] - xr[i]
                    dd += diff * diff
                c_acc[r] += 0.5 * sig2 * lk
                delta_acc[r] += sig2 * dd * lk
                for i in range(d):
                    z[r, i] -= sq * xi[r, k, i]
            wk = 1.0 if uniform else lk
            sum_w[r] += wk
            f = wk / sum_w[r]
            for i in range(d):
                x_bar[r, i] += f * (xr[i] - x_bar[r, i])
                xr[i] = u[i]
