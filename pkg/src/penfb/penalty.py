"""Exterior penalties, their constraint sets, and the Attouch-Czarnecki check.

Three penalty kinds are supported, each paired with the constraint set it
vanishes on:

=================  ==========================================  ============
kind               penalty                                     constraint
=================  ==========================================  ============
``least_squares``  ``0.5 * ||A x - y||^2``                     ``{A x = y}``
``chained``        ``0.5 (x_1-1)^2 + 0.5 sum (x_{j-1}-x_j)^2``  ``x_i = 1, i <= J``
``box_distance``   ``0.5 * dist(x, box)^2``                    box
=================  ==========================================  ============

All evaluations broadcast over leading axes, so ``x`` may be a single vector
or a stack of replicate iterates of shape ``(R, d)``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse.linalg as spla

from .errors import InputError, ParameterError, UnsupportedError
from .sparse import SparseMatrix

_RANGE_TOL = 1e-8


def _as_vector(x, dim, name="x"):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise InputError(f"{name} has trailing dimension {x.shape[-1:]}, expected {dim}")
    return x


class _LinearMap:
    """Dense or sparse matrix with batched products and a min-norm solver."""

    def __init__(self, a):
        if isinstance(a, SparseMatrix):
            self.sparse = a
            self.dense = None
        else:
            self.dense = np.atleast_2d(np.asarray(a, dtype=float))
            self.sparse = None
        self.shape = (a.shape[0], a.shape[1])

    def mv(self, x):
        if self.sparse is not None:
            return self.sparse.matvec(x)
        return x @ self.dense.T

    def rmv(self, u):
        if self.sparse is not None:
            return self.sparse.rmatvec(u)
        return u @ self.dense

    def to_dense(self):
        return self.dense if self.dense is not None else self.sparse.to_dense()

    @cached_property
    def pinv(self):
        # (cols, rows); dense pseudo-inverse is fine at the sizes used here
        return np.linalg.pinv(self.to_dense(), rcond=1e-12)

    def min_norm(self, b):
        """Minimum-norm least-squares solution of ``A z = b``."""
        if self.sparse is not None and min(self.shape) > 4000:
            return spla.lsqr(self.sparse.to_scipy(), b, atol=1e-14, btol=1e-14)[0]
        return b @ self.pinv.T

    def min_norm_adjoint(self, p):
        """Minimum-norm least-squares solution of ``A^T mu = p``."""
        if self.sparse is not None and min(self.shape) > 4000:
            at = self.sparse.to_scipy().T
            return spla.lsqr(at, p, atol=1e-14, btol=1e-14)[0]
        return p @ self.pinv

    def spectral_sq(self, tol=1e-8, max_iter=20000):
        """Largest eigenvalue of ``A^T A`` by power iteration."""
        d = self.shape[1]
        v = np.ones(d) + np.linspace(0.0, 1.0, d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = self.rmv(self.mv(v))
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0
            new = float(v @ w)
            v = w / nw
            if abs(new - lam) <= tol * max(new, 1e-300):
                lam = new
                break
            lam = new
        # Rayleigh quotients approach from below; pad to keep an upper bound.
        return lam * (1.0 + 1e-6)

    def frobenius(self):
        if self.sparse is not None:
            return self.sparse.frobenius()
        return float(np.linalg.norm(self.dense))


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """A closed convex set ``C`` described analytically.

    kinds: ``whole`` (all of R^d), ``affine`` ({x : A x = y}),
    ``pin`` ({x : x_i = value, i < n_pinned}) and ``box``.
    """

    kind: str
    dim: int
    matrix: object = None
    rhs: object = None
    n_pinned: int = 0
    pin_value: float = 1.0
    lower: object = None
    upper: object = None

    def __post_init__(self):
        if self.kind not in ("whole", "affine", "pin", "box"):
            raise ParameterError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "affine":
            object.__setattr__(self, "rhs", np.asarray(self.rhs, dtype=float))
        if self.kind == "box":
            lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
            hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()
            if np.any(lo > hi):
                raise ParameterError("box lower bound exceeds upper bound")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        if self.kind == "pin" and not 1 <= self.n_pinned <= self.dim:
            raise ParameterError("n_pinned out of range")

    @cached_property
    def _map(self):
        return _LinearMap(self.matrix)

    @property
    def has_projection(self):
        return True

    def project(self, x):
        x = _as_vector(x, self.dim)
        if self.kind == "whole":
            return x.copy()
        if self.kind == "box":
            return np.clip(x, self.lower, self.upper)
        if self.kind == "pin":
            out = x.copy()
            out[..., : self.n_pinned] = self.pin_value
            return out
        residual = self._map.mv(x) - self.rhs
        return x - self._map.min_norm(residual)

    def dist(self, x):
        x = _as_vector(x, self.dim)
        return np.linalg.norm(x - self.project(x), axis=-1)

    def contains(self, x, tol=1e-9):
        x = _as_vector(x, self.dim)
        return bool(np.all(self.dist(x) <= tol * max(1.0, float(np.max(np.abs(x))))))

    def tangent(self, g):
        """Project directions onto the subspace parallel to ``C`` (affine kinds)."""
        g = np.asarray(g, dtype=float)
        if self.kind == "pin":
            out = g.copy()
            out[..., : self.n_pinned] = 0.0
            return out
        if self.kind == "affine":
            return g - self._map.min_norm(self._map.mv(g))
        return g.copy()

    def support(self, p):
        """Support function ``sigma_C(p)``; ``inf`` off its domain."""
        p = _as_vector(p, self.dim, "p")
        scale = 1.0 + float(np.linalg.norm(p))
        if self.kind == "whole":
            return 0.0 if np.linalg.norm(p) <= _RANGE_TOL * scale else np.inf
        if self.kind == "box":
            with np.errstate(invalid="ignore"):
                terms = np.where(p > 0, p * self.upper, np.where(p < 0, p * self.lower, 0.0))
            return float(np.sum(terms))
        if self.kind == "pin":
            if np.max(np.abs(p[self.n_pinned:]), initial=0.0) > _RANGE_TOL * scale:
                return np.inf
            return float(self.pin_value * np.sum(p[: self.n_pinned]))
        mu = self._map.min_norm_adjoint(p)
        if np.linalg.norm(self._map.rmv(mu) - p) >= _RANGE_TOL * scale:
            return np.inf
        return float(mu @ self.rhs)

    def sample_near(self, y, scale, rng, count):
        """``count`` points of ``C`` scattered around ``y`` (which must lie in C)."""
        g = rng.standard_normal((count, self.dim)) * scale
        if self.kind == "box":
            return np.clip(y + g, self.lower, self.upper)
        return y + self.tangent(g)

    def sample_normal_range(self, rng, count, scale=1.0):
        """Random elements of ``range(N_C)``, the union of all normal cones."""
        g = rng.standard_normal((count, self.dim)) * scale
        if self.kind == "whole":
            return np.zeros_like(g)
        if self.kind == "box":
            return g
        return g - self.tangent(g)

    def normal_cone_element(self, y, rng):
        """A random element of ``N_C(y)`` for box sets (zero for other kinds)."""
        out = np.zeros(self.dim)
        if self.kind != "box":
            return out
        at_lo = np.isclose(y, self.lower, rtol=0.0, atol=1e-12)
        at_hi = np.isclose(y, self.upper, rtol=0.0, atol=1e-12)
        mag = rng.exponential(size=self.dim)
        out[at_lo] -= mag[at_lo]
        out[at_hi & ~at_lo] += mag[at_hi & ~at_lo]
        return out

    def interior_distance(self, a):
        """Distance from ``a`` to the boundary of C (``inf`` without boundary)."""
        if self.kind != "box":
            return np.inf
        return float(np.min(np.minimum(a - self.lower, self.upper - a)))


@dataclass(frozen=True, eq=False)
class PenaltyFn:
    """Smooth convex penalty vanishing exactly on its constraint set."""

    kind: str
    dim: int
    matrix: object = None
    rhs: object = None
    n_pinned: int = 0
    lower: object = None
    upper: object = None

    def __post_init__(self):
        if self.kind not in ("least_squares", "chained", "box_distance"):
            raise ParameterError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "least_squares":
            if self.matrix is None or self.rhs is None:
                raise ParameterError("least_squares needs matrix and rhs")
            rows, cols = self.matrix.shape
            if cols != self.dim:
                raise InputError("matrix column count differs from dim")
            rhs = np.asarray(self.rhs, dtype=float)
            if rhs.shape != (rows,):
                raise InputError("rhs length differs from matrix rows")
            object.__setattr__(self, "rhs", rhs)
        if self.kind == "chained" and not 1 <= self.n_pinned <= self.dim:
            raise ParameterError("J out of range")
        if self.kind == "box_distance":
            lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
            hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    # -- constructors -----------------------------------------------------
    @classmethod
    def least_squares(cls, a, y):
        return cls("least_squares", a.shape[1], matrix=a, rhs=y)

    @classmethod
    def chained(cls, dim, n_pinned):
        return cls("chained", dim, n_pinned=n_pinned)

    @classmethod
    def box_distance(cls, lower, upper, dim=None):
        if dim is None:
            dim = np.size(lower)
        return cls("box_distance", dim, lower=lower, upper=upper)

    # -- linear-map view --------------------------------------------------
    @cached_property
    def _map(self):
        if self.kind == "least_squares":
            return _LinearMap(self.matrix)
        if self.kind == "chained":
            return _LinearMap(self._chain_matrix())
        raise UnsupportedError("box_distance has no linear-map form")

    def _chain_matrix(self):
        j = self.n_pinned
        d = np.zeros((j, self.dim))
        d[0, 0] = 1.0
        for r in range(1, j):
            d[r, r - 1] = 1.0
            d[r, r] = -1.0
        return d

    @property
    def _rhs(self):
        if self.kind == "chained":
            e = np.zeros(self.n_pinned)
            e[0] = 1.0
            return e
        return self.rhs

    @property
    def n_rows(self):
        """Number of summands ``m`` for minibatching (least squares only)."""
        if self.kind != "least_squares":
            raise UnsupportedError("minibatching needs a least_squares penalty")
        return self.matrix.shape[0]

    # -- evaluation -------------------------------------------------------
    def value(self, x):
        x = _as_vector(x, self.dim)
        if self.kind == "box_distance":
            r = x - np.clip(x, self.lower, self.upper)
            return 0.5 * np.sum(r * r, axis=-1)
        if self.kind == "chained":
            j = self.n_pinned
            first = x[..., 0] - 1.0
            diffs = x[..., : j - 1] - x[..., 1:j]
            return 0.5 * first * first + 0.5 * np.sum(diffs * diffs, axis=-1)
        r = self._map.mv(x) - self.rhs
        return 0.5 * np.sum(r * r, axis=-1)

    def grad(self, x):
        x = _as_vector(x, self.dim)
        if self.kind == "box_distance":
            return x - np.clip(x, self.lower, self.upper)
        if self.kind == "chained":
            j = self.n_pinned
            g = np.zeros_like(x)
            g[..., 0] = x[..., 0] - 1.0
            diffs = x[..., : j - 1] - x[..., 1:j]
            g[..., : j - 1] += diffs
            g[..., 1:j] -= diffs
            return g
        return self._map.rmv(self._map.mv(x) - self.rhs)

    def residual(self, x):
        """``A x - y`` for least-squares penalties."""
        return self._map.mv(x) - self.rhs

    # -- constants --------------------------------------------------------
    @cached_property
    def l_spectral(self):
        if self.kind == "box_distance":
            return 1.0
        if self.kind == "chained":
            return 4.0
        return self._map.spectral_sq()

    @cached_property
    def l_frobenius(self):
        if self.kind == "box_distance":
            return 1.0
        return self._map.frobenius()

    def minibatch_lipschitz(self, batch_size):
        """Upper bound on the Lipschitz constant of the unbiased minibatch gradient.

        ``(m / b) * max_B ||A_B^T A_B||`` is bounded by ``m / b`` times the sum
        of the ``b`` largest squared row norms.
        """
        if self.kind != "least_squares":
            raise UnsupportedError("minibatches are defined for least-squares penalties")
        b = int(batch_size)
        if not 1 <= b <= self.n_rows:
            raise ParameterError("batch size must lie in [1, m]")
        a = self.matrix
        if isinstance(a, np.ndarray):
            norms = np.sum(a * a, axis=1)
        else:
            norms = np.asarray(a.to_scipy().multiply(a.to_scipy()).sum(axis=1)).ravel()
        top = np.sort(norms)[::-1][:b]
        return float(self.n_rows / b * top.sum())

    def lipschitz(self, choice="spectral"):
        if choice == "spectral":
            return self.l_spectral
        if choice == "frobenius":
            return self.l_frobenius
        raise ParameterError(f"unknown Lipschitz constant choice {choice!r}")

    # -- constraint & conjugate ------------------------------------------
    @cached_property
    def constraint(self):
        """The zero set ``C = argmin Psi`` as a :class:`ConstraintSpec`."""
        if self.kind == "box_distance":
            return ConstraintSpec("box", self.dim, lower=self.lower, upper=self.upper)
        if self.kind == "chained":
            return ConstraintSpec("pin", self.dim, n_pinned=self.n_pinned, pin_value=1.0)
        return ConstraintSpec("affine", self.dim, matrix=self.matrix, rhs=self.rhs)

    @cached_property
    def min_value(self):
        if self.kind == "box_distance":
            return 0.0
        z = self._map.min_norm(self._rhs)
        r = self._map.mv(z) - self._rhs
        return float(0.5 * r @ r)

    def conjugate(self, p):
        """Fenchel conjugate ``Psi*(p)``; ``inf`` outside its domain."""
        p = _as_vector(p, self.dim, "p")
        if self.kind == "box_distance":
            return 0.5 * float(p @ p) + self.constraint.support(p)
        mu = self._map.min_norm_adjoint(p)
        if np.linalg.norm(self._map.rmv(mu) - p) >= _RANGE_TOL * (1.0 + np.linalg.norm(p)):
            return np.inf
        return float(mu @ self._rhs + 0.5 * mu @ mu - self.min_value)

    def conjugate_gap(self, p):
        """``h_C(p) = Psi*(p) - sigma_C(p)`` as ``(value, finite)``.

        Outside ``dom Psi*`` the value is ``inf`` and ``finite`` is False.
        """
        p = _as_vector(p, self.dim, "p")
        if self.kind == "box_distance":
            return 0.5 * float(p @ p), True
        mu = self._map.min_norm_adjoint(p)
        if np.linalg.norm(self._map.rmv(mu) - p) >= _RANGE_TOL * (1.0 + np.linalg.norm(p)):
            return np.inf, False
        # sigma_C(A^T mu) = <mu, y> cancels the linear term of Psi*
        return float(0.5 * mu @ mu), True


def eval_penalty(psi, x):
    return psi.value(x)


def grad_penalty(psi, x):
    return psi.grad(x)


def conjugate_gap(psi, constraint, p):
    """h_C for ``psi``; ``constraint`` must be the zero set of ``psi``."""
    if constraint is not None and constraint.kind != psi.constraint.kind:
        raise ParameterError("constraint does not match the penalty's zero set")
    return psi.conjugate_gap(p)


# ---------------------------------------------------------------------------
# summability heuristics

def tail_verdict(increments, sat_slope=-1.05, viol_slope=-1.0):
    """Classify a nonnegative series as summable from its last decade.

    Returns ``(verdict, slope)``; ``slope`` is the log-log slope of the
    increments against ``n`` over ``n in [N/10, N]`` (``nan`` when the tail
    is identically zero). A finite horizon cannot decide summability, so this
    is a heuristic: "satisfied" needs decay faster than ``n**sat_slope``,
    "violated" means increments no smaller than ``~1/n``.
    """
    a = np.asarray(increments, dtype=float)
    if np.any(np.isinf(a)):
        return "violated", np.nan
    n = np.arange(1, a.size + 1, dtype=float)
    tail = slice(a.size // 10, a.size)
    at, nt = a[tail], n[tail]
    scale = max(float(np.max(np.abs(a), initial=0.0)), 1e-300)
    pos = at > 1e-300
    if not np.any(a > 1e-14 * scale) or pos.sum() < 2:
        return "satisfied", np.nan
    slope = float(np.polyfit(np.log(nt[pos]), np.log(at[pos]), 1)[0])
    if slope < sat_slope:
        return "satisfied", slope
    if slope >= viol_slope:
        return "violated", slope
    return "inconclusive", slope


@dataclass
class ACReport:
    partial_sums: np.ndarray  # (n_samples, horizon)
    verdict: str
    sample_verdicts: list
    slopes: list
    message: str = ""


def check_ac_condition(schedule, psi, constraint, p_samples, horizon):
    """Finite-horizon test of ``sum lambda_n beta_n h_C(p / beta_n) < inf``.

    Parameters
    ----------
    schedule : Schedule
    psi : PenaltyFn
    constraint : ConstraintSpec
        Zero set of ``psi``; ``p_samples`` should lie in the range of its
        normal cone.
    p_samples : sequence of vectors
    horizon : int
        Number of terms, at least 1000.
    """
    if horizon < 1000:
        raise ParameterError("horizon must be at least 1000")
    if constraint is not None and constraint.kind != psi.constraint.kind:
        raise ParameterError("constraint does not match the penalty's zero set")
    n = np.arange(1, horizon + 1)
    lam, beta = schedule.arrays(n)
    sums, verdicts, slopes = [], [], []
    message = ""
    for p in p_samples:
        p = np.asarray(p, dtype=float)
        h, finite = psi.conjugate_gap(p)
        if finite:
            # every supported h_C is positively 2-homogeneous: h(p/b) = h(p)/b^2
            inc = lam * beta * (h / beta ** 2)
        else:
            message = f"h_C infinite at sample p={p.tolist()} (p outside dom Psi*)"
            inc = np.full(horizon, np.inf)
        verdict, slope = tail_verdict(inc)
        sums.append(np.cumsum(inc))
        verdicts.append(verdict)
        slopes.append(slope)
    if "violated" in verdicts:
        overall = "violated"
    elif "inconclusive" in verdicts:
        overall = "inconclusive"
    else:
        overall = "satisfied"
    return ACReport(np.array(sums).reshape(len(sums), horizon), overall, verdicts, slopes, message)


@dataclass
class HolderFit:
    tau: float
    rho: float
    r_squared: float
    reliable: bool


def fit_holder_growth(psi, constraint, samples, rng, r_range=(1e-3, 1e2)):
    """Fit ``Psi(x) = (tau / rho) dist(x, C)^rho`` on random points off ``C``."""
    if constraint is None or not constraint.has_projection:
        raise UnsupportedError("growth fit needs a projection onto C")
    d = psi.dim
    base = constraint.project(rng.standard_normal((samples, d)) * 10.0)
    u = rng.standard_normal((samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = np.exp(rng.uniform(np.log(r_range[0]), np.log(r_range[1]), size=samples))
    x = base + r[:, None] * u
    dist = constraint.dist(x)
    val = psi.value(x)
    ok = (dist > 1e-12) & (val > 1e-300)
    if ok.sum() < 3:
        raise ParameterError("too few informative samples for the growth fit")
    ld, lv = np.log(dist[ok]), np.log(val[ok])
    slope, intercept = np.polyfit(ld, lv, 1)
    pred = slope * ld + intercept
    ss_res = float(np.sum((lv - pred) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return HolderFit(float(slope * np.exp(intercept)), float(slope), r2, r2 >= 0.9)
