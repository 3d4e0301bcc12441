"""Maximally monotone operators represented through their resolvents.

Supported kinds and their resolvents ``J = (Id + lam A)^{-1}``:

* ``zero``           identity
* ``l1``             soft thresholding at ``lam``
* ``weighted_l1``    soft thresholding at ``lam * w``
* ``translated_l1``  ``shift + soft(x - shift, lam * w)``
* ``box_cone``       projection onto the box
* ``affine``         solve ``(I + lam M) p = x - lam q`` (dense LU, d <= 2000)
* ``sum``            one l1-type term plus one box cone; ``clip(prox_l1(x))``
                     (exact because both terms are separable)
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParameterError, PreconditionError, UnsupportedError

_L1_KINDS = ("l1", "weighted_l1", "translated_l1")
MAX_AFFINE_DIM = 2000


@dataclass(frozen=True, eq=False)
class MonotoneOp:
    kind: str
    dim: int
    weights: object = None
    shift: object = None
    lower: object = None
    upper: object = None
    matrix: object = None
    offset: object = None
    terms: tuple = ()

    def __post_init__(self):
        k = self.kind
        if k not in ("zero", "box_cone", "affine", "sum") + _L1_KINDS:
            raise ParameterError(f"unknown operator kind {k!r}")
        d = self.dim

        def vec(v, default):
            if v is None:
                v = default
            return np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()

        if k in _L1_KINDS:
            object.__setattr__(self, "weights", vec(self.weights, 1.0))
            object.__setattr__(self, "shift", vec(self.shift, 0.0))
            if np.any(self.weights < 0):
                raise ParameterError("l1 weights must be nonnegative")
        if k == "box_cone":
            object.__setattr__(self, "lower", vec(self.lower, -np.inf))
            object.__setattr__(self, "upper", vec(self.upper, np.inf))
            if np.any(self.lower > self.upper):
                raise ParameterError("empty box")
        if k == "affine":
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (d, d):
                raise InputError("affine operator needs a d x d matrix")
            if d > MAX_AFFINE_DIM:
                raise UnsupportedError(f"affine resolvent limited to d <= {MAX_AFFINE_DIM}")
            if np.linalg.eigvalsh(0.5 * (m + m.T)).min() < -1e-10:
                raise ParameterError("M + M^T must be positive semidefinite")
            object.__setattr__(self, "matrix", m)
            object.__setattr__(self, "offset", vec(self.offset, 0.0))
        if k == "sum":
            kinds = sorted(t.kind for t in self.terms)
            l1 = [t for t in self.terms if t.kind in _L1_KINDS]
            box = [t for t in self.terms if t.kind == "box_cone"]
            rest = [t for t in self.terms if t.kind not in _L1_KINDS + ("box_cone", "zero")]
            if rest or len(l1) > 1 or len(box) > 1:
                raise UnsupportedError(f"no closed-form resolvent for sum of {kinds}")
            if any(t.dim != d for t in self.terms):
                raise InputError("summand dimensions differ")

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, d):
        return cls("zero", d)

    @classmethod
    def l1(cls, d):
        return cls("l1", d)

    @classmethod
    def weighted_l1(cls, weights):
        return cls("weighted_l1", np.size(weights), weights=weights)

    @classmethod
    def translated_l1(cls, shift, weights=1.0):
        return cls("translated_l1", np.size(shift), shift=shift, weights=weights)

    @classmethod
    def box_cone(cls, lower, upper, d=None):
        if d is None:
            d = max(np.size(lower), np.size(upper))
        return cls("box_cone", d, lower=lower, upper=upper)

    @classmethod
    def affine(cls, matrix, offset=None):
        matrix = np.asarray(matrix, dtype=float)
        return cls("affine", matrix.shape[0], matrix=matrix, offset=offset)

    @classmethod
    def sum_of(cls, *terms):
        return cls("sum", terms[0].dim, terms=tuple(terms))

    # -- structure --------------------------------------------------------
    @property
    def is_subdifferential(self):
        """True when the operator is the subdifferential of :meth:`potential`."""
        return self.kind != "affine"

    def _parts(self):
        if self.kind == "sum":
            return ([t for t in self.terms if t.kind in _L1_KINDS],
                    [t for t in self.terms if t.kind == "box_cone"])
        if self.kind in _L1_KINDS:
            return [self], []
        if self.kind == "box_cone":
            return [], [self]
        return [], []

    def potential(self, x):
        """Convex function whose subdifferential is this operator.

        ``+inf`` outside the box for cone kinds; raises for ``affine``.
        """
        if self.kind == "affine":
            raise UnsupportedError("affine operators need not be subdifferentials")
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        l1, box = self._parts()
        for t in l1:
            out = out + np.sum(t.weights * np.abs(x - t.shift), axis=-1)
        for t in box:
            inside = np.all((x >= t.lower) & (x <= t.upper), axis=-1)
            out = np.where(inside, out, np.inf)
        return out

    # -- resolvent --------------------------------------------------------
    def resolvent(self, lam, x):
        if self.kind == "zero":
            return np.array(x, dtype=float, copy=True)
        if self.kind in _L1_KINDS:
            u = x - self.shift
            return self.shift + np.sign(u) * np.maximum(np.abs(u) - lam * self.weights, 0.0)
        if self.kind == "box_cone":
            return np.clip(x, self.lower, self.upper)
        if self.kind == "affine":
            lhs = np.eye(self.dim) + lam * self.matrix
            rhs = np.asarray(x, dtype=float) - lam * self.offset
            return np.linalg.solve(lhs, rhs.reshape(-1, self.dim).T).T.reshape(rhs.shape)
        l1, box = self._parts()
        p = np.array(x, dtype=float, copy=True)
        for t in l1:
            p = t.resolvent(lam, p)
        for t in box:
            p = t.resolvent(lam, p)
        return p

    def graph_element(self, y, rng):
        """Some element of ``A(y)``; ties at kinks are drawn at random."""
        y = np.asarray(y, dtype=float)
        if self.kind == "zero":
            return np.zeros(self.dim)
        if self.kind == "affine":
            return self.matrix @ y + self.offset
        v = np.zeros(self.dim)
        l1, box = self._parts()
        for t in l1:
            u = y - t.shift
            kink = u == 0.0
            v = v + t.weights * np.where(kink, rng.uniform(-1.0, 1.0, self.dim), np.sign(u))
        for t in box:
            if np.any((y < t.lower) | (y > t.upper)):
                raise PreconditionError("point outside the box has no normal cone")
            at_lo = y == t.lower
            at_hi = (y == t.upper) & ~at_lo
            mag = rng.exponential(size=self.dim)
            v = v - np.where(at_lo, mag, 0.0) + np.where(at_hi, mag, 0.0)
        return v


def _check_lambda_x(lam, x):
    if not np.isscalar(lam) and np.ndim(lam) != 0:
        raise ParameterError("lambda must be a scalar")
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite input to resolvent")
    return x


def resolvent(op, lam, x):
    """``(Id + lam * op)^{-1} x``; broadcasts over leading axes of ``x``."""
    x = _check_lambda_x(lam, x)
    if x.shape[-1] != op.dim:
        raise InputError("dimension mismatch")
    return op.resolvent(lam, x)


# ---------------------------------------------------------------------------
# graph membership and sampling

def verify_graph_pair(op, y, v, rng, constraint=None, n_probes=8, tol=1e-8, scales=(1e-3, 1e-1, 1.0, 10.0)):
    """Probe-point test that ``v`` lies in ``(A + N_C)(y)``.

    Subdifferential kinds: ``f(z) >= f(y) + <v, z - y>`` for probes ``z`` in C.
    Affine kind: ``v - (M y + q)`` must satisfy the normal-cone inequality
    against the same probes. Returns True when every probe passes.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    per_scale = max(1, int(np.ceil(n_probes / len(scales))))
    probes = []
    for s in scales:
        if constraint is None:
            probes.append(y + s * rng.standard_normal((per_scale, op.dim)))
        else:
            probes.append(constraint.sample_near(y, s, rng, per_scale))
    z = np.concatenate(probes)[:max(n_probes, 1)]
    if constraint is not None and not constraint.contains(y, tol=1e-8):
        return False
    if op.is_subdifferential:
        fy = float(op.potential(y))
        if not np.isfinite(fy):
            return False
        fz = op.potential(z)
        lin = fy + (z - y) @ v
        finite = np.isfinite(fz)
        slack = tol * (1.0 + np.abs(fz[finite]) + np.abs(lin[finite]))
        return bool(np.all(fz[finite] - lin[finite] >= -slack))
    cone = v - (op.matrix @ y + op.offset)
    inner = (z - y) @ cone
    return bool(np.all(inner <= tol * (1.0 + np.linalg.norm(z - y, axis=1) * np.linalg.norm(cone))))


@dataclass(frozen=True)
class GraphSample:
    point: np.ndarray
    value: np.ndarray
    anchor_distance: float


def _tangent_direction(constraint, d, rng, max_draws=32):
    """Gaussian direction projected onto the tangent space of ``C``.

    A draw lying (up to rounding) in the normal space leaves only rounding
    noise after projection; normalising that noise would leave ``C``, so such
    draws are discarded.
    """
    for _ in range(max_draws):
        raw = rng.standard_normal(d)
        g = raw if constraint is None else constraint.tangent(raw)
        ng = float(np.linalg.norm(g))
        if ng > 1e-8 * float(np.linalg.norm(raw)):
            return g, ng
    return np.zeros(d), 0.0


def sample_graph(op, constraint, anchor, delta, count, rng, verify=True):
    """Random pairs ``(y, v)`` with ``y`` in ``B_delta`` and ``v`` in ``(A+N_C)(y)``.

    ``B_delta = {y in C : ||y - anchor|| <= delta}``. Radii are uniform on
    ``[0, delta]`` rather than uniform in volume: in high dimension the latter
    puts almost every sample on the rim and the estimate then stays far below
    zero even at a solution. The operator part of ``v``
    comes from the analytic subdifferential (uniform on kinks); the
    normal-cone part is analytic for boxes and zero otherwise.
    """
    anchor = np.asarray(anchor, dtype=float)
    if delta < 0:
        raise ParameterError("delta must be nonnegative")
    if constraint is not None and not constraint.contains(anchor, tol=1e-12):
        raise PreconditionError("anchor is not feasible")
    d = op.dim
    out = []
    for _ in range(int(count)):
        g, ng = _tangent_direction(constraint, d, rng)
        r = delta * rng.uniform()
        y = anchor + (r / ng) * g if ng > 0 else anchor.copy()
        if constraint is not None and constraint.kind == "box":
            y = np.clip(y, constraint.lower, constraint.upper)
        v = op.graph_element(y, rng)
        if constraint is not None:
            v = v + constraint.normal_cone_element(y, rng)
        if verify and not verify_graph_pair(op, y, v, rng, constraint=constraint, n_probes=8):
            raise UnsupportedError(f"could not produce a valid graph element for kind {op.kind!r}")
        out.append(GraphSample(y, v, float(np.linalg.norm(y - anchor))))
    return out


@dataclass
class FirmReport:
    max_violation: float

    @property
    def passed(self):
        return self.max_violation <= 1e-9


def check_firm_nonexpansive(op, lam, pairs):
    """Max over pairs of ``||Jx - Jy||^2 - <Jx - Jy, x - y>`` (should be <= 0)."""
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    worst = -np.inf
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dj = op.resolvent(lam, x) - op.resolvent(lam, y)
        worst = max(worst, float(dj @ dj - dj @ (x - y)))
    return FirmReport(worst if np.isfinite(worst) else 0.0)
