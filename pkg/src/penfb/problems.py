"""Instance builders: basis pursuit, bilevel quadratic, and sparse CT."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PreconditionError
from .operators import MonotoneOp, verify_graph_pair
from .penalty import PenaltyFn
from .sparse import SparseMatrix


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Triple ``(A, Psi, C)`` plus whatever ground truth is known.

    ``phi`` is the outer objective (the potential of ``operator``) when the
    problem is an optimization problem; ``phi_min`` is ``min_C phi`` when
    known analytically. ``known_solution``/``witness`` certify a point of
    ``zer(A + N_C)``; ``x_true`` is a reconstruction target only.
    """

    name: str
    operator: MonotoneOp
    penalty: PenaltyFn
    has_phi: bool = True
    phi_min: float = None
    known_solution: np.ndarray = None
    witness: np.ndarray = None
    x_true: np.ndarray = None
    x0: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.penalty.dim

    @property
    def constraint(self):
        return self.penalty.constraint

    def phi(self, x):
        return self.operator.potential(x)

    def initial_point(self):
        return np.zeros(self.dim) if self.x0 is None else np.array(self.x0, dtype=float)

    def audit(self, rng=None):
        """Check the stored ground truth; raises on failure."""
        rng = np.random.default_rng(0) if rng is None else rng
        if self.known_solution is not None:
            res = float(self.penalty.value(self.known_solution))
            if res > 1e-10:
                raise PreconditionError(f"known solution infeasible (Psi = {res:.3g})")
            if self.witness is not None:
                # witness = v + p with v in A(x*), p in N_C(x*); 0 = v + p
                v = self.witness
                if not verify_graph_pair(self.operator, self.known_solution, v, rng, n_probes=64):
                    raise PreconditionError("witness is not in A(x*)")
                p = -v
                probe = self.constraint.sample_near(self.known_solution, 1.0, rng, 16)
                if np.max((probe - self.known_solution) @ p) > 1e-8 * (1 + np.linalg.norm(p)):
                    raise PreconditionError("-witness is not in N_C(x*)")
        return True


# ---------------------------------------------------------------------------
# basis pursuit

def make_basis_pursuit(m, d, sparsity, noise_sigma=0.0, seed=0, orthonormal=False):
    """``min ||x||_1`` over ``argmin 0.5 ||A x - y||^2`` with Gaussian ``A``.

    Entries of ``A`` are N(0, 1/m); with ``orthonormal=True`` (needs m == d)
    ``A`` is a random orthogonal matrix instead.
    """
    if not (1 <= m <= d) or not (0 <= sparsity <= d):
        raise ParameterError("need 1 <= m <= d and 0 <= sparsity <= d")
    rng = np.random.default_rng(seed)
    if orthonormal:
        if m != d:
            raise ParameterError("orthonormal design needs m == d")
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        a = q * np.sign(np.diag(r))
    else:
        a = rng.standard_normal((m, d)) / np.sqrt(m)
    x_true = np.zeros(d)
    support = rng.choice(d, size=sparsity, replace=False)
    x_true[support] = rng.standard_normal(sparsity)
    y = a @ x_true + noise_sigma * rng.standard_normal(m)
    return ProblemInstance(
        name="basis_pursuit",
        operator=MonotoneOp.l1(d),
        penalty=PenaltyFn.least_squares(a, y),
        x_true=x_true,
        metadata={"m": m, "d": d, "sparsity": sparsity, "noise_sigma": noise_sigma, "seed": seed},
    )


# ---------------------------------------------------------------------------
# bilevel quadratic

def make_bilevel_quadratic(d, J, ref_value=50.0):
    """``min ||x - 50 * 1||_1`` over the zeros of the chained quadratic."""
    if not 1 <= J < d:
        raise ParameterError("need 1 <= J < d")
    x_hat = np.full(d, float(ref_value))
    x_star = np.full(d, float(ref_value))
    x_star[:J] = 1.0
    # v in A(x*): sign(x* - x_hat) on pinned coords, 0 on the kinks
    v = np.zeros(d)
    v[:J] = np.sign(1.0 - ref_value)
    return ProblemInstance(
        name="bilevel_quadratic",
        operator=MonotoneOp.translated_l1(x_hat),
        penalty=PenaltyFn.chained(d, J),
        phi_min=float(J * abs(ref_value - 1.0)),
        known_solution=x_star,
        witness=v,
        metadata={"d": d, "J": J, "x_hat": float(ref_value)},
    )


# ---------------------------------------------------------------------------
# Radon transform

def radon_row(angle, detector_offset, image_side):
    """Exact ray/pixel intersection lengths for one ray (Siddon traversal).

    The image occupies ``[-n/2, n/2]^2`` with unit pixels; pixel ``(r, c)``
    covers ``x in [c - n/2, c + 1 - n/2]``, ``y in [r - n/2, r + 1 - n/2]``
    and has flat index ``r * n + c``. The ray has direction
    ``(cos angle, sin angle)`` and signed offset ``detector_offset`` along
    the normal ``(-sin angle, cos angle)``.

    Returns ``(indices, weights)`` sorted by index.
    """
    n = int(image_side)
    h = n / 2.0
    ux, uy = np.cos(angle), np.sin(angle)
    px, py = -detector_offset * uy, detector_offset * ux   # point on the ray
    lo, hi = -np.inf, np.inf
    for p, u in ((px, ux), (py, uy)):
        if abs(u) < 1e-15:
            if p < -h or p > h:
                return np.zeros(0, dtype=np.int64), np.zeros(0)
            continue
        a0, a1 = (-h - p) / u, (h - p) / u
        lo, hi = max(lo, min(a0, a1)), min(hi, max(a0, a1))
    if not hi > lo:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    grid = np.arange(n + 1) - h
    alphas = [np.array([lo, hi])]
    for p, u in ((px, ux), (py, uy)):
        if abs(u) >= 1e-15:
            a = (grid - p) / u
            alphas.append(a[(a > lo) & (a < hi)])
    a = np.unique(np.concatenate(alphas))
    seg = np.diff(a)
    keep = seg > 1e-12
    mid = 0.5 * (a[:-1] + a[1:])[keep]
    seg = seg[keep]
    col = np.floor(px + mid * ux + h).astype(np.int64)
    row = np.floor(py + mid * uy + h).astype(np.int64)
    inside = (col >= 0) & (col < n) & (row >= 0) & (row < n)
    idx = row[inside] * n + col[inside]
    w = seg[inside]
    order = np.argsort(idx, kind="stable")
    idx, w = idx[order], w[order]
    # merge duplicates from rays running exactly along grid lines
    uniq, start = np.unique(idx, return_index=True)
    return uniq, np.add.reduceat(w, start) if w.size else w


def radon_geometry(image_side, n_angles, n_detectors):
    angles = np.arange(n_angles) * (np.pi / n_angles)
    diag = image_side * np.sqrt(2.0)
    offsets = -diag / 2 + (np.arange(n_detectors) + 0.5) * diag / n_detectors
    return angles, offsets


def radon_matrix(image_side, n_angles, n_detectors):
    angles, offsets = radon_geometry(image_side, n_angles, n_detectors)
    rows = [radon_row(th, s, image_side) for th in angles for s in offsets]
    return SparseMatrix.from_rows(rows, image_side * image_side)


def phantom(kind, image_side, seed=0):
    """Test images on the ``[-n/2, n/2]^2`` grid, flattened row-major."""
    n = image_side
    c = np.arange(n) + 0.5 - n / 2.0
    xx, yy = np.meshgrid(c / (n / 2.0), c / (n / 2.0))   # rows index y
    img = np.zeros((n, n))
    if kind == "zero":
        pass
    elif kind == "disk":
        img[xx ** 2 + yy ** 2 <= 0.6 ** 2] = 1.0
    elif kind == "blocks":
        rng = np.random.default_rng(seed)
        for _ in range(4):
            w, hgt = rng.integers(n // 8, n // 3, size=2)
            r0 = rng.integers(n // 8, n - hgt - n // 8)
            c0 = rng.integers(n // 8, n - w - n // 8)
            img[r0:r0 + hgt, c0:c0 + w] = rng.uniform(0.5, 1.0)
    elif kind == "shepp-logan-like":
        # (value, x0, y0, a, b, angle) on the unit square
        ellipses = [
            (1.0, 0.0, 0.0, 0.69, 0.92, 0.0),
            (-0.8, 0.0, -0.0184, 0.6624, 0.874, 0.0),
            (-0.2, 0.22, 0.0, 0.11, 0.31, -18.0),
            (-0.2, -0.22, 0.0, 0.16, 0.41, 18.0),
            (0.1, 0.0, 0.35, 0.21, 0.25, 0.0),
            (0.1, 0.0, 0.1, 0.046, 0.046, 0.0),
            (0.1, -0.08, -0.605, 0.046, 0.023, 0.0),
        ]
        for val, x0, y0, a, b, ang in ellipses:
            t = np.deg2rad(ang)
            xr = (xx - x0) * np.cos(t) + (yy - y0) * np.sin(t)
            yr = -(xx - x0) * np.sin(t) + (yy - y0) * np.cos(t)
            img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    else:
        raise ParameterError(f"unknown phantom {kind!r}")
    return img.ravel()


def make_radon(image_side, n_angles, n_detectors, phantom_kind="blocks", seed=0):
    """Sparse-view CT: ``min ||x||_1`` over least-squares fits of ``A x = y``."""
    if image_side < 8 or n_angles < 1 or n_detectors < 1:
        raise ParameterError("need image_side >= 8 and positive angle/detector counts")
    a = radon_matrix(image_side, n_angles, n_detectors)
    x_true = phantom(phantom_kind, image_side, seed)
    y = a.matvec(x_true)
    d = image_side * image_side
    return ProblemInstance(
        name="radon",
        operator=MonotoneOp.l1(d),
        penalty=PenaltyFn.least_squares(a, y),
        x_true=x_true,
        metadata={"image_side": image_side, "n_angles": n_angles,
                  "n_detectors": n_detectors, "phantom": phantom_kind, "seed": seed},
    )
