"""Merit functions, rates and concentration statistics."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PreconditionError, UnsupportedError


@dataclass
class GapEstimate:
    """Sampled lower bound on the restricted gap ``Theta_delta(x)``."""

    value: float
    n_samples: int
    delta: float = np.nan
    anchor: np.ndarray = None


class GapSampler:
    """Graph samples packed as arrays for repeated gap evaluations."""

    def __init__(self, samples, delta=np.nan, anchor=None):
        if not samples:
            raise ParameterError("restricted gap needs at least one graph sample")
        self.points = np.stack([s.point for s in samples])
        self.values = np.stack([s.value for s in samples])
        self.offsets = np.einsum("ij,ij->i", self.values, self.points)
        self.delta = delta
        self.anchor = anchor

    def __len__(self):
        return self.points.shape[0]

    def __call__(self, x):
        """Gap estimates for ``x`` of shape ``(d,)`` or ``(R, d)``."""
        x = np.asarray(x, dtype=float)
        return np.max(x @ self.values.T - self.offsets, axis=-1)


def restricted_gap(x, samples, delta=np.nan, anchor=None, verified_point=False):
    """``max <v, x - y>`` over graph samples ``(y, v)``.

    The true restricted gap is a supremum over a continuum, so this is a
    lower bound whose quality depends on ``len(samples)``. The value is
    clipped at zero only when ``verified_point`` says ``x`` itself lies in
    ``B_delta``, where the exact gap is known to be nonnegative.
    """
    if not samples:
        raise ParameterError("restricted gap needs at least one graph sample")
    x = np.asarray(x, dtype=float)
    value = max(float(s.value @ (x - s.point)) for s in samples)
    if verified_point:
        value = max(value, 0.0)
    return GapEstimate(value, len(samples), delta, anchor)


def default_delta(constraint, anchor):
    """Half the distance from ``anchor`` to the boundary of the feasible set."""
    dist = constraint.interior_distance(np.asarray(anchor, dtype=float))
    if not np.isfinite(dist):
        raise ParameterError("feasible set has no boundary; pass delta explicitly")
    return 0.5 * dist


def objective_gap(problem, x, phi_min=None):
    """Signed ``phi(x) - min_C phi``; negative values flag infeasible points."""
    if not problem.has_phi:
        raise UnsupportedError("problem has no objective")
    ref = problem.phi_min if phi_min is None else phi_min
    if ref is None:
        raise UnsupportedError("problem has no reference optimal value; pass phi_min")
    return problem.phi(np.asarray(x, dtype=float)) - ref


def feasibility_residual(problem, x):
    return problem.penalty.value(np.asarray(x, dtype=float))


def dist_to_solution(problem, x):
    if problem.known_solution is None:
        raise UnsupportedError("problem has no known solution set")
    return np.linalg.norm(np.asarray(x, dtype=float) - problem.known_solution, axis=-1)


@dataclass
class RateFit:
    slope: float
    r_squared: float
    intercept: float
    n_points: int


def rate_fit(series, values=None, tail_fraction=0.8):
    """Log-log least-squares slope over the last 80% of a positive series.

    ``series`` is either a sequence of ``(t, value)`` pairs or the ``t``
    array with ``values`` given separately. Nonpositive values are dropped;
    fewer than 10 remaining points is an error.
    """
    if values is None:
        arr = np.asarray(series, dtype=float)
        t, v = arr[:, 0], arr[:, 1]
    else:
        t, v = np.asarray(series, dtype=float), np.asarray(values, dtype=float)
    keep = (v > 0) & (t > 0) & np.isfinite(v)
    t, v = t[keep], v[keep]
    if t.size < 10:
        raise ParameterError(f"rate fit needs at least 10 positive points, got {t.size}")
    order = np.argsort(t)
    t, v = t[order], v[order]
    start = int(np.floor(round(t.size * (1.0 - tail_fraction), 9)))
    lt, lv = np.log(t[start:]), np.log(v[start:])
    slope, intercept = np.polyfit(lt, lv, 1)
    resid = lv - (slope * lt + intercept)
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), r2, float(intercept), int(lt.size))


@dataclass
class ConcentrationReport:
    rows: list                       # {epsilon, frequency, bound, n_replicates}
    replicates: list                 # {Q0, Q1, delta_phi_bar, t}
    empirical_reference: bool = False
    notes: list = field(default_factory=list)

    def exceedances(self, epsilon):
        """Per-replicate indicator of ``delta_phi_bar >= Q0 + epsilon * Q1``."""
        return np.array([r["delta_phi_bar"] >= r["Q0"] + epsilon * r["Q1"]
                         for r in self.replicates], dtype=float)


def concentration_report(trajectories, epsilons, problem, z_ref=None, x0=None):
    """Empirical check of ``P(dPhi >= Q0 + eps Q1) <= exp(-eps^2 / 4)``.

    For each trajectory, with ``t`` the elapsed time,
    ``dPhi = phi(x_bar(t)) - phi(z_ref)``, ``Q0 = (c(t) + 2 E_z(0)) / t`` with
    ``E_z(0) = 0.5 ||X_0 - z_ref||^2`` and ``Q1 = sqrt(delta(t)) / t``.
    ``z_ref`` defaults to the known solution; otherwise the best feasible
    final iterate across replicates is used and the report is flagged.
    """
    if not problem.has_phi:
        raise UnsupportedError("concentration report needs an objective")
    trajectories = [tr for tr in trajectories if not tr.diverged]
    if not trajectories:
        raise PreconditionError("no finite trajectories")
    empirical = False
    if z_ref is None:
        if problem.known_solution is not None:
            z_ref = problem.known_solution
        else:
            finals = np.stack([tr.final.x for tr in trajectories])
            feas = problem.penalty.value(finals)
            ok = feas <= max(1e-8, float(np.min(feas)))
            cand = finals[ok]
            z_ref = cand[int(np.argmin(problem.phi(cand)))]
            empirical = True
    z_ref = np.asarray(z_ref, dtype=float)
    x0 = problem.initial_point() if x0 is None else np.asarray(x0, dtype=float)
    e0 = 0.5 * float(np.sum((x0 - z_ref) ** 2))
    phi_ref = float(problem.phi(z_ref))
    reps = []
    for tr in trajectories:
        st = tr.final
        if st.c_acc is None or st.delta_acc is None:
            raise PreconditionError("trajectory lacks concentration accumulators")
        t = st.t
        if not t > 0:
            raise PreconditionError("trajectory has zero elapsed time")
        reps.append({
            "t": t,
            "delta_phi_bar": float(problem.phi(st.x_bar)) - phi_ref,
            "Q0": (st.c_acc + 2.0 * e0) / t,
            "Q1": np.sqrt(st.delta_acc) / t,
        })
    report = ConcentrationReport([], reps, empirical)
    for eps in epsilons:
        ind = report.exceedances(eps)
        report.rows.append({"epsilon": float(eps), "frequency": float(ind.mean()),
                            "bound": float(np.exp(-eps * eps / 4.0)),
                            "n_replicates": len(reps)})
    return report
