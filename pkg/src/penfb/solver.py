"""Stochastic forward-backward penalty iteration.

One step maps ``X_n`` to

    V_{n+1} = beta_n * g(X_n) + dB_{n+1},       dB = sigma(t_n, X_n) dW,
    X_{n+1} = (Id + lambda_n A)^{-1} (X_n - lambda_n V_{n+1}),

where ``g`` is the penalty gradient or its minibatch estimate and
``dW ~ N(0, lambda_n I)``. Alongside the iterate the state carries the
time-weighted Cesaro average, the companion process
``Z_{n+1} = Z_n - sigma dW`` and the accumulators ``c`` and ``delta`` used by
the concentration bound.

The update is written for stacks of replicates (leading axis ``R``) so a
whole Monte Carlo batch advances with one set of numpy calls; each replicate
still draws from its own random streams.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DivergenceError, ParameterError
from .stochastic import Streams, draw_batches, make_streams, minibatch_gradient

DIVERGENCE_BOUND = 1e12
_CHUNK = 2048
_NO_NOISE = np.zeros((1, 1, 1))


@dataclass(frozen=True)
class Options:
    """Iteration switches.

    batch_size
        Rows per minibatch (least-squares penalties); ``None`` uses the full
        gradient.
    beta_scales_noise
        Multiply the diffusion term by ``beta_n`` as well.
    uniform_cesaro
        Average iterates with equal weights instead of ``lambda_n``.
    noise_scaling
        ``"scheme"`` injects ``lambda_n * sigma dW`` (the update above);
        ``"sde"`` injects ``sigma dW`` (plain Euler-Maruyama).
    batch_scaling
        ``"unbiased"`` rescales minibatch sums by ``m / |B|``; ``"sum"``
        uses the plain sum over the batch rows, which is the unbiased
        estimate of ``(|B| / m) grad Psi``.
    use_kernel
        Use the compiled loop when the operator/penalty pair supports it.
    """

    batch_size: int = None
    beta_scales_noise: bool = False
    uniform_cesaro: bool = False
    noise_scaling: str = "scheme"
    use_kernel: bool = True
    batch_scaling: str = "unbiased"

    def __post_init__(self):
        if self.noise_scaling not in ("scheme", "sde"):
            raise ParameterError("noise_scaling must be 'scheme' or 'sde'")
        if self.batch_scaling not in ("unbiased", "sum"):
            raise ParameterError("batch_scaling must be 'unbiased' or 'sum'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")


@dataclass
class SolverState:
    n: int
    t: float
    x: np.ndarray
    x_bar: np.ndarray
    z_aux: np.ndarray
    sum_lambda: float
    c_acc: float = 0.0
    delta_acc: float = 0.0

    @classmethod
    def initial(cls, x0):
        x0 = np.array(x0, dtype=float)
        return cls(0, 0.0, x0, x0.copy(), x0.copy(), 0.0)


@dataclass
class Trajectory:
    records: dict
    final: SolverState
    snapshots: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def diverged(self):
        return self.status == "diverged"


def cesaro_update(x_bar, sum_lambda, x_new, lambda_new):
    """Fold ``x_new`` with weight ``lambda_new`` into a weighted running mean."""
    if sum_lambda < 0:
        raise ParameterError("sum_lambda must be nonnegative")
    if not lambda_new > 0:
        raise ParameterError("lambda_new must be positive")
    total = sum_lambda + lambda_new
    x_bar = np.asarray(x_bar, dtype=float)
    return x_bar + (lambda_new / total) * (np.asarray(x_new, dtype=float) - x_bar), total


# ---------------------------------------------------------------------------
# vectorized core

class _Batch:
    """Mutable state of ``R`` replicates advancing in lockstep."""

    def __init__(self, problem, schedule, noise, options, streams, x0):
        self.problem = problem
        self.op = problem.operator
        self.psi = problem.penalty
        self.schedule = schedule
        self.noise = noise
        self.options = options
        self.streams = streams
        r, d = len(streams), problem.dim
        self.d = d
        self.x = np.tile(np.asarray(x0, dtype=float), (r, 1))
        self.x_bar = self.x.copy()
        self.z = self.x.copy()
        self.sum_w = np.zeros(r)
        self.c = np.zeros(r)
        self.delta = np.zeros(r)
        self.alive = np.ones(r, dtype=bool)
        self.n = 0
        self.t = 0.0
        self.noise_on = noise is not None and noise.active
        self.batch_size = options.batch_size
        if self.batch_size is not None:
            self.m = self.psi.n_rows
            if self.batch_size > self.m:
                raise ParameterError("batch_size exceeds the number of rows")
        self._xi = None
        self._bidx = None
        self._k = _CHUNK
        self._kernel_args = None
        if self.batch_size is None and options.use_kernel:
            opc = _kernels.operator_code(self.op)
            pen = _kernels.penalty_code(self.psi)
            if opc is not None and pen is not None:
                self._kernel_args = (
                    self.noise_on, options.noise_scaling == "sde", options.beta_scales_noise,
                    options.uniform_cesaro) + tuple(
                    np.ascontiguousarray(a, dtype=float) if isinstance(a, np.ndarray) else a
                    for a in opc + pen) + (DIVERGENCE_BOUND,)

    def _refill(self):
        if self.noise_on:
            if self._xi is None:
                self._xi = np.empty((len(self.streams), _CHUNK, self.d))
            for r, s in enumerate(self.streams):
                s.noise.standard_normal(out=self._xi[r])
        if self.batch_size is not None:
            self._bidx = np.stack(
                [draw_batches(s, self.m, self.batch_size, _CHUNK) for s in self.streams], axis=1)
        self._k = 0

    def gradient(self, x, k):
        if self.batch_size is None:
            return self.psi.grad(x)
        g = minibatch_gradient(self.psi, self._bidx[k], x)
        if self.options.batch_scaling == "sum":
            g *= self.batch_size / self.m
        return g

    def advance(self, lam, beta, s):
        """One iteration with the given ``lambda_n, beta_n, s(t_n)``."""
        if self._k >= _CHUNK:
            self._refill()
        k = self._k
        self._k += 1
        x = self.x
        v = beta * self.gradient(x, k)
        if self.noise_on:
            sdw = (s * np.sqrt(lam)) * self._xi[:, k]
            push = beta * sdw if self.options.beta_scales_noise else sdw
            if self.options.noise_scaling == "sde":
                x_new = self.op.resolvent(lam, x - lam * v - push)
            else:
                x_new = self.op.resolvent(lam, x - lam * (v + push))
        else:
            x_new = self.op.resolvent(lam, x - lam * v)
        norms = np.sqrt(np.einsum("ij,ij->i", x_new, x_new))
        if not np.all(norms <= DIVERGENCE_BOUND):
            bad = ~(norms <= DIVERGENCE_BOUND)
            self.alive &= ~bad
            x_new[bad] = x[bad]
        if not self.alive.all():
            x_new[~self.alive] = x[~self.alive]
        if self.noise_on:
            sig2 = s * s * self.d          # ||sigma||_F^2 = Sigma(t)^2
            diff = self.z - x
            self.c = self.c + 0.5 * sig2 * lam
            self.delta = self.delta + sig2 * np.einsum("ij,ij->i", diff, diff) * lam
            self.z = self.z - sdw
        w = 1.0 if self.options.uniform_cesaro else lam
        self.sum_w = self.sum_w + w
        self.x_bar = self.x_bar + (w / self.sum_w)[:, None] * (x - self.x_bar)
        self.x = x_new
        self.n += 1
        self.t += lam

    def advance_many(self, lam, beta, s):
        """Several iterations; compiled when the operator/penalty pair allows."""
        if self._kernel_args is None:
            for k in range(lam.size):
                self.advance(lam[k], beta[k], s[k])
            return
        done = 0
        while done < lam.size:
            if self.noise_on:
                if self._k >= _CHUNK:
                    self._refill()
                take = min(lam.size - done, _CHUNK - self._k)
                xi = self._xi[:, self._k:self._k + take]
                self._k += take
            else:
                take = lam.size - done
                xi = _NO_NOISE
            seg = slice(done, done + take)
            _kernels.advance_segment(
                self.x, self.x_bar, self.z, self.sum_w, self.c, self.delta, self.alive,
                np.ascontiguousarray(lam[seg]), np.ascontiguousarray(beta[seg]),
                np.ascontiguousarray(s[seg]), xi, *self._kernel_args)
            done += take
        self.n += lam.size
        self.t += float(np.sum(lam))

    def state(self, i):
        return SolverState(self.n, self.t, self.x[i].copy(), self.x_bar[i].copy(), self.z[i].copy(),
                           float(self.sum_w[i]), float(self.c[i]), float(self.delta[i]))


def _check_schedule(schedule, n_steps):
    if schedule.enforce_step_rule:
        schedule.check_step_rule(n_steps)


def step(state, problem, schedule, noise, rng, options=None):
    """Advance a single trajectory by one iteration.

    ``rng`` is a :class:`~penfb.stochastic.Streams` (a bare generator is
    used for both streams). Raises :class:`DivergenceError` carrying the
    last finite state when the new iterate is non-finite or exceeds
    ``1e12`` in norm.
    """
    options = options or Options()
    if not isinstance(rng, Streams):
        rng = Streams(rng, rng)
    if schedule.enforce_step_rule:
        schedule.check_step_rule(state.n)
    lam, beta = schedule.arrays(np.array([state.n]))
    lam, beta = float(lam[0]), float(beta[0])
    b = _Batch(problem, schedule, noise, options, [rng], state.x)
    b.x_bar = state.x_bar[None].copy()
    b.z = state.z_aux[None].copy()
    b.sum_w = np.array([state.sum_lambda])
    b.c = np.array([state.c_acc])
    b.delta = np.array([state.delta_acc])
    # draw exactly one step's worth from each stream
    if b.noise_on:
        b._xi = rng.noise.standard_normal(problem.dim)[None, None, :]
    if b.batch_size is not None:
        b._bidx = draw_batches(rng, b.m, b.batch_size, 1)[:, None, :]
    b._k = 0
    s = float(noise.scale(state.t)) if b.noise_on else 0.0
    b.advance(lam, beta, s)
    if not b.alive[0] or not np.linalg.norm(b.x[0]) <= DIVERGENCE_BOUND:
        raise DivergenceError(f"iterate diverged at step {state.n + 1}", state)
    out = b.state(0)
    out.n = state.n + 1
    out.t = state.t + lam
    return out


def _metrics(problem, x):
    out = {"psi": problem.penalty.value(x)}
    out["objective"] = problem.phi(x) if problem.has_phi else np.full(x.shape[0], np.nan)
    if problem.known_solution is not None:
        out["dist"] = np.linalg.norm(x - problem.known_solution, axis=1)
    else:
        out["dist"] = np.full(x.shape[0], np.nan)
    return out


def run_batch(problem, schedule, noise, n_steps, master_seed, replicates, record_every=1, *,
              options=None, checkpoints=(), snapshot_steps=(), keep_x=False, x0=None,
              callback=None):
    """Run several replicates of the iteration in lockstep.

    Each replicate ``r`` uses :func:`make_streams(master_seed, r)`, so its
    path does not depend on which other replicates share the batch.

    Returns one :class:`Trajectory` per replicate, in the given order.
    ``callback(n, batch)`` (optional) is invoked at every recorded step.
    """
    if n_steps < 1:
        raise ParameterError("n_steps must be at least 1")
    if record_every < 1:
        raise ParameterError("record_every must be at least 1")
    options = options or Options()
    _check_schedule(schedule, n_steps)
    streams = [make_streams(master_seed, r) for r in replicates]
    x0 = problem.initial_point() if x0 is None else np.asarray(x0, dtype=float)
    batch = _Batch(problem, schedule, noise, options, streams, x0)

    idx = np.arange(n_steps)
    lam_arr, beta_arr = schedule.arrays(idx)
    t_arr = np.concatenate(([0.0], np.cumsum(lam_arr)))
    s_arr = noise.scale(t_arr[:-1]) if batch.noise_on else np.zeros(n_steps)

    record_at = set(range(0, n_steps + 1, record_every)) | {n_steps}
    record_at |= {int(c) for c in checkpoints if 0 <= c <= n_steps}
    snap_at = {int(c) for c in snapshot_steps if 0 <= c <= n_steps}
    record_at |= snap_at
    cols = {k: [] for k in ("n", "t", "psi", "objective", "dist", "xbar_objective", "xbar_psi",
                            "xbar_dist")}
    xs, xbars = [], []
    snaps = [dict() for _ in replicates]

    def record(n):
        cur = _metrics(problem, batch.x)
        avg = _metrics(problem, batch.x_bar)
        cols["n"].append(np.full(len(replicates), n))
        cols["t"].append(np.full(len(replicates), t_arr[n]))
        cols["psi"].append(cur["psi"])
        cols["objective"].append(cur["objective"])
        cols["dist"].append(cur["dist"])
        cols["xbar_objective"].append(avg["objective"])
        cols["xbar_psi"].append(avg["psi"])
        cols["xbar_dist"].append(avg["dist"])
        if keep_x:
            xs.append(batch.x.copy())
            xbars.append(batch.x_bar.copy())
        if n in snap_at:
            for i in range(len(replicates)):
                snaps[i][n] = {"x": batch.x[i].copy(), "x_bar": batch.x_bar[i].copy()}
        if callback is not None:
            callback(n, batch)

    record(0)
    first_dead = {}
    stops = sorted(record_at - {0})
    n = 0
    for stop in stops:
        batch.advance_many(lam_arr[n:stop], beta_arr[n:stop], s_arr[n:stop])
        n = stop
        if not batch.alive.all():
            for i in np.nonzero(~batch.alive)[0]:
                first_dead.setdefault(int(i), n)
        record(n)
    batch.t = float(t_arr[-1])

    arrays = {k: np.stack(v, axis=1) for k, v in cols.items()}
    out = []
    for i, r in enumerate(replicates):
        rec = {k: v[i].copy() for k, v in arrays.items()}
        if keep_x:
            rec["x"] = np.stack([a[i] for a in xs])
            rec["x_bar"] = np.stack([a[i] for a in xbars])
        traj = Trajectory(rec, batch.state(i), snaps[i],
                          metadata={"master_seed": master_seed, "replicate": r})
        if i in first_dead:
            traj.status = "diverged"
            traj.error = f"iterate left the finite region by step {first_dead[i]}"
        out.append(traj)
    return out


def run(problem, schedule, noise, n_steps, seed, record_every=1, *, replicate=0, **kwargs):
    """Single-trajectory :func:`run_batch`."""
    return run_batch(problem, schedule, noise, n_steps, seed, [replicate], record_every, **kwargs)[0]


# ---------------------------------------------------------------------------
# Euler-Maruyama on explicit partitions

@dataclass
class EMPath:
    """Piecewise-linear interpolation of a discrete path."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.times, self.values[:, j])
                         for j in range(self.values.shape[1])], axis=1)


def brownian_increments(rng, partition, m):
    """Increments ``W(t_{k+1}) - W(t_k)`` along ``partition``."""
    dt = np.diff(np.asarray(partition, dtype=float))
    if np.any(dt < 0):
        raise ParameterError("partition must be nondecreasing")
    gen = rng.noise if isinstance(rng, Streams) else rng
    return np.sqrt(dt)[:, None] * gen.standard_normal((dt.size, m))


def coarsen(increments, factor):
    """Aggregate consecutive increments in groups of ``factor`` (mesh coupling)."""
    n, m = increments.shape
    if n % factor:
        raise ParameterError("fine step count must be a multiple of the factor")
    return increments.reshape(n // factor, factor, m).sum(axis=1)


def euler_maruyama_path(problem, partition, noise, rng=None, *, schedule=None, dW=None,
                        options=None, x0=None):
    """Run the splitting scheme on an explicit time partition.

    Step ``k`` uses ``dt_k = t_{k+1} - t_k`` as the resolvent parameter and
    ``beta(t_k)`` from ``schedule.beta_time`` (1 when no schedule is given).
    Pass ``dW`` to reuse a Brownian path across meshes (see :func:`coarsen`).
    """
    options = options or Options()
    times = np.asarray(partition, dtype=float)
    if times.ndim != 1 or times.size < 2 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ParameterError("partition must start at 0 and be strictly increasing")
    d = problem.dim
    noise_on = noise is not None and noise.active
    if noise_on and dW is None:
        if rng is None:
            raise ParameterError("noise requires an rng or explicit increments")
        dW = brownian_increments(rng, times, d)
    op, psi = problem.operator, problem.penalty
    x = problem.initial_point() if x0 is None else np.array(x0, dtype=float)
    out = np.empty((times.size, d))
    out[0] = x
    for k in range(times.size - 1):
        t, dt = times[k], times[k + 1] - times[k]
        beta = 1.0 if schedule is None else float(schedule.beta_time(t))
        v = beta * psi.grad(x)
        if noise_on:
            push = float(noise.scale(t)) * dW[k]
            if options.beta_scales_noise:
                push = beta * push
            if options.noise_scaling == "sde":
                x = op.resolvent(dt, x - dt * v - push)
            else:
                x = op.resolvent(dt, x - dt * (v + push))
        else:
            x = op.resolvent(dt, x - dt * v)
        if not np.all(np.abs(x) <= DIVERGENCE_BOUND):
            raise DivergenceError(f"Euler-Maruyama path diverged at step {k + 1}")
        out[k + 1] = x
    return EMPath(times, out)


def coupled_mesh_paths(problem, T, levels, noise, rng, *, schedule=None, options=None):
    """Paths on uniform meshes ``T / 2**k`` for ``k`` in ``levels``, sharing one Brownian path."""
    levels = sorted(int(k) for k in levels)
    finest = 2 ** levels[-1]
    fine_times = np.linspace(0.0, T, finest + 1)
    dW = brownian_increments(rng, fine_times, problem.dim)
    paths = {}
    for k in levels:
        factor = finest // 2 ** k
        times = fine_times[::factor]
        paths[k] = euler_maruyama_path(problem, times, noise, schedule=schedule,
                                       dW=coarsen(dW, factor), options=options)
    return paths


def sup_sq_difference(path_a, path_b):
    """``sup_t ||a(t) - b(t)||^2`` over the union of both breakpoint sets."""
    grid = np.union1d(path_a.times, path_b.times)
    diff = path_a(grid) - path_b(grid)
    return float(np.max(np.sum(diff * diff, axis=1)))
