"""Randomness and parameter schedules.

Random streams come from numpy's ``SeedSequence``/``PCG64`` pair: each
replicate owns child sequences keyed by ``(master_seed, replicate)``, so
replicates are independent and reproducible no matter how they are batched.
Gaussians use numpy's ziggurat sampler (``Generator.standard_normal``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParameterError
from .penalty import tail_verdict


# ---------------------------------------------------------------------------
# random streams

@dataclass
class Streams:
    """Per-trajectory generators: one for Brownian increments, one for batches."""

    noise: np.random.Generator
    batch: np.random.Generator


def make_streams(master_seed, replicate=0):
    root = np.random.SeedSequence(int(master_seed), spawn_key=(int(replicate),))
    noise_ss, batch_ss = root.spawn(2)
    return Streams(np.random.Generator(np.random.PCG64(noise_ss)),
                   np.random.Generator(np.random.PCG64(batch_ss)))


def _generator(rng):
    return rng.noise if isinstance(rng, Streams) else rng


def brownian_increment(rng, dt, m):
    """Brownian increment over a step of length ``dt`` in ``R^m``."""
    if dt < 0:
        raise ParameterError("dt must be nonnegative")
    return np.sqrt(dt) * _generator(rng).standard_normal(m)


# ---------------------------------------------------------------------------
# diffusion models

@dataclass(frozen=True)
class NoiseModel:
    """Isotropic diffusion ``sigma(t, x) = s(t) * I``.

    ``regime`` is ``"off"``, ``"UBV"`` (constant scale ``sigma_star``) or
    ``"ASV"`` (``s(t) = sigma0 * (1 + t)**(-q)`` with ``q > 1/2``). The
    envelope ``Sigma(t) = sup_x ||sigma(t, x)||_F`` equals ``s(t) * sqrt(m)``.
    The Lipschitz modulus in ``x`` is zero for these state-independent models.
    """

    regime: str = "off"
    sigma_star: float = 0.0
    sigma0: float = 0.0
    q: float = 0.75
    m: int = None
    lipschitz_x: float = 0.0

    def __post_init__(self):
        if self.regime not in ("off", "UBV", "ASV"):
            raise ParameterError(f"unknown noise regime {self.regime!r}")
        if self.regime == "UBV" and self.sigma_star < 0:
            raise ParameterError("sigma_star must be nonnegative")
        if self.regime == "ASV":
            if self.q <= 0.5:
                raise ParameterError(
                    "ASV needs q > 1/2: otherwise the integral of Sigma(t)^2 diverges")
            if self.sigma0 < 0:
                raise ParameterError("sigma0 must be nonnegative")

    @classmethod
    def off(cls):
        return cls("off")

    @classmethod
    def ubv(cls, sigma_star):
        return cls("UBV", sigma_star=float(sigma_star))

    @classmethod
    def asv(cls, sigma0, q):
        return cls("ASV", sigma0=float(sigma0), q=float(q))

    @property
    def structure(self):
        return {"off": "none", "UBV": "isotropic-constant", "ASV": "isotropic-decaying"}[self.regime]

    @property
    def active(self):
        return self.regime != "off" and self.scale(0.0) > 0

    def scale(self, t):
        """Per-coordinate diffusion coefficient ``s(t)``."""
        if self.regime == "off":
            return 0.0 * np.asarray(t, dtype=float)
        if self.regime == "UBV":
            return self.sigma_star + 0.0 * np.asarray(t, dtype=float)
        return self.sigma0 * (1.0 + np.asarray(t, dtype=float)) ** (-self.q)

    def envelope(self, t, m):
        """``Sigma(t)``, the Frobenius norm of ``sigma(t, .)`` in dimension ``m``."""
        return self.scale(t) * np.sqrt(m)

    def square_integrable(self):
        """Whether ``int_0^inf Sigma(t)^2 dt`` is finite (analytic)."""
        if self.regime == "off":
            return True
        if self.regime == "UBV":
            return self.sigma_star == 0
        return self.q > 0.5 or self.sigma0 == 0


def diffusion_apply(model, t, x, dW):
    """``sigma(t, x) @ dW`` for an isotropic model."""
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if x.shape[-1] != dW.shape[-1]:
        raise InputError("state and Brownian increment dimensions differ")
    return model.scale(t) * dW


# ---------------------------------------------------------------------------
# minibatch oracle

def minibatch_gradient(psi, batch, x):
    """Unbiased row-sampled estimate of ``grad Psi(x)`` for least squares.

    ``(m / |B|) * sum_{j in B} a_j (A x - y)_j``. ``batch`` is an index
    array; a 2-D ``batch`` of shape ``(R, b)`` pairs with ``x`` of shape
    ``(R, d)``.
    """
    batch = np.asarray(batch, dtype=np.int64)
    m = psi.n_rows
    if batch.size == 0 or batch.shape[-1] == 0:
        raise ParameterError("empty minibatch")
    if batch.min() < 0 or batch.max() >= m:
        raise ParameterError("batch index out of range")
    x = np.asarray(x, dtype=float)
    scale = m / batch.shape[-1]
    a = psi.matrix
    if hasattr(a, "rows"):
        if batch.ndim == 1:
            sub = a.rows(batch)
            r = sub @ x - psi.rhs[batch]
            return scale * (sub.T @ r)
        out = np.empty_like(x)
        for i in range(batch.shape[0]):
            sub = a.rows(batch[i])
            out[i] = scale * (sub.T @ (sub @ x[i] - psi.rhs[batch[i]]))
        return out
    rows = a[batch]                      # (..., b, d)
    r = np.einsum("...bd,...d->...b", rows, x) - psi.rhs[batch]
    return scale * np.einsum("...bd,...b->...d", rows, r)


def draw_batches(rng, m, b, count):
    """``count`` index sets of size ``b`` drawn uniformly without replacement."""
    gen = rng.batch if isinstance(rng, Streams) else rng
    keys = gen.random((count, m))
    return np.argsort(keys, axis=1, kind="stable")[:, :b]


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class Schedule:
    """Step sizes ``lambda_n`` and penalty weights ``beta_n``.

    kinds
        ``product_const``: ``beta_n = beta_scale * (n + n0)**a / L`` and
        ``lambda_n * beta_n = c / L_step``.
        ``power``: ``beta_n`` as above and independently
        ``lambda_n = lambda_scale * (n + n0)**(-lambda_exp)``.
        ``constant``: ``beta_n = beta_value``, ``lambda_n = lambda_value``.

    ``L_step`` (default ``L``) is the Lipschitz constant of the gradient
    oracle actually used; with unbiased minibatches it exceeds ``L`` (see
    :meth:`penfb.penalty.PenaltyFn.minibatch_lipschitz`).

    ``beta_time(t)`` is the continuous-time weight used on Euler-Maruyama
    partitions: ``beta_scale * (1 + t)**a / L`` (``beta_value`` when
    constant).
    """

    kind: str = "product_const"
    L: float = 1.0
    a: float = 0.75
    n0: float = 10.0
    c: float = 1.0
    beta_scale: float = 1.0
    lambda_scale: float = 1.0
    lambda_exp: float = 0.75
    beta_value: float = 1.0
    lambda_value: float = 1.0
    enforce_step_rule: bool = False
    horizon: int = 0
    L_step: float = None

    def __post_init__(self):
        if self.kind not in ("product_const", "power", "constant"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.L <= 0:
            raise ParameterError("L must be positive")
        if self.L_step is not None and self.L_step <= 0:
            raise ParameterError("L_step must be positive")
        if self.kind != "constant" and (self.a < 0 or self.n0 < 0 or self.beta_scale <= 0):
            raise ParameterError("beta_n must be positive and nondecreasing (a >= 0)")
        if self.kind == "product_const" and self.c <= 0:
            raise ParameterError("c must be positive")
        if self.kind == "power" and self.lambda_scale <= 0:
            raise ParameterError("lambda_scale must be positive")
        if self.kind == "constant" and (self.beta_value <= 0 or self.lambda_value <= 0):
            raise ParameterError("constant schedule needs positive values")
        if self.kind != "constant" and self.n0 == 0 and self.a > 0:
            # beta_0 would vanish
            raise ParameterError("n0 must be positive when a > 0")
        if self.enforce_step_rule:
            self.check_step_rule(max(int(self.horizon), 1))

    @classmethod
    def standard(cls, L, **kw):
        """``beta_k = (k + 10)**0.75 / L`` with ``lambda_k beta_k = 1 / L``."""
        return cls("product_const", L=L, a=0.75, n0=10.0, c=1.0, **kw)

    def with_L(self, L):
        from dataclasses import replace
        return replace(self, L=float(L))

    def arrays(self, n):
        """Vectorized ``(lambda_n, beta_n)`` for an integer array ``n``."""
        n = np.asarray(n, dtype=float)
        if self.kind == "constant":
            return (np.full(n.shape, self.lambda_value), np.full(n.shape, self.beta_value))
        beta = self.beta_scale * (n + self.n0) ** self.a / self.L
        if self.kind == "product_const":
            lam = self.c / (self.step_constant * beta)
        else:
            lam = self.lambda_scale * (n + self.n0) ** (-self.lambda_exp)
        return lam, beta

    @property
    def step_constant(self):
        return self.L if self.L_step is None else self.L_step

    def beta_time(self, t):
        if self.kind == "constant":
            return self.beta_value + 0.0 * np.asarray(t, dtype=float)
        return self.beta_scale * (1.0 + np.asarray(t, dtype=float)) ** self.a / self.L

    def check_step_rule(self, horizon):
        """Raise unless ``lambda_n beta_n < 2 / L`` for all ``n <= horizon``."""
        lam, beta = self.arrays(np.arange(int(horizon) + 1))
        worst = float(np.max(lam * beta))
        if worst >= 2.0 / self.L:
            raise ParameterError(
                f"step rule violated: max lambda_n*beta_n = {worst:.6g} "
                f">= 2/L_Psi = {2.0 / self.L:.6g}")

    def burn_in(self, horizon):
        """First ``n`` with ``lambda_n beta_n < 2 / L`` (``None`` if never)."""
        lam, beta = self.arrays(np.arange(int(horizon) + 1))
        ok = np.nonzero(lam * beta < 2.0 / self.L)[0]
        return int(ok[0]) if ok.size else None


def schedule_eval(s, n):
    if n < 0:
        raise ParameterError("n must be nonnegative")
    lam, beta = s.arrays(np.array([n]))
    return {"lambda_n": float(lam[0]), "beta_n": float(beta[0])}


def check_noise_summability(schedule, noise, dim, horizon):
    """Heuristic test of ``sum lambda_n^2 s_n^2 < inf`` with ``s_n = Sigma(t_n)``.

    Returns ``(verdict, partial_sums)``.
    """
    n = np.arange(int(horizon) + 1)
    lam, _ = schedule.arrays(n)
    t = np.concatenate(([0.0], np.cumsum(lam)[:-1]))
    s = noise.envelope(t, dim)
    inc = (lam * s) ** 2
    verdict, _ = tail_verdict(inc[1:])
    return verdict, np.cumsum(inc)
