import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from penfb.errors import InputError, ParameterError, PreconditionError, UnsupportedError
from penfb.operators import (
    MonotoneOp,
    check_firm_nonexpansive,
    resolvent,
    sample_graph,
    verify_graph_pair,
)
from penfb.penalty import ConstraintSpec


def all_kinds(d=4, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((d, d))
    skew = m - m.T
    return {
        "zero": MonotoneOp.zero(d),
        "l1": MonotoneOp.l1(d),
        "weighted_l1": MonotoneOp.weighted_l1(rng.uniform(0.1, 2.0, d)),
        "translated_l1": MonotoneOp.translated_l1(rng.standard_normal(d), 0.5),
        "box_cone": MonotoneOp.box_cone(-np.ones(d), np.ones(d)),
        "affine": MonotoneOp.affine(0.1 * np.eye(d) + skew, rng.standard_normal(d)),
        "sum": MonotoneOp.sum_of(MonotoneOp.l1(d), MonotoneOp.box_cone(-2.0, 2.0, d)),
    }


# -- resolvent examples --------------------------------------------------

def test_zero_resolvent_is_identity():
    assert np.array_equal(resolvent(MonotoneOp.zero(2), 0.7, [3.0, -1.0]), [3.0, -1.0])


def test_l1_resolvent_soft_thresholds():
    assert np.array_equal(resolvent(MonotoneOp.l1(3), 1.0, [2.0, -0.5, 0.0]), [1.0, 0.0, 0.0])


def test_box_resolvent_projects():
    op = MonotoneOp.box_cone([0.0, 0.0], [1.0, 1.0])
    assert np.array_equal(resolvent(op, 2.0, [2.0, -1.0]), [1.0, 0.0])


def test_box_resolvent_matches_clip_componentwise():
    rng = np.random.default_rng(1)
    lo, hi = -rng.uniform(0, 2, 6), rng.uniform(0, 2, 6)
    op = MonotoneOp.box_cone(lo, hi)
    x = 5 * rng.standard_normal((50, 6))
    assert np.array_equal(resolvent(op, 0.3, x), np.minimum(np.maximum(x, lo), hi))


def test_translated_l1_resolvent():
    op = MonotoneOp.translated_l1(np.array([50.0, 50.0]))
    assert np.allclose(resolvent(op, 1.0, [0.0, 49.5]), [1.0, 50.0])


def test_affine_resolvent_solves_linear_system():
    m = np.array([[1.0, 2.0], [-2.0, 1.0]])
    q = np.array([0.5, -1.0])
    op = MonotoneOp.affine(m, q)
    x = np.array([3.0, 4.0])
    p = resolvent(op, 0.5, x)
    assert np.allclose(p + 0.5 * (m @ p + q), x)


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_nonpositive_lambda_rejected(lam):
    with pytest.raises(ParameterError):
        resolvent(MonotoneOp.l1(2), lam, [1.0, 2.0])


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_nonfinite_input_rejected(bad):
    with pytest.raises(InputError):
        resolvent(MonotoneOp.l1(2), 1.0, [bad, 0.0])


def test_dimension_mismatch_rejected():
    with pytest.raises(InputError):
        resolvent(MonotoneOp.l1(3), 1.0, [1.0, 2.0])


def test_affine_rejects_non_monotone_matrix():
    with pytest.raises(ParameterError):
        MonotoneOp.affine(-np.eye(2))


def test_unsupported_sum_rejected():
    with pytest.raises(UnsupportedError):
        MonotoneOp.sum_of(MonotoneOp.l1(2), MonotoneOp.l1(2))


# -- resolvent properties --------------------------------------------------

@pytest.mark.parametrize("kind", sorted(all_kinds()))
def test_resolvent_consistency(kind):
    """``(x - p) / lam`` is an element of ``A(p)`` against 64 probes."""
    op = all_kinds()[kind]
    rng = np.random.default_rng(2)
    for _ in range(20):
        lam = float(rng.uniform(0.05, 3.0))
        x = 3 * rng.standard_normal(op.dim)
        p = resolvent(op, lam, x)
        u = (x - p) / lam
        if op.kind == "affine":
            assert np.allclose(u, op.matrix @ p + op.offset, atol=1e-10)
        else:
            assert verify_graph_pair(op, p, u, rng, n_probes=64)


@pytest.mark.parametrize("kind", sorted(all_kinds()))
def test_monotone_pairs(kind):
    op = all_kinds()[kind]
    rng = np.random.default_rng(3)
    for _ in range(200):
        lam = float(rng.uniform(0.05, 3.0))
        x, y = 3 * rng.standard_normal((2, op.dim))
        jx, jy = op.resolvent(lam, x), op.resolvent(lam, y)
        u, v = (x - jx) / lam, (y - jy) / lam
        assert (u - v) @ (jx - jy) >= -1e-9


@settings(max_examples=200, deadline=None)
@given(
    kind=st.sampled_from(sorted(all_kinds())),
    lam=st.floats(1e-3, 10.0),
    x=arrays(np.float64, 4, elements=st.floats(-100, 100)),
    y=arrays(np.float64, 4, elements=st.floats(-100, 100)),
)
def test_firm_nonexpansive_hypothesis(kind, lam, x, y):
    op = all_kinds()[kind]
    dj = op.resolvent(lam, x) - op.resolvent(lam, y)
    scale = 1.0 + np.sum((x - y) ** 2)
    assert dj @ dj - dj @ (x - y) <= 1e-9 * scale


def test_firm_nonexpansive_zero_kind():
    rng = np.random.default_rng(4)
    pairs = [tuple(rng.standard_normal((2, 3))) for _ in range(10)]
    assert check_firm_nonexpansive(MonotoneOp.zero(3), 1.0, pairs).max_violation <= 0.0


def test_firm_nonexpansive_l1_random_pairs():
    rng = np.random.default_rng(5)
    pairs = [tuple(rng.uniform(-5, 5, (2, 10))) for _ in range(100)]
    report = check_firm_nonexpansive(MonotoneOp.l1(10), 0.8, pairs)
    assert report.max_violation <= 1e-9
    assert report.passed


def test_firm_nonexpansive_coincident_pair():
    x = np.array([1.0, -2.0])
    assert check_firm_nonexpansive(MonotoneOp.l1(2), 1.0, [(x, x)]).max_violation == 0.0


def test_firm_nonexpansive_rejects_bad_lambda():
    with pytest.raises(ParameterError):
        check_firm_nonexpansive(MonotoneOp.l1(2), 0.0, [])


# -- graph sampling --------------------------------------------------------

def test_sample_graph_zero_operator():
    out = sample_graph(MonotoneOp.zero(3), ConstraintSpec("whole", 3), np.ones(3), 1.0, 5,
                       np.random.default_rng(0))
    assert len(out) == 5
    assert all(np.array_equal(s.value, np.zeros(3)) for s in out)


def test_sample_graph_l1_on_box_against_grid():
    """Each ``(y, v)`` satisfies ``||z||_1 >= ||y||_1 + <v, z - y>`` on a 64-point grid of C."""
    box = ConstraintSpec("box", 2, lower=[-1.0, -1.0], upper=[1.0, 1.0])
    out = sample_graph(MonotoneOp.l1(2), box, np.array([0.2, -0.3]), 2.0, 20,
                       np.random.default_rng(1))
    g = np.linspace(-1.0, 1.0, 8)
    grid = np.array([(a, b) for a in g for b in g])
    for s in out:
        assert box.contains(s.point)
        lin = np.abs(s.point).sum() + (grid - s.point) @ s.value
        assert np.all(np.abs(grid).sum(axis=1) >= lin - 1e-8)


def test_sample_graph_points_in_ball():
    box = ConstraintSpec("pin", 6, n_pinned=2)
    anchor = np.array([1.0, 1.0, 3.0, 0.0, 0.0, -2.0])
    out = sample_graph(MonotoneOp.l1(6), box, anchor, 0.7, 30, np.random.default_rng(2))
    for s in out:
        assert np.linalg.norm(s.point - anchor) <= 0.7 + 1e-10
        assert s.anchor_distance <= 0.7 + 1e-10
        assert box.contains(s.point)


def test_sample_graph_zero_radius():
    a = np.array([0.5, -0.5])
    out = sample_graph(MonotoneOp.l1(2), None, a, 0.0, 4, np.random.default_rng(3))
    assert all(np.array_equal(s.point, a) for s in out)


def test_sample_graph_infeasible_anchor():
    with pytest.raises(PreconditionError):
        sample_graph(MonotoneOp.l1(3), ConstraintSpec("pin", 3, n_pinned=1), np.zeros(3), 1.0, 2,
                     np.random.default_rng(0))


def test_sample_graph_negative_delta():
    with pytest.raises(ParameterError):
        sample_graph(MonotoneOp.l1(2), None, np.zeros(2), -1.0, 2, np.random.default_rng(0))


def test_graph_samples_are_monotone():
    box = ConstraintSpec("box", 3, lower=-1.0, upper=1.0)
    op = MonotoneOp.sum_of(MonotoneOp.l1(3), MonotoneOp.box_cone(-1.0, 1.0, 3))
    out = sample_graph(op, box, np.zeros(3), 2.0, 40, np.random.default_rng(4))
    for a in out:
        for b in out:
            dx, dv = a.point - b.point, a.value - b.value
            assert dv @ dx >= -1e-10 * np.linalg.norm(dx) * np.linalg.norm(dv)


def test_sample_graph_skips_directions_normal_to_affine_set():
    """A direction drawn inside the normal space must not push samples off C."""
    from penfb.problems import make_basis_pursuit

    p = make_basis_pursuit(40, 100, 5, 0.0, seed=0)
    c = p.constraint
    # seed 0 reproduces the first row of the sensing matrix as the first draw
    samples = sample_graph(p.operator, c, c.project(p.x_true), 1.0, 16, np.random.default_rng(0))
    assert all(c.contains(s.point, tol=1e-8) for s in samples)
