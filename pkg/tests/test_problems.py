import numpy as np
import pytest
from shapely.geometry import LineString, box

from penfb.errors import InputError, ParameterError
from penfb.problems import (
    make_basis_pursuit,
    make_bilevel_quadratic,
    make_radon,
    phantom,
    radon_geometry,
    radon_matrix,
    radon_row,
)
from penfb.solver import Options, run
from penfb.sparse import SparseMatrix
from penfb.stochastic import NoiseModel, Schedule


# -- basis pursuit ---------------------------------------------------------

def test_basis_pursuit_shapes_and_sparsity():
    p = make_basis_pursuit(40, 100, 5, 0.0, seed=3)
    assert p.penalty.matrix.shape == (40, 100)
    assert np.count_nonzero(p.x_true) == 5
    assert p.penalty.value(p.x_true) <= 1e-24
    assert p.known_solution is None
    assert p.audit()


def test_basis_pursuit_zero_problem_stays_at_zero():
    p = make_basis_pursuit(6, 10, 0, 0.0, seed=0)
    assert np.array_equal(p.x_true, np.zeros(10))
    assert np.array_equal(p.penalty.rhs, np.zeros(6))
    tr = run(p, Schedule.standard(p.penalty.l_spectral), NoiseModel.off(), 200, 0, 200)
    assert np.array_equal(tr.final.x, np.zeros(10))


def test_basis_pursuit_orthonormal_recovers_truth():
    p = make_basis_pursuit(20, 20, 4, 0.0, seed=1, orthonormal=True)
    a = p.penalty.matrix
    assert np.allclose(a.T @ a, np.eye(20), atol=1e-12)
    tr = run(p, Schedule.standard(p.penalty.l_spectral), NoiseModel.off(), 50000, 0, 50000)
    assert np.linalg.norm(tr.final.x - p.x_true) < 1e-3


def test_basis_pursuit_minibatches_run():
    p = make_basis_pursuit(40, 100, 5, 0.0, seed=0)
    sched = Schedule.standard(p.penalty.l_spectral, L_step=p.penalty.minibatch_lipschitz(4))
    tr = run(p, sched, NoiseModel.asv(0.5, 0.75), 500, 0, 100, options=Options(batch_size=4))
    assert not tr.diverged


@pytest.mark.parametrize("args", [(10, 5, 2), (5, 10, 11), (0, 4, 1)])
def test_basis_pursuit_invalid_dims(args):
    with pytest.raises(ParameterError):
        make_basis_pursuit(*args)


# -- bilevel quadratic -----------------------------------------------------

def test_bilevel_solution():
    p = make_bilevel_quadratic(5, 2)
    assert np.array_equal(p.known_solution, [1.0, 1.0, 50.0, 50.0, 50.0])
    assert p.phi_min == 98.0
    assert p.audit()


@pytest.mark.parametrize("d, j", [(2, 1), (7, 3), (20, 5), (30, 29)])
def test_bilevel_solution_feasible(d, j):
    p = make_bilevel_quadratic(d, j)
    assert p.penalty.value(p.known_solution) == 0.0
    assert p.audit()


def test_bilevel_grid_search():
    """Exhaustive 200 x 200 grid over ``{x : x_1 = 1}`` finds ``(1, 50, 50)``."""
    p = make_bilevel_quadratic(3, 1)
    g = np.linspace(0.0, 99.5, 200)
    assert 50.0 in g
    x2, x3 = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([np.ones_like(x2), x2, x3], axis=-1).reshape(-1, 3)
    vals = p.phi(pts)
    best = pts[np.argmin(vals)]
    assert np.array_equal(best, p.known_solution)
    assert vals.min() == p.phi_min


@pytest.mark.parametrize("d, j", [(3, 0), (3, 3)])
def test_bilevel_invalid(d, j):
    with pytest.raises(ParameterError):
        make_bilevel_quadratic(d, j)


# -- Radon -----------------------------------------------------------------

def test_radon_full_scale_dimensions():
    angles, offsets = radon_geometry(128, 32, 100)
    assert angles.size * offsets.size == 3200
    assert np.all((angles >= 0) & (angles < np.pi))


def test_radon_desk_scale_dimensions():
    p = make_radon(32, 16, 48)
    assert p.penalty.matrix.shape == (768, 1024)
    assert p.dim == 1024


def test_radon_zero_phantom():
    p = make_radon(8, 4, 10, "zero")
    assert np.array_equal(p.penalty.rhs, np.zeros(40))
    tr = run(p, Schedule.standard(p.penalty.l_spectral), NoiseModel.off(), 100, 0, 100)
    assert np.array_equal(tr.final.x, np.zeros(64))


def test_radon_horizontal_ray_through_pixel_row():
    n = 8
    idx, w = radon_row(0.0, 0.5, n)      # y = 0.5 is the centre of row n/2
    assert np.array_equal(idx, np.arange(n) + (n // 2) * n)
    assert np.allclose(w, 1.0)
    assert w.sum() == pytest.approx(n)


def test_radon_vertical_ray_through_pixel_column():
    n = 8
    idx, w = radon_row(np.pi / 2, -1.5, n)   # x = 1.5 is the centre of column n/2 + 1
    assert np.array_equal(idx, np.arange(n) * n + n // 2 + 1)
    assert np.allclose(w, 1.0)


def test_radon_chord_length_oracle():
    rng = np.random.default_rng(0)
    n = 16
    square = box(-n / 2, -n / 2, n / 2, n / 2)
    for _ in range(300):
        th = rng.uniform(0, np.pi)
        s = rng.uniform(-n * 0.75, n * 0.75)
        idx, w = radon_row(th, s, n)
        assert np.all(w >= 0)
        u = np.array([np.cos(th), np.sin(th)])
        p0 = s * np.array([-u[1], u[0]])
        chord = LineString([p0 - 100 * u, p0 + 100 * u]).intersection(square).length
        assert w.sum() == pytest.approx(chord, abs=1e-9)


def test_radon_pixel_lengths_match_shapely():
    rng = np.random.default_rng(1)
    n = 6
    for _ in range(30):
        th, s = rng.uniform(0, np.pi), rng.uniform(-3, 3)
        idx, w = radon_row(th, s, n)
        u = np.array([np.cos(th), np.sin(th)])
        p0 = s * np.array([-u[1], u[0]])
        line = LineString([p0 - 100 * u, p0 + 100 * u])
        dense = np.zeros(n * n)
        dense[idx] = w
        for r in range(n):
            for c in range(n):
                cell = box(c - n / 2, r - n / 2, c + 1 - n / 2, r + 1 - n / 2)
                assert dense[r * n + c] == pytest.approx(line.intersection(cell).length, abs=1e-9)


def test_radon_adjoint():
    a = radon_matrix(16, 8, 24)
    rng = np.random.default_rng(2)
    for _ in range(10):
        x, u = rng.standard_normal(256), rng.standard_normal(192)
        lhs, rhs = a.matvec(x) @ u, x @ a.rmatvec(u)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_radon_disk_constant_across_angles():
    """Each angle's projection of a centred disk carries the same total mass.

    Single detector bins still vary by a few percent because the disk is
    pixelated, so the 2% spread is checked on per-angle totals.
    """
    n, m, k = 64, 12, 40
    a = radon_matrix(n, m, k)
    sino = a.matvec(phantom("disk", n)).reshape(m, k)
    totals = sino.sum(axis=1)
    assert (totals.max() - totals.min()) / totals.mean() < 0.02


def test_phantoms():
    for kind in ("zero", "disk", "blocks", "shepp-logan-like"):
        img = phantom(kind, 32, seed=1)
        assert img.shape == (1024,) and np.all(np.isfinite(img))
    assert np.count_nonzero(phantom("blocks", 32)) < 1024 / 2
    with pytest.raises(ParameterError):
        phantom("cat", 32)


def test_radon_invalid():
    with pytest.raises(ParameterError):
        make_radon(4, 2, 2)


# -- sparse matrices -------------------------------------------------------

def test_sparse_matches_dense():
    rng = np.random.default_rng(3)
    dense = rng.standard_normal((7, 8)) * (rng.random((7, 8)) < 0.4)
    s = SparseMatrix.from_dense(dense)
    x, u = rng.standard_normal(8), rng.standard_normal(7)
    assert np.array_equal(s.to_dense(), dense)
    assert np.allclose(s.matvec(x), dense @ x)
    assert np.allclose(s.rmatvec(u), dense.T @ u)
    assert np.allclose(s.T.to_dense(), dense.T)
    assert np.allclose(s.rows([1, 4]).toarray(), dense[[1, 4]])
    assert s.nnz == np.count_nonzero(dense)
    assert s.frobenius() == pytest.approx(np.linalg.norm(dense))


def test_radon_matrix_matches_dense_rows():
    a = radon_matrix(8, 3, 6)
    angles, offsets = radon_geometry(8, 3, 6)
    dense = a.to_dense()
    for r, (th, s) in enumerate((th, s) for th in angles for s in offsets):
        row = np.zeros(64)
        idx, w = radon_row(th, s, 8)
        row[idx] = w
        assert np.array_equal(dense[r], row)
    assert np.all(np.diff(a.indptr) >= 0)


def test_sparse_validation():
    with pytest.raises(InputError):
        SparseMatrix(np.array([0, 2]), np.array([0]), np.array([1.0]), (1, 2))
    with pytest.raises(InputError):
        SparseMatrix(np.array([0, 1]), np.array([3]), np.array([1.0]), (1, 2))
    with pytest.raises(InputError):
        SparseMatrix(np.array([0, 1]), np.array([0]), np.array([np.nan]), (1, 2))


def test_coordinate_lines():
    s = SparseMatrix.from_dense(np.array([[0.0, 2.5], [1.0, 0.0]]))
    assert list(s.coordinate_lines()) == ["0 1 2.5", "1 0 1.0"]
