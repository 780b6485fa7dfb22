import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topotree import fem
from topotree.errors import ConvergenceError, InputError
from topotree.synthetic import unit_grid
from topotree.voxelgrid import NodalConditions

M1 = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])


def kron_element(w=1.0):
    # local node a = i + 2j + 4l, so x is the fastest (rightmost) factor
    k = np.kron(M1, np.kron(M1, K1)) + np.kron(M1, np.kron(K1, M1)) + np.kron(K1, np.kron(M1, M1))
    return w * k


def dense_K(shape, w, E):
    nshape = fem.node_shape(shape)
    ids = np.arange(np.prod(nshape)).reshape(nshape)
    K = np.zeros((ids.size, ids.size))
    ke = kron_element(w)
    for i, j, l in np.ndindex(*shape):
        dofs = [ids[i + a, j + b, l + c] for a, b, c in fem.CORNERS]
        K[np.ix_(dofs, dofs)] += E[i, j, l] * ke
    return K


def test_reference_element_matches_tensor_product():
    for w in (1.0, 0.25, 3.0):
        assert np.allclose(fem.reference_element(w), kron_element(w), atol=1e-14, rtol=0)


def test_reference_element_entries():
    k12 = 12 * fem.reference_element(1.0)
    for a in range(8):
        for b in range(8):
            hamming = bin(a ^ b).count("1")
            expect = {0: 4.0, 1: 0.0, 2: -1.0, 3: -1.0}[hamming]
            assert k12[a, b] == pytest.approx(expect, abs=1e-12)


def test_element_rows_sum_to_zero():
    k = fem.reference_element(0.7)
    assert np.abs(k.sum(axis=1)).max() <= 1e-12
    assert np.allclose(k, k.T, atol=0)


@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 4), (5, 5, 5), (5, 1, 3)])
def test_operator_matches_dense_assembly(shape):
    rng = np.random.default_rng(sum(shape))
    E = rng.uniform(0.01, 2.0, shape)
    nshape = fem.node_shape(shape)
    d = rng.random(nshape) < 0.25
    K = dense_K(shape, 0.5, E)
    free = ~d.ravel()
    K[~free, :] = 0
    K[:, ~free] = 0
    K[~free, ~free] = 1.0
    op = fem.StiffnessOperator(shape, 0.5, E, d)
    for _ in range(3):
        u = rng.standard_normal(nshape)
        assert np.abs(op.apply(u).ravel() - K @ u.ravel()).max() <= 1e-12
    assert np.abs(op.diagonal().ravel() - np.diag(K)).max() <= 1e-12
    Ks = fem.assemble_stiffness(shape, 0.5, E, d).toarray()
    assert np.abs(Ks - K).max() <= 1e-12


def test_single_element_solve_matches_dense():
    grid = unit_grid((1, 1, 1), w=0.8)
    E = np.array([[[0.6]]])
    d = np.zeros((2, 2, 2), bool)
    d[:, :, 0] = True
    loads = np.zeros((2, 2, 2))
    loads[1, 1, 1] = 1.0
    loads[0, 1, 1] = 0.5
    cond = NodalConditions(loads, d)
    sol = fem.solve(grid, E, cond, tol=1e-14)
    K = 0.6 * kron_element(0.8)
    free = ~d.ravel()
    u = np.zeros(8)
    u[free] = np.linalg.solve(K[np.ix_(free, free)], loads.ravel()[free])
    assert np.abs(sol.u.ravel() - u).max() <= 1e-10


def test_compliance_equals_load_work():
    rng = np.random.default_rng(3)
    grid = unit_grid((4, 3, 5))
    E = rng.uniform(0.1, 1.0, grid.dims)
    loads = np.zeros(grid.node_dims)
    loads[2, 1, 5] = 1.0
    loads[4, 3, 4] = 2.0
    d = np.zeros(grid.node_dims, bool)
    d[:, :, 0] = True
    cond = NodalConditions(loads, d)
    sol = fem.solve(grid, E, cond, tol=1e-12)
    c = fem.compliance(grid, E, cond, sol.u)
    assert c == pytest.approx(float(np.sum(loads * sol.u)), rel=1e-9)
    assert np.all(sol.u[d] == 0)


def test_element_energy_matches_explicit_quadratic_form():
    rng = np.random.default_rng(7)
    shape = (2, 2, 3)
    u = rng.standard_normal(fem.node_shape(shape))
    k = fem.reference_element(1.3)
    energy = fem.element_energy(u, k, shape)
    for i, j, l in np.ndindex(*shape):
        ue = np.array([u[i + a, j + b, l + c] for a, b, c in fem.CORNERS])
        assert energy[i, j, l] == pytest.approx(ue @ k @ ue, rel=1e-12, abs=1e-14)


def test_warm_start_reaches_same_solution():
    grid = unit_grid((6, 6, 6))
    E = np.full(grid.dims, 0.5)
    loads = np.zeros(grid.node_dims)
    loads[3, 3, 6] = 1.0
    d = np.zeros(grid.node_dims, bool)
    d[:, :, 0] = True
    cond = NodalConditions(loads, d)
    cold = fem.solve(grid, E, cond, tol=1e-10)
    warm = fem.solve(grid, E, cond, tol=1e-10, x0=cold.u)
    assert warm.iterations <= 1
    assert np.allclose(cold.u, warm.u, atol=1e-8)


def test_nonconvergence_raises():
    grid = unit_grid((8, 8, 8))
    E = np.random.default_rng(0).uniform(1e-4, 1.0, grid.dims)
    loads = np.zeros(grid.node_dims)
    loads[4, 4, 8] = 1.0
    d = np.zeros(grid.node_dims, bool)
    d[:, :, 0] = True
    with pytest.raises(ConvergenceError) as info:
        fem.solve(grid, E, NodalConditions(loads, d), tol=1e-12, max_iter=2)
    assert info.value.iterations == 2


def test_bad_inputs():
    grid = unit_grid((2, 2, 2))
    loads = np.ones(grid.node_dims)
    with pytest.raises(InputError):
        fem.solve(grid, np.ones(grid.dims), NodalConditions(loads, np.zeros(grid.node_dims, bool)))
    d = np.zeros(grid.node_dims, bool)
    d[0, 0, 0] = True
    with pytest.raises(InputError):
        fem.solve(grid, np.zeros(grid.dims), NodalConditions(loads, d))
    zero = fem.solve(grid, np.ones(grid.dims), NodalConditions(np.zeros(grid.node_dims), d))
    assert zero.iterations == 0 and not zero.u.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_operator_symmetric_positive(nx, ny, nz, seed):
    rng = np.random.default_rng(seed)
    shape = (nx, ny, nz)
    d = np.zeros(fem.node_shape(shape), bool)
    d[:, :, 0] = True
    op = fem.StiffnessOperator(shape, 1.0, rng.uniform(0.01, 1, shape), d)
    u, v = rng.standard_normal((2, *d.shape))
    assert fem.dot(v, op.apply(u)) == pytest.approx(fem.dot(u, op.apply(v)), rel=1e-10, abs=1e-12)
    assert fem.dot(u, op.apply(u)) > 0
