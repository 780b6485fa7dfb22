"""Matrix-free scalar (thermal-analog) finite elements on a regular voxel grid.

Voxel arrays have shape ``(nx, ny, nz)`` and node arrays ``(nx+1, ny+1, nz+1)``.
Element-local node ``a`` sits at corner offset ``(a & 1, (a >> 1) & 1, (a >> 2) & 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, InputError

CORNERS = tuple((a & 1, (a >> 1) & 1, (a >> 2) & 1) for a in range(8))


def reference_element(w: float = 1.0) -> np.ndarray:
    """8x8 conduction stiffness of a trilinear cube of width ``w``.

    Integrated with 2x2x2 Gauss quadrature on the unit cube; in 3D the
    Laplacian stiffness scales linearly with the element width.
    """
    g = 0.5 / np.sqrt(3.0)
    pts = (0.5 - g, 0.5 + g)
    k = np.zeros((8, 8))
    for x in pts:
        for y in pts:
            for z in pts:
                grad = np.empty((8, 3))
                for a, (i, j, l) in enumerate(CORNERS):
                    sx = (x if i else 1.0 - x, 1.0 if i else -1.0)
                    sy = (y if j else 1.0 - y, 1.0 if j else -1.0)
                    sz = (z if l else 1.0 - z, 1.0 if l else -1.0)
                    grad[a] = (sx[1] * sy[0] * sz[0], sx[0] * sy[1] * sz[0], sx[0] * sy[0] * sz[1])
                k += grad @ grad.T / 8.0
    k = 0.5 * (k + k.T)
    k[np.abs(k) < 1e-14] = 0.0  # quadrature round-off on the exactly-zero couplings
    return k * w


def _node_views(u: np.ndarray, shape):
    nx, ny, nz = shape
    return [u[i:i + nx, j:j + ny, l:l + nz] for i, j, l in CORNERS]


def node_shape(shape) -> tuple[int, int, int]:
    return tuple(int(n) + 1 for n in shape)


def element_energy(u: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    """Per-element ``u_e^T k u_e`` (unit stiffness multiplier)."""
    ue = _node_views(u, shape)
    out = np.zeros(tuple(shape))
    for a in range(8):
        ku = np.zeros(tuple(shape))
        for b in range(8):
            if k[a, b] != 0.0:
                ku += k[a, b] * ue[b]
        out += ue[a] * ku
    return out


class StiffnessOperator:
    """Applies ``K = sum_i E_i k_i``, gathered into a 21-point node stencil.

    Dirichlet nodes are eliminated: their rows and columns are zeroed and the
    diagonal set to one. The stencil is stored as a sparse matrix whose
    diagonals are the per-offset coupling coefficients, which avoids a full
    element-by-element assembly.
    """

    def __init__(self, shape, w: float, E: np.ndarray, dirichlet: np.ndarray):
        self.shape = tuple(int(n) for n in shape)
        self.k = reference_element(w)
        self.E = np.asarray(E, dtype=float).reshape(self.shape)
        nshape = node_shape(self.shape)
        self.dirichlet = np.asarray(dirichlet, dtype=bool).reshape(nshape)
        self.free = ~self.dirichlet
        fr = self.free.ravel().astype(float)

        diag = np.zeros(nshape)
        dv = _node_views(diag, self.shape)
        for a in range(8):
            dv[a] += self.E * self.k[a, a]
        self._diag = np.where(self.free, diag, 1.0)
        # coupling of node n with n + off, for offsets whose first nonzero entry is positive;
        # entries whose partner falls outside the lattice stay zero
        coeff = {}
        for a in range(8):
            for b in range(8):
                off = tuple(cb - ca for ca, cb in zip(CORNERS[a], CORNERS[b]))
                if a == b or self.k[a, b] == 0.0 or next(o for o in off if o) < 0:
                    continue
                c = coeff.setdefault(off, np.zeros(nshape))
                _node_views(c, self.shape)[a][...] += self.k[a, b] * self.E
        strides = (nshape[1] * nshape[2], nshape[2], 1)
        n = int(np.prod(nshape))
        diagonals = {0: self._diag.ravel().copy()}
        for off in sorted(coeff):
            f = int(np.dot(off, strides))
            c = coeff[off].ravel()
            c = c * fr * np.roll(fr, -f)  # zero couplings that touch a fixed node
            upper = np.zeros(n)
            upper[f:] = c[:n - f]  # column-aligned storage: A[i, i + f] = upper[i + f]
            # thin lattices can map two offsets to one flat offset; their entries never overlap
            diagonals[f] = diagonals.get(f, 0.0) + upper
            diagonals[-f] = diagonals.get(-f, 0.0) + c
        keys = sorted(diagonals)
        self.matrix = sp.dia_matrix((np.array([diagonals[k] for k in keys]), np.array(keys)),
                                    shape=(n, n)).tocsr()

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return (self.matrix @ u.ravel()).reshape(self.free.shape)

    def diagonal(self) -> np.ndarray:
        return self._diag.copy()


def dot(a: np.ndarray, b: np.ndarray) -> float:
    # pairwise summation, independent of BLAS threading
    return float(np.sum(a * b))


@dataclass
class FemSolution:
    u: np.ndarray
    iterations: int
    residual: float


def solve(grid, E, cond, tol: float = 1e-6, max_iter: int | None = None,
          x0: np.ndarray | None = None) -> FemSolution:
    """Solve ``K U = F`` with Jacobi-preconditioned conjugate gradients.

    ``grid`` needs ``dims`` and ``w``; ``cond`` needs node-shaped ``loads`` and
    ``dirichlet``. ``x0`` warm-starts the iteration.
    """
    shape = tuple(grid.dims)
    E = np.asarray(E, dtype=float)
    if E.size != int(np.prod(shape)):
        raise InputError("stiffness array does not match grid")
    if not np.all(E > 0) or not np.all(np.isfinite(E)):
        raise InputError("element stiffness multipliers must be finite and positive")
    dirichlet = np.asarray(cond.dirichlet, dtype=bool).reshape(node_shape(shape))
    if not dirichlet.any():
        raise InputError("no Dirichlet nodes: stiffness operator is singular")
    op = StiffnessOperator(shape, grid.w, E, dirichlet)
    f = np.where(dirichlet, 0.0, np.asarray(cond.loads, dtype=float).reshape(dirichlet.shape))
    if max_iter is None:
        max_iter = max(10 * int(round(np.cbrt(E.size))), 10)

    fnorm = np.sqrt(dot(f, f))
    if fnorm == 0.0:
        return FemSolution(np.zeros_like(f), 0, 0.0)

    x = np.zeros_like(f) if x0 is None else np.where(dirichlet, 0.0, np.asarray(x0, dtype=float))
    inv_diag = 1.0 / op.diagonal()
    r = f - op.apply(x)
    rnorm = np.sqrt(dot(r, r))
    if rnorm <= tol * fnorm:
        return FemSolution(x, 0, rnorm / fnorm)
    z = inv_diag * r
    p = z.copy()
    rz = dot(r, z)
    for it in range(1, max_iter + 1):
        q = op.apply(p)
        step = rz / dot(p, q)
        x += step * p
        r -= step * q
        rnorm = np.sqrt(dot(r, r))
        if rnorm <= tol * fnorm:
            return FemSolution(x, it, rnorm / fnorm)
        z = inv_diag * r
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError("conjugate gradients did not converge", rnorm / fnorm, max_iter)


def compliance(grid, E, cond, u: np.ndarray) -> float:
    """``sum_i E_i u_i^T k_i u_i``."""
    shape = tuple(grid.dims)
    k = reference_element(grid.w)
    energy = element_energy(np.asarray(u).reshape(node_shape(shape)), k, shape)
    return float(np.sum(np.asarray(E, dtype=float).reshape(shape) * energy))


def assemble_stiffness(shape, w: float, E: np.ndarray, dirichlet: np.ndarray | None = None) -> sp.csr_matrix:
    """Explicit sparse ``K`` (with the same Dirichlet elimination), for checking."""
    shape = tuple(int(n) for n in shape)
    nshape = node_shape(shape)
    ids = np.arange(int(np.prod(nshape))).reshape(nshape)
    edofs = np.stack([v.ravel() for v in _node_views(ids, shape)], axis=1)
    k = reference_element(w)
    vals = np.asarray(E, dtype=float).ravel()[:, None, None] * k[None]
    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    K = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(ids.size, ids.size)).tocsr()
    if dirichlet is not None:
        d = np.asarray(dirichlet, dtype=bool).ravel()
        keep = sp.diags((~d).astype(float))
        K = (keep @ K @ keep + sp.diags(d.astype(float))).tocsr()
    return K
