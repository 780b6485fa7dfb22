"""SIMP topology optimisation of a scalar (thermal-analog) load problem.

One design iteration is::

    x --filter--> x_tilde --heaviside--> x_bar --convolve--> A
    E_tilde = A**alpha * (E_V + x_bar**p * (E_S - E_V))
    K(E_tilde) U = F,  c = F.U
    dc/dx (chain rule back through the three maps)  ->  reciprocal (OC) update

All distances are measured between voxel centres in units of the voxel width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, signal

from . import fem
from .errors import ConfigError, InputError, NumericalError

log = logging.getLogger(__name__)


def linear_ramp(start: float, stop: float, n: int) -> list[float]:
    if n <= 1:
        return [float(stop)] * max(n, 0)
    return [float(v) for v in np.linspace(start, stop, n)]


def stepped_ramp(start: float, stop: float, n: int, steps: int) -> list[float]:
    """Piecewise-constant ramp with ``steps`` plateaus (continuation held fixed within each)."""
    levels = linear_ramp(start, stop, steps)
    return [levels[min(i * steps // n, steps - 1)] for i in range(n)]


@dataclass
class OptimizerConfig:
    v_max: float | None = None
    alpha: float = 1.0
    iterations: int = 20
    p_schedule: list[float] | None = None
    beta_schedule: list[float] | None = None
    R: float = 1.75
    E_S: float = 1.0
    E_V: float = 1e-4
    kernel_radius: float = 8.0
    move: float = 0.2
    damping: float = 0.5
    eps_A: float = 1e-6
    cg_tol: float = 1e-6
    cg_max_iter: int | None = None
    max_backtracks: int = 8

    def __post_init__(self):
        if self.p_schedule is None:
            self.p_schedule = linear_ramp(1.0, 3.0, self.iterations)
        if self.beta_schedule is None:
            self.beta_schedule = linear_ramp(1.0, 4.0, self.iterations)
        self.p_schedule = [float(v) for v in self.p_schedule]
        self.beta_schedule = [float(v) for v in self.beta_schedule]
        self.validate()

    def validate(self):
        if len(self.p_schedule) != self.iterations or len(self.beta_schedule) != self.iterations:
            raise ConfigError("p and beta schedules must have one entry per iteration")
        for name, sched in (("p", self.p_schedule), ("beta", self.beta_schedule)):
            if any(v < 1.0 for v in sched):
                raise ConfigError(f"{name} schedule values must be >= 1")
            if any(b < a for a, b in zip(sched, sched[1:])):
                raise ConfigError(f"{name} schedule must be nondecreasing")
        if not 0.0 < self.E_V < self.E_S:
            raise ConfigError("require 0 < E_V < E_S")
        if self.R <= 0:
            raise ConfigError("filter radius R must be positive")
        if self.kernel_radius < 1:
            raise ConfigError("kernel_radius must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0 < self.damping <= 1 or self.move <= 0:
            raise ConfigError("damping must lie in (0, 1] and move must be positive")
        if self.max_backtracks < 0:
            raise ConfigError("max_backtracks must be >= 0")

    def with_schedules(self, p: float, beta: float) -> "OptimizerConfig":
        """Same config with constant continuation parameters."""
        return replace(self, p_schedule=[p] * self.iterations, beta_schedule=[beta] * self.iterations)


# -- kernels ---------------------------------------------------------------

def _offset_grid(radius: float) -> np.ndarray:
    n = int(np.floor(radius))
    ax = np.arange(-n, n + 1, dtype=float)
    dx, dy, dz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def filter_kernel(R: float) -> np.ndarray:
    """Cone weights ``(R - r) / R`` for centre distances ``r < R``."""
    r = _offset_grid(R)
    return np.where(r < R, (R - r) / R, 0.0)


def branch_kernel(kernel_radius: float) -> np.ndarray:
    """Reciprocal-distance weights ``1 / max(r, 1)`` for ``r <= kernel_radius``."""
    r = _offset_grid(kernel_radius)
    return np.where(r <= kernel_radius, 1.0 / np.maximum(r, 1.0), 0.0)


# -- forward maps ----------------------------------------------------------

def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.correlate(x, kernel, mode="constant", cval=0.0)


def filter_weight_sums(shape, R: float) -> np.ndarray:
    return _correlate(np.ones(shape), filter_kernel(R))


def density_filter(x: np.ndarray, R: float = 1.75) -> np.ndarray:
    """Weighted neighbourhood mean of ``x`` with cone weights of radius ``R``."""
    x = np.asarray(x, dtype=float)
    kernel = filter_kernel(R)
    return _correlate(x, kernel) / _correlate(np.ones_like(x), kernel)


def heaviside(x_tilde, beta: float):
    """Smooth tanh projection; fixes 0, 0.5 and 1 for every ``beta``."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    t = np.tanh(0.5 * beta)
    return (t + np.tanh(beta * (np.asarray(x_tilde, dtype=float) - 0.5))) / (2.0 * t)


def heaviside_derivative(x_tilde, beta: float):
    t = np.tanh(0.5 * beta)
    return beta * (1.0 - np.tanh(beta * (np.asarray(x_tilde, dtype=float) - 0.5)) ** 2) / (2.0 * t)


def convolution(x_bar: np.ndarray, kernel_radius: float = 8.0) -> np.ndarray:
    """``A_i = sum_j x_bar_j / max(r_ij, 1)`` truncated at ``kernel_radius``."""
    x_bar = np.asarray(x_bar, dtype=float)
    return signal.fftconvolve(x_bar, branch_kernel(kernel_radius), mode="same")


def simp_stiffness(x_bar, A, config: OptimizerConfig, p: float):
    """``A**alpha * (E_V + x_bar**p * (E_S - E_V))`` with ``A`` clamped to ``eps_A``."""
    E = config.E_V + np.asarray(x_bar, dtype=float) ** p * (config.E_S - config.E_V)
    if config.alpha == 0:
        return E
    return np.maximum(A, config.eps_A) ** config.alpha * E


@dataclass
class DensityField:
    x: np.ndarray
    x_tilde: np.ndarray
    x_bar: np.ndarray
    A: np.ndarray
    E: np.ndarray  # penalised stiffness before the branch multiplier
    E_tilde: np.ndarray
    p: float
    beta: float


def evaluate_design(x: np.ndarray, config: OptimizerConfig, p: float, beta: float) -> DensityField:
    x = np.asarray(x, dtype=float)
    x_tilde = density_filter(x, config.R)
    x_bar = heaviside(x_tilde, beta)
    A = convolution(x_bar, config.kernel_radius) if config.alpha != 0 else np.ones_like(x_bar)
    E = config.E_V + x_bar ** p * (config.E_S - config.E_V)
    E_tilde = simp_stiffness(x_bar, A, config, p)
    return DensityField(x, x_tilde, x_bar, A, E, E_tilde, p, beta)


# -- sensitivities ---------------------------------------------------------

def sensitivities(field: DensityField, energy: np.ndarray, config: OptimizerConfig) -> np.ndarray:
    """Exact ``dc/dx`` for compliance ``c = sum_i E_tilde_i u_i^T k u_i``.

    ``energy`` holds the per-element ``u_i^T k u_i`` of the solved state.
    Every returned value is <= 0.
    """
    p, alpha = field.p, config.alpha
    x_bar = field.x_bar
    # direct SIMP term
    if alpha == 0:
        dEt = p * x_bar ** (p - 1) * (config.E_S - config.E_V)
    else:
        A = np.maximum(field.A, config.eps_A)
        dEt = A ** alpha * p * x_bar ** (p - 1) * (config.E_S - config.E_V)
    dc_dxbar = -dEt * energy
    if alpha != 0:
        # branch-multiplier term, zero where A is clamped
        active = field.A > config.eps_A
        weight = np.where(active, alpha * np.maximum(field.A, config.eps_A) ** (alpha - 1) * field.E * energy, 0.0)
        dc_dxbar -= signal.fftconvolve(weight, branch_kernel(config.kernel_radius), mode="same")
    g = heaviside_derivative(field.x_tilde, field.beta) * dc_dxbar
    kernel = filter_kernel(config.R)
    sums = _correlate(np.ones_like(g), kernel)
    dc = _correlate(g / sums, kernel)
    # FFT round-off can leave +1e-18 values where the true gradient is zero
    return np.minimum(dc, 0.0)


# -- update ----------------------------------------------------------------

def update(x, dc, config: OptimizerConfig, x_max, v_max: float | None = None) -> np.ndarray:
    """Damped reciprocal (optimality-criteria) step under volume and box constraints.

    ``x' = clamp(x * (-dc / lam)**damping)`` to ``[x - move, x + move]`` and
    ``[0, x_max]``; the multiplier is bisected so the volume meets the budget
    without ever exceeding it.
    """
    x = np.asarray(x, dtype=float)
    dc = np.asarray(dc, dtype=float)
    x_max = np.broadcast_to(np.asarray(x_max, dtype=float), x.shape)
    v_max = config.v_max if v_max is None else v_max
    if v_max is None:
        raise ConfigError("volume budget v_max is not set")
    if np.any(dc > 0):
        raise NumericalError("positive compliance sensitivity: reciprocal update is not monotone")
    lo = np.maximum(0.0, x - config.move)
    hi = np.minimum(x_max, x + config.move)
    hi = np.maximum(hi, lo)
    # x'(mu) = clip(mu * base), mu = lam**(-damping) is monotone in volume
    base = x * (-dc) ** config.damping
    target = min(v_max, float(np.sum(x_max)))

    def volume(mu):
        return float(np.sum(np.clip(mu * base, lo, hi)))

    if float(np.sum(hi)) <= target:
        return hi.copy()
    if float(np.sum(lo)) > target:
        # an infeasible start: the budget outranks the move limit
        lo = np.zeros_like(lo)
    pos = base > 0
    mu_hi = float(np.max(hi[pos] / base[pos])) if pos.any() else 0.0
    if volume(mu_hi) < target:
        # graded voxels are all at their upper bound; zero-gradient voxels are
        # indifferent, so they take up the rest of the budget evenly
        out = np.clip(mu_hi * base, lo, hi)
        room = np.where(pos, 0.0, hi - lo)
        t = min(1.0, (target - float(np.sum(out))) / float(np.sum(room)))
        while t > 0 and float(np.sum(out + t * room)) > target:
            t *= 1.0 - 1e-12
        return out + t * room
    # base spans many decades, so bracket and bisect the multiplier geometrically
    mu_lo = mu_hi
    while mu_lo > 0 and volume(mu_lo) > target:
        mu_hi = mu_lo
        mu_lo *= 2.0 ** -64
    for _ in range(200):
        mid = float(np.sqrt(mu_lo * mu_hi)) if mu_lo > 0 else 0.5 * mu_hi
        if mid <= mu_lo or mid >= mu_hi:
            break
        if volume(mid) > target:
            mu_hi = mid
        else:
            mu_lo = mid
    return np.clip(mu_lo * base, lo, hi)


# -- optimisation loop -----------------------------------------------------

@dataclass
class OptimizationResult:
    field: DensityField
    log: list[dict] = field(default_factory=list)
    u: np.ndarray | None = None

    @property
    def x_bar(self) -> np.ndarray:
        return self.field.x_bar


def initial_design(x_max: np.ndarray, v_max: float) -> np.ndarray:
    total = float(np.sum(x_max))
    return x_max * min(1.0, v_max / total) if total > 0 else np.zeros_like(x_max)


def optimize(grid, cond, config: OptimizerConfig, callback=None) -> OptimizationResult:
    """Run the continuation loop for ``config.iterations`` design updates.

    ``grid`` needs ``dims``, ``w`` and ``x_max``; ``cond`` needs ``loads`` and
    ``dirichlet`` on the node lattice. Returns the final projected density and
    one log record per iteration.
    """
    shape = tuple(grid.dims)
    x_max = np.asarray(grid.x_max, dtype=float).reshape(shape)
    if not np.any(np.asarray(cond.loads) > 0):
        raise InputError("no loaded nodes")
    if not np.any(cond.dirichlet):
        raise InputError("no Dirichlet nodes")
    v_max = config.v_max
    if v_max is None:
        raise ConfigError("volume budget v_max is not set")
    cap = float(np.sum(x_max))
    if v_max > cap:
        log.warning("v_max %.6g exceeds total density cap %.6g; clamping", v_max, cap)
        v_max = cap

    k = fem.reference_element(grid.w)
    x = initial_design(x_max, v_max)
    u = None
    records = []
    fieldv = None
    prev = None  # (x, dc, record, move) of the last accepted step
    it = 0
    while it < config.iterations:
        p, beta = config.p_schedule[it], config.beta_schedule[it]
        fieldv = evaluate_design(x, config, p, beta)
        sol = fem.solve(grid, fieldv.E_tilde, cond, tol=config.cg_tol, max_iter=config.cg_max_iter, x0=u)
        u = sol.u
        energy = fem.element_energy(u, k, shape)
        c = float(np.sum(fieldv.E_tilde * energy))
        if not np.isfinite(c):
            raise NumericalError(f"non-finite compliance at iteration {it}")
        if prev is not None and (p, beta) == (prev[2]["p"], prev[2]["beta"]) and c > prev[2]["compliance"] \
                and prev[3] > config.move * 2.0 ** -config.max_backtracks:
            # the step raised compliance at fixed (p, beta): retry it shorter
            x_old, dc_old, rec_old, move = prev
            move *= 0.5
            x = update(x_old, dc_old, replace(config, move=move), x_max, v_max)
            rec_old["backtracks"] += 1
            rec_old["updated_volume"] = float(np.sum(x))
            prev = (x_old, dc_old, rec_old, move)
            continue
        dc = sensitivities(fieldv, energy, config)
        if not np.all(np.isfinite(dc)):
            raise NumericalError(f"non-finite sensitivities at iteration {it}")
        rec = dict(iteration=it, p=p, beta=beta, compliance=c, volume=float(np.sum(x)),
                   cg_iterations=sol.iterations, backtracks=0)
        records.append(rec)
        log.info("it %d p=%.3f beta=%.3f c=%.6g vol=%.6g cg=%d", it, p, beta, c, rec["volume"], sol.iterations)
        if callback is not None:
            callback(rec, fieldv)
        x_new = update(x, dc, config, x_max, v_max)
        if not np.all(np.isfinite(x_new)):
            raise NumericalError(f"non-finite design at iteration {it}")
        rec["updated_volume"] = float(np.sum(x_new))
        prev = (x, dc, rec, config.move)
        x = x_new
        it += 1
    p, beta = config.p_schedule[-1], config.beta_schedule[-1]
    fieldv = evaluate_design(x, config, p, beta)
    return OptimizationResult(fieldv, records, u)
