"""Mild solutions of delay rough PDEs by windowed Picard iteration.

On the grid the mild formulation becomes the one-step recursion

    y_{j+1} = S_dt y_j + S_dt f_j + w0 F_j + w1 F_{j+1}

with ``f_j`` the rough-convolution germ of ``G(y, y_lag)`` on cell ``j`` and
``w0, w1`` the exact weights of ``int_0^dt S_{dt-s} F ds`` for ``F`` linear
in time across the cell. Picard iteration runs over windows no longer than
the delay, so the lagged argument is always known, and the windows are
concatenated along ``[0, T]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .controlled import (ControlledNormReport, DelayedControlledPath, compose_arrays, constant_history, linear_history,
                         controlled_distance, controlled_distance_report, controlled_norm)
from .driver import DelayedRoughDriver, area_gap, driver_from_fine_path, rough_distance
from .scale import Grid, GridError, max_mode_of, norm_array
from .semigroup import NonlinearitySpec, SemigroupSpec, eval_G
from .sewing import cell_germs, germ_values, sewn_path

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The Picard scheme could not produce an accepted solution."""


class StepTooLarge(SolverError):
    """A Picard window failed to contract."""


@dataclass(frozen=True)
class ModelSpec:
    """One delay rough PDE ``dy = [A y + F(y, y_{t-r})] dt + G(y, y_{t-r}) dX``.

    ``noise_delay=False`` drops the lagged slot of ``G`` (and the delayed
    area), which gives the non-delayed comparison equation.
    """

    semigroup: SemigroupSpec
    F: NonlinearitySpec
    G: NonlinearitySpec
    r: float
    T: float
    theta: float = 0.0
    alpha: float = 0.4
    alpha_tilde: float = 0.35
    alpha_bar: float = 0.35
    alpha_hat: float = 0.35
    noise_delay: bool = True

    @property
    def sigma1(self) -> float:
        return self.F.smoothing

    @property
    def sigma2(self) -> float:
        return self.G.smoothing

    # drift estimate exponent
    @property
    def lambda1(self) -> float:
        return min(1 - 2 * self.alpha_tilde, 1 - self.sigma1)

    # noise estimate exponent
    @property
    def lambda2(self) -> float:
        return min(self.alpha - self.alpha_tilde, self.alpha_tilde - self.sigma2)

    # a priori growth exponent
    @property
    def lambda3(self) -> float:
        return min(self.alpha - self.sigma2, 1 - 2 * self.alpha, 1 - self.sigma1)

    # convolution bound exponent
    @property
    def lambda0(self) -> float:
        return min(self.alpha - self.alpha_tilde, self.alpha_tilde - self.sigma2)

    # convolution stability exponent
    @property
    def lam(self) -> float:
        a, at, s = self.alpha, self.alpha_tilde, self.sigma2
        return min(a - at, at * (a - s) / a, 3 * at - 2 * a - s)

    # delay-convergence exponent
    @property
    def lambda_star(self) -> float:
        a, ab, s = self.alpha, self.alpha_bar, self.sigma2
        return min(1 - self.sigma1, 1 - 2 * a, a - ab, ab * (a - s) / a, 3 * ab - 2 * a - s)

    # stability exponent
    @property
    def nu(self) -> float:
        a, ah, s = self.alpha, self.alpha_hat, self.sigma2
        return min(1 - self.sigma1, 1 - 2 * ah, a - ah, ah * (a - s) / a, 3 * ah - 2 * a - s)

    def exponents(self) -> dict:
        return {name: getattr(self, name) for name in
                ("lambda0", "lambda1", "lambda2", "lambda3", "lam", "lambda_star", "nu")}

    def check(self, regime: str = "existence") -> list[str]:
        """Violated parameter constraints (empty when the model is admissible)."""
        a, s1, s2 = self.alpha, self.sigma1, self.sigma2
        out = []
        if not 1 / 3 < a <= 0.5:
            out.append("alpha must lie in (1/3, 1/2]")
        if not 0 <= s1 < 1:
            out.append("sigma1 must lie in [0, 1)")
        if not s2 < self.alpha_tilde < a:
            out.append("alpha_tilde must lie in (sigma2, alpha)")
        if not s2 < self.alpha_hat < a or 3 * self.alpha_hat - 2 * a - s2 <= 0:
            out.append("alpha_hat must lie in (sigma2, alpha) with 3 alpha_hat - 2 alpha - sigma2 > 0")
        if regime == "convergence":
            ab = self.alpha_bar
            if not a / 2 < s2 < a:
                out.append("sigma2 must lie in (alpha/2, alpha)")
            if not 4 * a / 5 < ab < a or s2 + 2 * ab - 2 * a < 0 or 3 * ab - 2 * a - s2 < 0:
                out.append("alpha_bar violates (4 alpha/5, alpha), sigma2 + 2 alpha_bar >= 2 alpha, "
                           "3 alpha_bar >= 2 alpha + sigma2")
        return out


# ---------------------------------------------------------------------------
# drift


def drift_weights(semigroup: SemigroupSpec, K: int, dt: float):
    """``(S_dt, w0, w1)`` with ``int_0^dt S_{dt-s} F(s) ds = w0 F(0) + w1 F(dt)`` for linear ``F``."""
    x = semigroup.rates(K) * dt
    # the closed forms cancel badly for small x; use the power series there
    small = x < 0.1
    xs = np.where(small, 1.0, x)
    n = np.arange(14)[:, None]
    terms = (-x[None, :]) ** n / np.cumprod(np.r_[1.0, np.arange(1, 14)])[:, None]
    phi1 = np.where(small, (terms / (n + 1)).sum(axis=0), -np.expm1(-xs) / xs)
    phi2 = np.where(small, (terms / (n + 2)).sum(axis=0), (1 - np.exp(-xs) * (1 + xs)) / (xs * xs))
    return np.exp(-x), dt * phi2, dt * (phi1 - phi2)


def eval_F(F: NonlinearitySpec, y, z) -> np.ndarray:
    return eval_G(F, y, z)[..., 0, :]


def drift_integral(F: NonlinearitySpec, semigroup: SemigroupSpec, y: np.ndarray, z: np.ndarray, dt: float) -> np.ndarray:
    """``int_0^t S_{t-s} F(y_s, z_s) ds`` at every node of a path.

    ``y`` and ``z`` hold the path and its lagged values node by node; the
    integrand is interpolated linearly across each cell and integrated
    exactly against the semigroup.
    """
    Fv = eval_F(F, y, z)
    fac, w0, w1 = drift_weights(semigroup, max_mode_of(Fv), dt)
    D = np.zeros_like(Fv, dtype=complex)
    for j in range(Fv.shape[0] - 1):
        D[j + 1] = fac * D[j] + w0 * Fv[j] + w1 * Fv[j + 1]
    return D


# ---------------------------------------------------------------------------
# Picard windows


@dataclass(frozen=True)
class StepRecord:
    t_start: float
    t_end: float
    picard_iterations: int
    contraction_ratio: float


class _State:
    """Global node arrays over ``[-r, T]`` shared by the windows of one solve."""

    def __init__(self, model: ModelSpec, driver: DelayedRoughDriver, Y: np.ndarray, Yp: np.ndarray):
        self.model = model
        self.driver = driver
        self.Y = Y
        self.Yp = Yp
        self.M = Y.shape[-1]
        K = max_mode_of(Y)
        self.fac, self.w0, self.w1 = drift_weights(model.semigroup, K, driver.grid.dt)

    def refresh(self, a: int, b: int):
        """Derivatives and lagged data for nodes ``a..b`` from the current ``Y``."""
        model, m = self.model, self.driver.m
        Yw = self.Y[a: b + 1]
        if model.noise_delay:
            Z = self.Y[a - m: b + 1 - m]
            self.Yp[a: b + 1] = eval_G(model.G, Yw, Z)
            Zp = self.Yp[a - m: b + 1 - m]
        else:
            Z = Yw
            self.Yp[a: b + 1] = eval_G(model.G, Yw, Yw)
            Zp = None
        Zf = self.Y[a - m: b + 1 - m]
        return Yw, Z, Zp, Zf

    def sweep(self, a: int, b: int) -> np.ndarray:
        """One application of the solution map on nodes ``a..b`` (``Y[a]`` held fixed)."""
        drv, m = self.driver, self.driver.m
        Yw, Z, Zp, Zf = self.refresh(a, b)
        mm, mp, mb = compose_arrays(self.model.G, Yw, self.Yp[a: b + 1], Z, Zp)
        j = np.arange(a, b)
        Ad = None if mb is None else drv.cell_delayed_area[j - m]
        cells = germ_values(mm[:-1], mp[:-1], None if mb is None else mb[:-1],
                            drv.X[j + 1] - drv.X[j], drv.cell_area[j], Ad)
        Fv = eval_F(self.model.F, Yw, Zf)
        fac, w0, w1 = self.fac, self.w0, self.w1
        V = np.empty_like(Yw)
        V[0] = Yw[0]
        for k in range(b - a):
            V[k + 1] = fac * (V[k] + cells[k]) + (w0 * Fv[k] + w1 * Fv[k + 1])
        return V

    def window_path(self, a: int, b: int, values: np.ndarray) -> DelayedControlledPath:
        saved = self.Y[a: b + 1].copy()
        self.Y[a: b + 1] = values
        self.refresh(a, b)
        path = DelayedControlledPath(self.driver, a, values.copy(), self.Yp[a: b + 1].copy(), None,
                                     self.model.theta)
        self.Y[a: b + 1] = saved
        return path


def _picard(state: _State, a: int, b: int, max_iter: int, tol: float, ratio_samples: int = 1):
    model = state.model
    dt = state.driver.grid.dt
    fac_k = lambda k: model.semigroup.factors(max_mode_of(state.Y), k * dt)
    U = np.stack([fac_k(k) * state.Y[a] for k in range(b - a + 1)])
    theta_w = model.theta - 2 * model.alpha
    history = [U]
    dists = []
    iters = 0
    converged = False
    for it in range(1, max_iter + 1):
        state.Y[a: b + 1] = U
        V = state.sweep(a, b)
        iters = it
        inc = float(norm_array(V - U, theta_w).max())
        scale = 1.0 + float(norm_array(V, theta_w).max())
        if len(dists) < ratio_samples + 1 and b > a:
            if inc > 1e-9 * scale:
                p_new = state.window_path(a, b, V)
                p_old = state.window_path(a, b, U)
                dists.append(controlled_distance(p_new, p_old, model.alpha_tilde, model.alpha, model.theta))
        U = V
        history.append(U)
        if inc <= tol * scale:
            converged = True
            break
    state.Y[a: b + 1] = U
    state.refresh(a, b)
    ratios = [dists[k + 1] / dists[k] for k in range(len(dists) - 1) if dists[k] > 0]
    ratio = max(ratios) if ratios else 0.0
    return U, iters, ratio, converged


def picard_step(model: ModelSpec, driver: DelayedRoughDriver, history: DelayedControlledPath, y_a,
                step: float, max_iter: int = 100, tol: float = 1e-12):
    """Picard iteration on ``[a, a + step]`` where ``a`` is the last node of ``history``.

    ``history`` covers ``[a - r, a]``. Returns the window path (with
    ``y' = G(y, y_lag)``), the number of sweeps and the observed contraction
    ratio of successive controlled distances. Raises :class:`StepTooLarge`
    if the iteration does not settle with ratio below one.
    """
    dt, m = driver.grid.dt, driver.m
    a = history.stop - 1
    if history.start > a - m:
        raise GridError("history must cover [a - r, a]")
    r_hat = min(model.r, 1.0) if model.r > 0 else 1.0
    if step > r_hat + 1e-12:
        raise ValueError(f"step {step} exceeds r_hat = {r_hat}")
    k = int(round(step / dt))
    b = a + k
    if b >= driver.grid.n_points:
        raise GridError("step runs past T")
    Y = np.zeros((driver.grid.n_points, history.y.shape[-1]), dtype=complex)
    Yp = np.zeros((driver.grid.n_points, driver.d, history.y.shape[-1]), dtype=complex)
    Y[history.start: history.stop] = history.y
    Yp[history.start: history.stop] = history.y_prime
    Y[a] = y_a
    state = _State(model, driver, Y, Yp)
    U, iters, ratio, ok = _picard(state, a, b, max_iter, tol)
    if not ok or ratio >= 1:
        raise StepTooLarge(f"no contraction on [{a}, {b}]: ratio {ratio:.3g}, converged={ok}")
    return DelayedControlledPath(driver, a, U, Yp[a: b + 1].copy(), None, model.theta), iters, ratio


@dataclass
class SolveReport:
    solution: DelayedControlledPath
    history: DelayedControlledPath
    model: ModelSpec
    steps: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    macro_sup: list = field(default_factory=list)
    envelope_rate: float = 0.0
    envelope_excess: float = 1.0

    @property
    def driver(self) -> DelayedRoughDriver:
        return self.solution.driver

    @property
    def y(self) -> np.ndarray:
        return self.solution.y

    @property
    def times(self) -> np.ndarray:
        g = self.solution.grid
        return g.time(np.arange(self.solution.start, self.solution.stop))

    def node_count(self) -> int:
        return self.solution.L


def solve(model: ModelSpec, driver: DelayedRoughDriver, phi: DelayedControlledPath, max_step_nodes: int = 128,
          max_iter: int = 100, tol: float = 1e-12, norms: bool = False, ratio_limit: float = 0.5) -> SolveReport:
    """Global mild solution on ``[0, T]`` by concatenated Picard windows.

    Windows start at ``min(r_hat, max_step_nodes * dt)`` and are halved until
    the observed contraction ratio drops below ``ratio_limit``; windows
    shorter than four cells abort with :class:`SolverError`.
    """
    g = driver.grid
    m, n = g.delay_steps, g.n_points
    if abs(model.r - g.r) > 1e-9 * max(1.0, model.r):
        raise GridError(f"model delay {model.r} does not match the driver grid delay {g.r}")
    if abs(model.T - g.T) > 1e-9 * max(1.0, model.T):
        raise GridError(f"model horizon {model.T} does not match the driver grid {g.T}")
    if phi.start != 0 or phi.stop != m + 1:
        raise GridError("history must cover exactly the nodes of [-r, 0]")
    M = phi.y.shape[-1]
    Y = np.zeros((n, M), dtype=complex)
    Yp = np.zeros((n, driver.d, M), dtype=complex)
    Y[: m + 1] = phi.y
    Yp[: m + 1] = phi.y_prime
    state = _State(model, driver, Y, Yp)
    r_hat = min(model.r, 1.0) if model.r > 0 else 1.0
    width = max(1, min(int(math.floor(r_hat / g.dt + 1e-9)), max_step_nodes))
    a = m
    steps = []
    while a < n - 1:
        w = min(width, n - 1 - a)
        while True:
            b = a + w
            saved = Y[a + 1: b + 1].copy()
            U, iters, ratio, ok = _picard(state, a, b, max_iter, tol)
            if ok and ratio < ratio_limit:
                break
            Y[a + 1: b + 1] = saved
            if w <= 4:
                raise SolverError(f"step underflow at t={g.time(a):.6g}: window {w} cells, ratio {ratio:.3g}, "
                                  f"converged={ok}")
            log.debug("halving window at node %d (ratio %.3g, converged %s)", a, ratio, ok)
            w = max(4, w // 2)
        steps.append(StepRecord(float(g.time(a)), float(g.time(b)), iters, float(ratio)))
        a = b
    sol = DelayedControlledPath(driver, m, Y[m:].copy(), Yp[m:].copy(), None, model.theta)
    report = SolveReport(sol, phi, model, steps)
    _macro_diagnostics(report, model, norms)
    return report


def _macro_diagnostics(report: SolveReport, model: ModelSpec, norms: bool):
    sol = report.solution
    g = sol.grid
    width = g.delay_steps if g.delay_steps > 0 else sol.L - 1
    width = max(width, 1)
    edges = list(range(sol.start, sol.stop - 1, width)) + [sol.stop - 1]
    sups = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        win = sol.window(lo, hi + 1)
        sups.append(float(norm_array(win.y, model.theta).max()))
        if norms:
            report.norms.append(controlled_norm(win, model.alpha, model.theta))
    report.macro_sup = sups
    if len(sups) >= 2 and min(sups) > 0:
        k = np.arange(len(sups))
        slope, icpt = np.polyfit(k, np.log(sups), 1)
        report.envelope_rate = float(slope / (width * g.dt))
        report.envelope_excess = float(np.max(np.log(sups) - (icpt + slope * k)))
    else:
        report.envelope_rate = 0.0
        report.envelope_excess = 0.0


def fixed_point_residual(report: SolveReport) -> float:
    """``max_t ||y_t - S_t y_0 - drift_t - conv_t||_{theta - 2 alpha}`` relative to ``1 + sup ||y||``."""
    model, sol, drv = report.model, report.solution, report.driver
    m = drv.m
    full_y = np.concatenate([report.history.y[:-1], sol.y])
    full_yp = np.concatenate([report.history.y_prime[:-1], sol.y_prime])
    lagged = full_y[: sol.L] if m > 0 else sol.y
    lagged_p = full_yp[: sol.L] if m > 0 else sol.y_prime
    if model.noise_delay:
        mm, mp, mb = compose_arrays(model.G, sol.y, sol.y_prime, lagged, lagged_p)
    else:
        mm, mp, mb = compose_arrays(model.G, sol.y, sol.y_prime, sol.y, None)
    comp = DelayedControlledPath(drv, sol.start, mm, mp, mb, model.theta)
    conv = sewn_path(model.semigroup, drv.grid.dt, cell_germs(drv, comp))
    drift = drift_integral(model.F, model.semigroup, sol.y, lagged, drv.grid.dt)
    K = max_mode_of(sol.y)
    t = np.arange(sol.L) * drv.grid.dt
    free = np.exp(-np.outer(t, model.semigroup.rates(K))) * sol.y[0]
    th = model.theta - 2 * model.alpha
    res = norm_array(sol.y - free - drift - conv, th).max()
    return float(res / (1.0 + norm_array(sol.y, th).max()))


def self_derivative_defect(report: SolveReport) -> float:
    """``max_t |y'_t - G(y_t, y_{t-r})|`` over the solution nodes."""
    model, sol = report.model, report.solution
    m = sol.driver.m
    if model.noise_delay:
        full = np.concatenate([report.history.y[:-1], sol.y])
        lag = full[: sol.L]
    else:
        lag = sol.y
    return float(np.abs(sol.y_prime - eval_G(model.G, sol.y, lag)).max(initial=0.0))


# ---------------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityReport:
    distance: float
    history_distance: float
    driver_distance: float
    M: float

    @property
    def U(self) -> float:
        return self.history_distance + self.driver_distance


def solution_distance(a: SolveReport, b: SolveReport, alpha_hat: float, alpha: float, theta: float,
                      with_bracket: bool = True) -> StabilityReport:
    """``rho_{2 alpha^, 2 alpha, theta}`` on ``[0, T]`` next to the perturbation size ``U``.

    ``U`` adds the history distance on ``[-r, 0]`` and the driver distance on
    ``[0, T]``; ``M`` sums the norms of both solutions, both histories and
    both drivers.
    """
    if a.solution.grid != b.solution.grid:
        raise GridError("solutions live on different grids")
    dist = controlled_distance(a.solution, b.solution, alpha_hat, alpha, theta)
    hist = controlled_distance(a.history, b.history, alpha_hat, alpha, theta)
    drv = rough_distance(a.driver, b.driver, alpha)
    M = float("nan")
    if with_bracket:
        M = (controlled_norm(a.solution, alpha, theta).total + controlled_norm(a.history, alpha, theta).total
             + controlled_norm(b.solution, alpha, theta).total + controlled_norm(b.history, alpha, theta).total
             + rough_distance(a.driver, None, alpha) + rough_distance(b.driver, None, alpha))
    return StabilityReport(dist, hist, drv, M)


@dataclass(frozen=True)
class StabilityRow:
    kind: str
    magnitude: float
    distance: float
    U: float


def stability_experiment(model: ModelSpec, fine: np.ndarray, grid: Grid, subgrid_factor: int, flavor: str,
                         phi0: np.ndarray, magnitudes, kind: str = "initial", seed: int = 0,
                         direction_seed: int = 12345) -> list[StabilityRow]:
    """Solution distance against ``U`` for a family of perturbations of one kind.

    ``initial`` perturbs the constant history by ``eps * c`` for a fixed
    random ``c`` with unit ``theta`` norm; ``driver`` adds
    ``eps * sin(2 pi t / T)`` (every component) to the fine path before the
    lift. Both solutions use constant histories.
    """
    if kind not in ("initial", "driver"):
        raise ValueError("kind must be 'initial' or 'driver'")
    base_driver = driver_from_fine_path(fine, grid, subgrid_factor, flavor, seed)
    phi = constant_history(base_driver, phi0, model.theta)
    base = solve(model, base_driver, phi)
    rng = np.random.default_rng(direction_seed)
    K = max_mode_of(phi0)
    c = rng.standard_normal(2 * K + 1) + 1j * rng.standard_normal(2 * K + 1)
    c = 0.5 * (c + np.conj(c[::-1]))
    c = c / norm_array(c, model.theta)
    fine_grid = grid.refine(subgrid_factor)
    bump = np.sin(2 * np.pi * fine_grid.times / grid.T)[:, None] * np.ones((1, fine.shape[1]))
    rows = []
    for eps in magnitudes:
        if kind == "initial":
            drv = base_driver
            psi = constant_history(drv, phi0 + eps * c, model.theta)
        else:
            drv = driver_from_fine_path(fine[-fine_grid.n_points:] + eps * bump, grid, subgrid_factor, flavor, seed)
            psi = constant_history(drv, phi0, model.theta)
        other = solve(model, drv, psi)
        rep = solution_distance(base, other, model.alpha_hat, model.alpha, model.theta, with_bracket=False)
        rows.append(StabilityRow(kind, float(eps), rep.distance, rep.U))
    return rows


# ---------------------------------------------------------------------------
# delay convergence


@dataclass(frozen=True)
class ConvergenceRow:
    r: float
    seed: int
    distance: float
    h: float
    ok: bool = True


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple
    r_values: tuple
    median_distance: tuple
    median_h: tuple
    slope: float


def convergence_models(template: ModelSpec, r: float) -> tuple[ModelSpec, ModelSpec]:
    """``(delayed, plain)``: noise ``G(y_{t-r})`` with delayed area vs ``G(z_t)``.

    ``template.G`` describes the noise coefficient through its ``a`` weights;
    the delayed model moves them into the lagged slot.
    """
    from dataclasses import replace
    G = template.G
    g_lag = replace(G, a=tuple(0.0 for _ in G.a), b=G.a)
    g_now = replace(G, b=tuple(0.0 for _ in G.a))
    F = replace(template.F, b=tuple(0.0 for _ in template.F.a))
    delayed = replace(template, r=r, G=g_lag, F=F, noise_delay=True)
    plain = replace(template, r=r, G=g_now, F=F, noise_delay=False)
    return delayed, plain


def convergence_history(template: ModelSpec, driver: DelayedRoughDriver, phi0: np.ndarray,
                        kind: str = "constant") -> DelayedControlledPath:
    """History for the convergence runs.

    ``constant`` has ``phi' = 0``; ``compatible`` moves along the driver with
    ``phi' = G(phi0)``, the derivative the undelayed solution starts with.
    """
    if kind == "constant":
        return constant_history(driver, phi0, template.theta)
    if kind == "compatible":
        slope = eval_G(template.G, phi0, phi0)
        return linear_history(driver, phi0, slope, template.theta)
    raise ValueError(f"unknown history kind {kind!r}")


def _convergence_seed(template: ModelSpec, r_list, seed: int, fine: np.ndarray, n_steps: int,
                      subgrid_factor: int, flavor: str, phi0: np.ndarray,
                      history: str = "constant") -> list[ConvergenceRow]:
    T = template.T
    rows = []
    z_plain = None
    for r in r_list:
        grid = Grid.with_delay(T, n_steps, r)
        drv = driver_from_fine_path(fine, grid, subgrid_factor, flavor, seed)
        delayed, plain = convergence_models(template, r)
        phi = convergence_history(template, drv, phi0, history)
        try:
            y = solve(delayed, drv, phi)
            if z_plain is None or history != "constant":
                # a constant history gives every r the same undelayed solution
                z_plain = solve(plain, drv, phi).solution
            # the non-delayed solution only sees the driver on [0, T]
            z = DelayedControlledPath(drv, grid.delay_steps, z_plain.y, z_plain.y_prime, None, z_plain.theta)
            dist = controlled_distance(y.solution, z, template.alpha_bar, template.alpha,
                                       template.theta - template.alpha)
            rows.append(ConvergenceRow(float(r), int(seed), dist, area_gap(drv, template.alpha_bar)))
        except SolverError as exc:
            log.warning("convergence cell r=%g seed=%d failed: %s", r, seed, exc)
            rows.append(ConvergenceRow(float(r), int(seed), float("nan"), float("nan"), False))
    return rows


def delay_convergence_experiment(template: ModelSpec, r_list, seeds, fine_paths, n_steps: int,
                                 subgrid_factor: int, flavor: str, phi0: np.ndarray,
                                 map_fn=map, history: str = "constant") -> ConvergenceTable:
    """Distance between delayed and non-delayed solutions as ``r`` shrinks.

    ``fine_paths[seed]`` is a fine path covering ``[-max(r_list), T]`` on the
    ``subgrid_factor`` refinement of the ``n_steps`` grid. Each ``(r, seed)``
    cell solves both equations with the same driver and a history starting
    from ``phi0``, and records ``rho_{2 alpha_bar, 2 alpha, theta - alpha}`` on
    ``[0, T]`` together with the measured area gap. Failed cells are flagged
    and skipped by the medians. ``history`` picks the history (see
    :func:`convergence_history`). ``map_fn`` runs the per-seed work and may be
    a parallel map; results are collected in seed order.
    """
    r_list = [float(r) for r in r_list]
    dt = template.T / n_steps
    for r in r_list:
        if 0 < r < dt:
            raise GridError(f"delay {r} is below the step {dt}")
    work = lambda seed: _convergence_seed(template, r_list, seed, fine_paths[seed], n_steps,
                                          subgrid_factor, flavor, phi0, history)
    per_seed = list(map_fn(work, list(seeds)))
    rows = [row for r in r_list for rs in per_seed for row in rs if row.r == r]
    r_vals, med_d, med_h = [], [], []
    for r in r_list:
        ok = [row for row in rows if row.r == r and row.ok]
        r_vals.append(r)
        med_d.append(float(np.median([row.distance for row in ok])) if ok else float("nan"))
        med_h.append(float(np.median([row.h for row in ok])) if ok else float("nan"))
    good = [i for i, v in enumerate(med_d) if np.isfinite(v) and v > 0 and r_vals[i] > 0]
    slope = float("nan")
    if len(good) >= 2:
        slope = float(np.polyfit(np.log([r_vals[i] for i in good]), np.log([med_d[i] for i in good]), 1)[0])
    return ConvergenceTable(tuple(rows), tuple(r_vals), tuple(med_d), tuple(med_h), slope)
