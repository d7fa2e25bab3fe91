"""Single-phase slightly-compressible finite-volume flow on a regular grid.

The forward model maps a permeability vector to per-report-step well rates
and bottom-hole pressures.  Backward-Euler time stepping gives one
symmetric positive-definite linear system per report step, solved with
diagonally preconditioned conjugate gradients warm-started from the
previous pressure field.

Units: SI internally (m, s, Pa, m^3/s).  Schedules carry days,
permeability is millidarcy, rates are reported in m^3/day with
production positive, pressures in Pa.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from .fields import GridSpec, PermeabilityField, unstack_parameters
from .objective import ObservationSpec

MD_TO_M2 = 9.869233e-16
DAY_TO_S = 86400.0
PSI_TO_PA = 6894.757293168


class SimulationError(RuntimeError):
    """Forward model failure; carries the linear-solver residual if known."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class FluidProps:
    """Single-phase fluid: viscosity (Pa*s), total compressibility (1/Pa).

    reference_density (kg/m3) is carried for reporting only; there is no
    gravity term.
    """

    viscosity: float
    total_compressibility: float
    reference_density: float = 800.0

    def __post_init__(self):
        if self.viscosity <= 0:
            raise ValueError("viscosity must be > 0")
        if self.total_compressibility <= 0:
            raise ValueError("total compressibility must be > 0")


@dataclass(frozen=True)
class WellControl:
    """Either a BHP target with an optional rate limit, or a rate target with
    an optional BHP limit.  Rates are positive magnitudes in m3/day; BHPs in Pa."""

    kind: str  # "bhp" | "rate"
    bhp: float | None = None
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in ("bhp", "rate"):
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.kind == "bhp" and (self.bhp is None or self.bhp <= 0):
            raise ValueError("bhp control needs a positive bhp target")
        if self.kind == "rate" and (self.rate is None or self.rate <= 0):
            raise ValueError("rate control needs a positive rate target")
        if self.bhp is not None and self.bhp <= 0:
            raise ValueError("bhp values must be positive")
        if self.rate is not None and self.rate <= 0:
            raise ValueError("rate values must be positive")


@dataclass(frozen=True)
class WellSpec:
    """A vertical well completed in one or more layers of column (i, j)."""

    name: str
    i: int
    j: int
    k: int
    mode: str  # "injector" | "producer"
    control: WellControl
    radius: float = 0.1
    layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in ("injector", "producer"):
            raise ValueError(f"unknown well mode {self.mode!r}")
        if self.radius <= 0:
            raise ValueError("wellbore radius must be positive")

    def completed_layers(self) -> tuple[int, ...]:
        return self.layers if self.layers else (self.k,)


@dataclass(frozen=True)
class WellSchedule:
    """Report-step cadence, wells and fluid for one simulation window."""

    wells: tuple[WellSpec, ...]
    dt_days: float
    n_steps: int
    p_init: float
    fluid: FluidProps
    porosity: float = 0.2

    def __post_init__(self):
        if self.dt_days <= 0:
            raise ValueError("report-step length must be > 0")
        if self.n_steps < 1:
            raise ValueError("need at least one report step")
        if self.p_init <= 0:
            raise ValueError("initial pressure must be positive")
        if not (0 < self.porosity <= 1):
            raise ValueError("porosity must lie in (0, 1]")

    @property
    def times_days(self) -> np.ndarray:
        return self.dt_days * np.arange(1, self.n_steps + 1, dtype=np.float64)


@dataclass
class SimulatedSeries:
    """Per report step, per well: signed rate (m3/day, production positive)
    and bottom-hole pressure (Pa)."""

    times_days: np.ndarray
    rates: np.ndarray  # (n_steps, n_wells)
    bhps: np.ndarray  # (n_steps, n_wells)
    well_names: tuple[str, ...]
    well_modes: tuple[str, ...]
    cg_iterations: int = 0

    def well_column(self, name: str) -> int:
        try:
            return self.well_names.index(name)
        except ValueError:
            raise ValueError(f"no well named {name!r} in series") from None


def extract_observation(series: SimulatedSeries, spec: ObservationSpec) -> np.ndarray:
    """Flatten the observed quantity into a vector, step-major."""
    if spec.kind == "producer_bhp":
        col = series.well_column(spec.well)
        return series.bhps[:, col] * spec.unit_scale
    if spec.kind == "field_rate":
        producers = [w == "producer" for w in series.well_modes]
        if not any(producers):
            raise ValueError("field_rate observation needs at least one producer")
        return series.rates[:, producers].sum(axis=1) * spec.unit_scale
    raise ValueError(f"unknown observation kind {spec.kind!r}")


class ForwardModel(Protocol):
    """Anything that can turn a parameter vector into a simulated series."""

    @property
    def parameter_length(self) -> int: ...

    def simulate(self, u: np.ndarray, schedule: WellSchedule) -> SimulatedSeries: ...


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = a + b
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, 2.0 * a * b / safe, 0.0)


@dataclass
class Transmissibilities:
    """Interior-face transmissibilities in md*m, indexed (z, y, x) face arrays."""

    tx: np.ndarray  # (nz, ny, nx-1)
    ty: np.ndarray  # (nz, ny-1, nx)
    tz: np.ndarray  # (nz-1, ny, nx)


def compute_transmissibilities(grid: GridSpec, perm: PermeabilityField) -> Transmissibilities:
    """Harmonic-mean face transmissibility: harm(k1, k2) * area / distance.

    A zero permeability on either side makes the face a no-flow boundary.
    """
    n = grid.n_cells
    for name, block in (("kx", perm.kx), ("ky", perm.ky), ("kz", perm.kz)):
        if block.size != n:
            raise ValueError(f"{name} has {block.size} cells, grid has {n}")
        if np.any(block < 0):
            raise ValueError(f"{name} contains negative permeability")
    shape = (grid.nz, grid.ny, grid.nx)
    kx = perm.kx.reshape(shape)
    ky = perm.ky.reshape(shape)
    kz = perm.kz.reshape(shape)
    ax = grid.dy * grid.dz / grid.dx
    ay = grid.dx * grid.dz / grid.dy
    az = grid.dx * grid.dy / grid.dz
    return Transmissibilities(
        tx=_harmonic(kx[:, :, :-1], kx[:, :, 1:]) * ax,
        ty=_harmonic(ky[:, :-1, :], ky[:, 1:, :]) * ay,
        tz=_harmonic(kz[:-1, :, :], kz[1:, :, :]) * az,
    )


def peaceman_radius(kx: float, ky: float, dx: float, dy: float) -> float:
    """Equivalent wellblock radius for an anisotropic rectangular cell."""
    r = ky / kx
    num = np.sqrt(np.sqrt(r) * dx * dx + np.sqrt(1.0 / r) * dy * dy)
    den = r ** 0.25 + (1.0 / r) ** 0.25
    return 0.28 * num / den


def well_index(grid: GridSpec, well: WellSpec, perm: PermeabilityField) -> float:
    """Total Peaceman well index over the completed layers, in md*m.

    Zero horizontal permeability in a layer contributes nothing; a well
    whose every completion is dead simply has index zero.
    """
    total = 0.0
    for layer in well.completed_layers():
        cell = grid.flat_index(well.i, well.j, layer)
        kx = perm.kx[cell]
        ky = perm.ky[cell]
        if kx <= 0.0 or ky <= 0.0:
            continue
        r_eq = peaceman_radius(kx, ky, grid.dx, grid.dy)
        if r_eq <= well.radius:
            raise ValueError(
                f"well {well.name}: wellbore radius {well.radius} m does not fit the "
                f"equivalent radius {r_eq:.3g} m"
            )
        total += 2.0 * np.pi * np.sqrt(kx * ky) * grid.dz / np.log(r_eq / well.radius)
    return total


# ---------------------------------------------------------------------------
# Linear solver
# ---------------------------------------------------------------------------

def _pcg(A, b, x0, inv_diag, rtol, maxiter):
    """Jacobi-preconditioned conjugate gradients; raises on non-convergence."""
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = x0.copy()
    r = b - A @ x
    tol = rtol * b_norm
    r_norm = float(np.linalg.norm(r))
    if r_norm <= tol:
        return x, 0, r_norm
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r_norm = float(np.linalg.norm(r))
        if r_norm <= tol:
            return x, it, r_norm
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SimulationError(
        f"pressure solve did not converge in {maxiter} iterations "
        f"(residual {r_norm:.3e}, target {tol:.3e})",
        residual=r_norm,
    )


# ---------------------------------------------------------------------------
# Pressure stepping
# ---------------------------------------------------------------------------

@dataclass
class _ResolvedWell:
    spec: WellSpec
    cells: np.ndarray  # flat indices of completed layers
    wi: np.ndarray  # SI conductance per layer, m3/(Pa*s)
    sign: float  # +1 producer, -1 injector

    @property
    def total_wi(self) -> float:
        return float(self.wi.sum())


class PressureSystem:
    """Assembled implicit system for one (grid, permeability, schedule) triple.

    The accumulation and flow parts are constant over the run; only the
    well coupling changes when a well switches between rate and BHP
    control, which is decided once per report step from the pressures at
    the start of the step.
    """

    def __init__(self, grid: GridSpec, perm: PermeabilityField, schedule: WellSchedule):
        self.grid = grid
        self.schedule = schedule
        n = grid.n_cells
        mu = schedule.fluid.viscosity
        dt_s = schedule.dt_days * DAY_TO_S

        trans = compute_transmissibilities(grid, perm)
        conv = MD_TO_M2 / mu  # md*m -> m3/(Pa*s)
        idx = np.arange(n).reshape(grid.nz, grid.ny, grid.nx)
        rows, cols, vals = [], [], []

        def add_faces(t, a, b):
            c = t.ravel() * conv
            a = a.ravel()
            b = b.ravel()
            rows.append(np.concatenate([a, b, a, b]))
            cols.append(np.concatenate([a, b, b, a]))
            vals.append(np.concatenate([c, c, -c, -c]))

        add_faces(trans.tx, idx[:, :, :-1], idx[:, :, 1:])
        if grid.ny > 1:
            add_faces(trans.ty, idx[:, :-1, :], idx[:, 1:, :])
        if grid.nz > 1:
            add_faces(trans.tz, idx[:-1, :, :], idx[1:, :, :])
        if rows:
            flow = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n),
            ).tocsr()
        else:
            flow = sp.csr_matrix((n, n))

        self.acc = np.full(
            n, grid.cell_volume * schedule.porosity * schedule.fluid.total_compressibility / dt_s
        )
        self._base = (flow + sp.diags(self.acc)).tocsr()
        self._dt_s = dt_s
        self._maxiter = 10 * n
        self._rtol = 1e-10

        self.wells = []
        for w in schedule.wells:
            layers = w.completed_layers()
            cells = np.array([grid.flat_index(w.i, w.j, k) for k in layers])
            wi = np.array(
                [
                    well_index(
                        grid,
                        WellSpec(w.name, w.i, w.j, k, w.mode, w.control, w.radius, (k,)),
                        perm,
                    )
                    for k in layers
                ]
            ) * conv
            self.wells.append(_ResolvedWell(w, cells, wi, 1.0 if w.mode == "producer" else -1.0))

        self._modes: tuple[str, ...] | None = None
        self._A = None
        self._inv_diag = None

    def _resolve_controls(self, p: np.ndarray):
        """Pick each well's operating mode from start-of-step pressures.

        Returns (modes, targets) where targets is the BHP in Pa for "bhp"
        mode and the signed outflow in m3/s for "rate" mode.  Dead wells
        (zero index) get mode "off".
        """
        modes, targets = [], []
        for w in self.wells:
            wi_tot = w.total_wi
            if wi_tot <= 0.0:
                modes.append("off")
                targets.append(0.0)
                continue
            ctrl = w.spec.control
            wi_p = float(w.wi @ p[w.cells])
            if ctrl.kind == "rate":
                q_out = w.sign * ctrl.rate / DAY_TO_S
                p_implied = (wi_p - q_out) / wi_tot
                if ctrl.bhp is not None and (
                    (w.sign > 0 and p_implied < ctrl.bhp) or (w.sign < 0 and p_implied > ctrl.bhp)
                ):
                    modes.append("bhp")
                    targets.append(ctrl.bhp)
                else:
                    modes.append("rate")
                    targets.append(q_out)
            else:
                q_implied = wi_p - wi_tot * ctrl.bhp  # signed outflow at target bhp
                if ctrl.rate is not None and abs(q_implied) > ctrl.rate / DAY_TO_S:
                    modes.append("rate")
                    targets.append(w.sign * ctrl.rate / DAY_TO_S)
                else:
                    modes.append("bhp")
                    targets.append(ctrl.bhp)
        return tuple(modes), targets

    def _assemble(self, modes):
        if modes == self._modes:
            return
        diag_add = np.zeros(self.grid.n_cells)
        for w, mode in zip(self.wells, modes):
            if mode == "bhp":
                np.add.at(diag_add, w.cells, w.wi)
        self._A = (self._base + sp.diags(diag_add)).tocsr()
        self._inv_diag = 1.0 / self._A.diagonal()
        self._modes = modes

    def step(self, p: np.ndarray):
        """Advance one report step.

        Returns (p_new, rates, bhps, n_cg_iterations) where rates are signed
        m3/day with production positive and bhps are in Pa.
        """
        modes, targets = self._resolve_controls(p)
        self._assemble(modes)
        b = self.acc * p
        for w, mode, target in zip(self.wells, modes, targets):
            if mode == "bhp":
                b[w.cells] += w.wi * target
            elif mode == "rate":
                wi_tot = w.total_wi
                p_implied = (float(w.wi @ p[w.cells]) - target) / wi_tot
                share = w.wi * (p[w.cells] - p_implied)
                total = share.sum()
                if total != 0.0:
                    b[w.cells] -= target * (share / total)
                else:
                    b[w.cells] -= target * (w.wi / wi_tot)
        p_new, n_iter, _ = _pcg(self._A, b, p, self._inv_diag, self._rtol, self._maxiter)

        rates = np.zeros(len(self.wells))
        bhps = np.zeros(len(self.wells))
        for col, (w, mode, target) in enumerate(zip(self.wells, modes, targets)):
            if mode == "off":
                rates[col] = 0.0
                ctrl = w.spec.control
                bhps[col] = ctrl.bhp if ctrl.bhp is not None else float(p_new[w.cells].mean())
            elif mode == "bhp":
                q_out = float(w.wi @ (p_new[w.cells] - target))
                rates[col] = q_out * DAY_TO_S
                bhps[col] = target
            else:
                rates[col] = target * DAY_TO_S
                bhps[col] = (float(w.wi @ p_new[w.cells]) - target) / w.total_wi
        return p_new, rates, bhps, n_iter


class FiniteVolumeModel:
    """Forward model over a fixed grid: simulate(u, schedule) -> SimulatedSeries."""

    def __init__(self, grid: GridSpec):
        self.grid = grid

    @property
    def parameter_length(self) -> int:
        return self.grid.n_parameters

    def describe(self) -> dict:
        return {
            "kind": "single_phase_finite_volume",
            "parameter_length": self.parameter_length,
            "observed_quantities": ["producer_bhp", "field_rate"],
        }

    def simulate(self, u: np.ndarray, schedule: WellSchedule) -> SimulatedSeries:
        u = np.asarray(u, dtype=np.float64).ravel()
        if u.size != self.parameter_length:
            raise ValueError(f"parameter vector has length {u.size}, expected {self.parameter_length}")
        if not np.all(np.isfinite(u)):
            raise ValueError("parameter vector contains non-finite entries")
        if np.any(u < 0):
            raise ValueError("parameter vector contains negative permeability")
        for w in schedule.wells:
            for layer in w.completed_layers():
                self.grid.flat_index(w.i, w.j, layer)  # bounds check

        perm = unstack_parameters(u, self.grid)
        system = PressureSystem(self.grid, perm, schedule)
        n_wells = len(schedule.wells)
        rates = np.zeros((schedule.n_steps, n_wells))
        bhps = np.zeros((schedule.n_steps, n_wells))
        p = np.full(self.grid.n_cells, schedule.p_init)
        total_iters = 0
        for step in range(schedule.n_steps):
            p, rates[step], bhps[step], it = system.step(p)
            total_iters += it
        series = SimulatedSeries(
            times_days=schedule.times_days,
            rates=rates,
            bhps=bhps,
            well_names=tuple(w.name for w in schedule.wells),
            well_modes=tuple(w.mode for w in schedule.wells),
            cg_iterations=total_iters,
        )
        if not (np.all(np.isfinite(rates)) and np.all(np.isfinite(bhps))):
            raise SimulationError("simulated series contains non-finite values")
        return series
