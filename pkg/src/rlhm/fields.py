"""Permeability fields on regular 3D grids and synthetic case construction.

The uncertain-parameter state of the matching problem is one flat vector
holding the three directional permeability blocks back to back.  This
module converts between that vector and per-cell arrays, draws spatially
correlated noise, and scrambles a truth model into a synthetic starting
point whose historical record comes from the truth model itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class GridSpec:
    """Regular 3D grid. Cell (i, j, k) maps to flat index i + nx*(j + ny*k)."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("cell counts must all be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0.0:
            raise ValueError("cell dimensions must all be positive")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def n_parameters(self) -> int:
        return 3 * self.n_cells

    def flat_index(self, i: int, j: int, k: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz):
            raise ValueError(f"cell ({i}, {j}, {k}) outside {self.nx}x{self.ny}x{self.nz} grid")
        return i + self.nx * (j + self.ny * k)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass
class PermeabilityField:
    """Per-cell directional permeability in millidarcy, flat x-fastest arrays."""

    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray

    def __post_init__(self):
        self.kx = np.asarray(self.kx, dtype=np.float64).ravel()
        self.ky = np.asarray(self.ky, dtype=np.float64).ravel()
        self.kz = np.asarray(self.kz, dtype=np.float64).ravel()


def stack_parameters(field: PermeabilityField) -> np.ndarray:
    """Concatenate the kx, ky, kz blocks into one parameter vector."""
    if not (field.kx.size == field.ky.size == field.kz.size):
        raise ValueError(
            f"mismatched block lengths: kx={field.kx.size} ky={field.ky.size} kz={field.kz.size}"
        )
    return np.concatenate([field.kx, field.ky, field.kz])


def unstack_parameters(values: np.ndarray, grid: GridSpec) -> PermeabilityField:
    """Split a parameter vector back into per-cell kx, ky, kz arrays."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = grid.n_cells
    if values.size != 3 * n:
        raise ValueError(f"parameter vector has length {values.size}, expected {3 * n}")
    return PermeabilityField(values[:n].copy(), values[n : 2 * n].copy(), values[2 * n :].copy())


@dataclass(frozen=True)
class NoiseSpec:
    """Geo-correlated Gaussian noise: marginal std, per-axis smoothing lengths, seed.

    ``amplitude`` may be a scalar or an (ax, ay, az) triple when the three
    permeability directions are scrambled with different strengths.
    ``correlation_length`` is in cells, one entry per grid axis (x, y, z).
    """

    amplitude: float | tuple[float, float, float]
    correlation_length: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        amps = self.amplitude if isinstance(self.amplitude, tuple) else (self.amplitude,)
        if any(a < 0 for a in amps):
            raise ValueError("noise amplitude must be >= 0")
        if any(c < 0 for c in self.correlation_length):
            raise ValueError("correlation lengths must be >= 0")

    def block_amplitudes(self) -> tuple[float, float, float]:
        if isinstance(self.amplitude, tuple):
            return self.amplitude
        return (self.amplitude, self.amplitude, self.amplitude)


def sample_correlated_field(grid: GridSpec, spec: NoiseSpec, amplitude: float | None = None) -> np.ndarray:
    """Draw one zero-mean correlated field of length n_cells.

    White Gaussian noise is smoothed with a separable Gaussian kernel whose
    per-axis widths are the configured correlation lengths, then recentred
    and rescaled so the sample mean is exactly zero and the sample std is
    exactly ``amplitude``.  Deterministic for a fixed seed.
    """
    if amplitude is None:
        amp = spec.block_amplitudes()[0]
    else:
        amp = float(amplitude)
    if amp < 0:
        raise ValueError("noise amplitude must be >= 0")
    rng = np.random.default_rng(spec.seed)
    field = rng.standard_normal((grid.nz, grid.ny, grid.nx))
    if amp == 0.0:
        return np.zeros(grid.n_cells)
    clx, cly, clz = spec.correlation_length
    if max(clx, cly, clz) > 0:
        # array axes are (z, y, x)
        field = gaussian_filter(field, sigma=(clz, cly, clx), mode="nearest")
    field = field - field.mean()
    std = field.std()
    if std > 0:
        field = field * (amp / std)
    return field.ravel()


def make_synthetic_case(truth, grid, schedule, noise, observe, model):
    """Turn a truth model into a matching problem: observations plus a scrambled start.

    Simulates the truth model, extracts the observed quantity as the
    historical record, then perturbs each permeability block with an
    independent correlated-noise draw (sub-seeds spawned from the master
    seed) and clips the result at zero.  The truth vector itself is not
    part of the return value and is never written to a case file.

    Parameters
    ----------
    truth : PermeabilityField
    grid : GridSpec
    schedule : WellSchedule
    noise : NoiseSpec
    observe : ObservationSpec
        Which simulated quantity forms the historical record.
    model : ForwardModel
        Forward model used to generate the record (must cover the grid).

    Returns
    -------
    (ObservationSeries, np.ndarray)
        The historical record and the starting parameter vector.
    """
    from .objective import ObservationSeries
    from .simulator import extract_observation

    u_truth = stack_parameters(truth)
    series = model.simulate(u_truth, schedule)
    values = extract_observation(series, observe)
    observations = ObservationSeries(
        spec=observe,
        times_days=series.times_days.copy(),
        values=values,
        weights=np.ones_like(values),
    )

    children = np.random.SeedSequence(noise.seed).spawn(3)
    amps = noise.block_amplitudes()
    blocks = []
    for block, amp, child in zip((truth.kx, truth.ky, truth.kz), amps, children):
        sub = NoiseSpec(amplitude=amp, correlation_length=noise.correlation_length, seed=child)
        blocks.append(np.maximum(block + sample_correlated_field(grid, sub), 0.0))
    start = np.concatenate(blocks)
    return observations, start
