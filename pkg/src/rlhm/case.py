"""Self-describing case files: everything one matching run needs.

A case file is a single canonical JSON document with the grid, the well
schedule, the scrambled starting vector, the historical record, the
objective specification and the noise provenance.  The truth model is
never stored.  An optional sibling "holdout" file extends the schedule
past the training window and keeps the truth-generated record over the
full window so forecasts can be validated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .fields import GridSpec, NoiseSpec, PermeabilityField, make_synthetic_case, sample_correlated_field, stack_parameters
from .objective import ObjectiveSpec, ObservationSeries, ObservationSpec, RewardConfig
from .simulator import (
    PSI_TO_PA,
    FiniteVolumeModel,
    FluidProps,
    WellControl,
    WellSchedule,
    WellSpec,
    extract_observation,
)

CASE_FORMAT = "rlhm-case"
HOLDOUT_FORMAT = "rlhm-holdout"
FORMAT_VERSION = 1


@dataclass
class EnvDefaults:
    """Per-case recommended environment settings, embedded in the case file."""

    action_bound: tuple[float, float, float]
    max_steps: int
    divergence_factor: float
    reward_solved: float
    reward_diverged: float
    reward_timed_out: float

    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.reward_solved, self.reward_diverged, self.reward_timed_out)


@dataclass
class Case:
    grid: GridSpec
    schedule: WellSchedule
    start: np.ndarray
    objective: ObjectiveSpec
    f0: float
    noise_meta: dict
    env_defaults: EnvDefaults
    name: str = "case"

    @property
    def observations(self) -> ObservationSeries:
        return self.objective.observations


@dataclass
class HoldoutRecord:
    """Truth-generated record over training + holdout, with the full schedule."""

    schedule: WellSchedule
    observations: ObservationSeries
    train_steps: int

    @property
    def holdout_steps(self) -> int:
        return self.schedule.n_steps - self.train_steps


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def _canonical_json(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _schedule_to_dict(s: WellSchedule) -> dict:
    return {
        "dt_days": s.dt_days,
        "n_steps": s.n_steps,
        "p_init": s.p_init,
        "porosity": s.porosity,
        "fluid": {
            "viscosity": s.fluid.viscosity,
            "total_compressibility": s.fluid.total_compressibility,
            "reference_density": s.fluid.reference_density,
        },
        "wells": [
            {
                "name": w.name,
                "i": w.i,
                "j": w.j,
                "k": w.k,
                "mode": w.mode,
                "control": {"kind": w.control.kind, "bhp": w.control.bhp, "rate": w.control.rate},
                "radius": w.radius,
                "layers": list(w.layers),
            }
            for w in s.wells
        ],
    }


def _schedule_from_dict(d: dict) -> WellSchedule:
    return WellSchedule(
        wells=tuple(
            WellSpec(
                name=w["name"],
                i=w["i"],
                j=w["j"],
                k=w["k"],
                mode=w["mode"],
                control=WellControl(
                    kind=w["control"]["kind"], bhp=w["control"]["bhp"], rate=w["control"]["rate"]
                ),
                radius=w["radius"],
                layers=tuple(w["layers"]),
            )
            for w in d["wells"]
        ),
        dt_days=d["dt_days"],
        n_steps=d["n_steps"],
        p_init=d["p_init"],
        fluid=FluidProps(**d["fluid"]),
        porosity=d["porosity"],
    )


def _observations_to_dict(o: ObservationSeries) -> dict:
    return {
        "kind": o.spec.kind,
        "well": o.spec.well,
        "unit_scale": o.spec.unit_scale,
        "times_days": o.times_days.tolist(),
        "values": o.values.tolist(),
        "weights": o.weights.tolist(),
    }


def _observations_from_dict(d: dict) -> ObservationSeries:
    return ObservationSeries(
        spec=ObservationSpec(kind=d["kind"], well=d["well"], unit_scale=d["unit_scale"]),
        times_days=np.array(d["times_days"]),
        values=np.array(d["values"]),
        weights=np.array(d["weights"]),
    )


def case_to_dict(case: Case) -> dict:
    return {
        "format": CASE_FORMAT,
        "version": FORMAT_VERSION,
        "name": case.name,
        "grid": {
            "nx": case.grid.nx,
            "ny": case.grid.ny,
            "nz": case.grid.nz,
            "dx": case.grid.dx,
            "dy": case.grid.dy,
            "dz": case.grid.dz,
        },
        "schedule": _schedule_to_dict(case.schedule),
        "start": case.start.tolist(),
        "objective": {
            "scale": case.objective.scale,
            "reg_weight": case.objective.reg_weight,
            "tolerance": case.objective.tolerance,
            "obs_weights": case.objective.obs_weights.tolist(),
            "param_weights": case.objective.param_weights.tolist(),
            "prior": case.objective.prior.tolist(),
            "observations": _observations_to_dict(case.objective.observations),
        },
        "f0": case.f0,
        "noise": case.noise_meta,
        "env_defaults": {
            "action_bound": list(case.env_defaults.action_bound),
            "max_steps": case.env_defaults.max_steps,
            "divergence_factor": case.env_defaults.divergence_factor,
            "reward_solved": case.env_defaults.reward_solved,
            "reward_diverged": case.env_defaults.reward_diverged,
            "reward_timed_out": case.env_defaults.reward_timed_out,
        },
    }


def case_from_dict(d: dict) -> Case:
    if d.get("format") != CASE_FORMAT:
        raise ValueError(f"not a case file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported case file version {d.get('version')!r}")
    grid = GridSpec(**d["grid"])
    o = d["objective"]
    objective = ObjectiveSpec(
        scale=o["scale"],
        reg_weight=o["reg_weight"],
        tolerance=o["tolerance"],
        obs_weights=np.array(o["obs_weights"]),
        param_weights=np.array(o["param_weights"]),
        prior=np.array(o["prior"]),
        observations=_observations_from_dict(o["observations"]),
    )
    e = d["env_defaults"]
    env_defaults = EnvDefaults(
        action_bound=tuple(e["action_bound"]),
        max_steps=e["max_steps"],
        divergence_factor=e["divergence_factor"],
        reward_solved=e["reward_solved"],
        reward_diverged=e["reward_diverged"],
        reward_timed_out=e["reward_timed_out"],
    )
    return Case(
        grid=grid,
        schedule=_schedule_from_dict(d["schedule"]),
        start=np.array(d["start"]),
        objective=objective,
        f0=d["f0"],
        noise_meta=d["noise"],
        env_defaults=env_defaults,
        name=d.get("name", "case"),
    )


def write_case(case: Case, path: Path | str) -> None:
    Path(path).write_text(_canonical_json(case_to_dict(case)))


def read_case(path: Path | str) -> Case:
    return case_from_dict(json.loads(Path(path).read_text()))


def write_holdout(record: HoldoutRecord, path: Path | str) -> None:
    doc = {
        "format": HOLDOUT_FORMAT,
        "version": FORMAT_VERSION,
        "schedule": _schedule_to_dict(record.schedule),
        "observations": _observations_to_dict(record.observations),
        "train_steps": record.train_steps,
    }
    Path(path).write_text(_canonical_json(doc))


def read_holdout(path: Path | str) -> HoldoutRecord:
    d = json.loads(Path(path).read_text())
    if d.get("format") != HOLDOUT_FORMAT:
        raise ValueError(f"not a holdout file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported holdout file version {d.get('version')!r}")
    return HoldoutRecord(
        schedule=_schedule_from_dict(d["schedule"]),
        observations=_observations_from_dict(d["observations"]),
        train_steps=d["train_steps"],
    )


# ---------------------------------------------------------------------------
# Case construction
# ---------------------------------------------------------------------------

@dataclass
class CaseRecipe:
    """All knobs of the synthetic-case generator, preset-overridable."""

    name: str
    grid: GridSpec
    schedule: WellSchedule
    observe: ObservationSpec
    truth_base: tuple[float, float, float]  # homogeneous kx, ky, kz in md
    truth_variation: tuple[float, float, float]  # correlated heterogeneity std, md
    truth_correlation: tuple[float, float, float]
    noise_amplitude: tuple[float, float, float]
    noise_correlation: tuple[float, float, float]
    action_bound: tuple[float, float, float]
    scale: float = 1e-3
    reg_weight: float = 0.1
    tolerance: float | None = None  # None -> tolerance_fraction * f0
    tolerance_fraction: float = 0.05
    reward_solved: float | None = None  # None -> f0-proportional defaults
    reward_diverged: float | None = None
    reward_timed_out: float | None = None
    max_steps: int = 100
    divergence_factor: float = 2.0
    holdout_steps: int = 0


def build_case(recipe: CaseRecipe, seed: int = 0):
    """Generate (Case, HoldoutRecord | None) from a recipe and a master seed.

    The master seed is split into a truth stream and a scrambling stream,
    so the same seed always produces the same case end to end.
    """
    truth_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    truth_children = truth_ss.spawn(3)
    blocks = []
    for base, var, child in zip(recipe.truth_base, recipe.truth_variation, truth_children):
        block = np.full(recipe.grid.n_cells, float(base))
        if var > 0:
            spec = NoiseSpec(amplitude=var, correlation_length=recipe.truth_correlation, seed=child)
            block = np.maximum(block + sample_correlated_field(recipe.grid, spec), 1e-3)
        blocks.append(block)
    truth = PermeabilityField(*blocks)

    model = FiniteVolumeModel(recipe.grid)
    total_steps = recipe.schedule.n_steps + recipe.holdout_steps
    full_schedule = replace(recipe.schedule, n_steps=total_steps)

    noise_seed = int(noise_ss.generate_state(1)[0])
    noise = NoiseSpec(
        amplitude=recipe.noise_amplitude,
        correlation_length=recipe.noise_correlation,
        seed=noise_seed,
    )

    if recipe.holdout_steps > 0:
        full_obs, start = make_synthetic_case(
            truth, recipe.grid, full_schedule, noise, recipe.observe, model
        )
        n_train = recipe.schedule.n_steps
        observations = ObservationSeries(
            spec=full_obs.spec,
            times_days=full_obs.times_days[:n_train],
            values=full_obs.values[:n_train],
            weights=full_obs.weights[:n_train],
        )
        holdout = HoldoutRecord(
            schedule=full_schedule, observations=full_obs, train_steps=n_train
        )
    else:
        observations, start = make_synthetic_case(
            truth, recipe.grid, recipe.schedule, noise, recipe.observe, model
        )
        holdout = None

    # Score the starting point; the prior is the start itself, so f0 is the
    # pure data mismatch.
    from .objective import evaluate_objective

    start_series = model.simulate(start, recipe.schedule)
    q_start = extract_observation(start_series, recipe.observe)
    prelim = ObjectiveSpec(
        scale=recipe.scale,
        reg_weight=recipe.reg_weight,
        obs_weights=np.ones_like(observations.values),
        param_weights=np.ones_like(start),
        prior=start.copy(),
        tolerance=1.0,
        observations=observations,
    )
    f0 = evaluate_objective(start, q_start, prelim)

    tolerance = recipe.tolerance if recipe.tolerance is not None else recipe.tolerance_fraction * f0
    if tolerance <= 0:
        tolerance = 1e-12
    objective = ObjectiveSpec(
        scale=recipe.scale,
        reg_weight=recipe.reg_weight,
        obs_weights=prelim.obs_weights,
        param_weights=prelim.param_weights,
        prior=prelim.prior,
        tolerance=tolerance,
        observations=observations,
    )
    env_defaults = EnvDefaults(
        action_bound=recipe.action_bound,
        max_steps=recipe.max_steps,
        divergence_factor=recipe.divergence_factor,
        reward_solved=recipe.reward_solved if recipe.reward_solved is not None else max(f0, 1.0),
        reward_diverged=(
            recipe.reward_diverged if recipe.reward_diverged is not None else -max(f0, 1.0)
        ),
        reward_timed_out=(
            recipe.reward_timed_out if recipe.reward_timed_out is not None else -0.5 * max(f0, 1.0)
        ),
    )
    case = Case(
        grid=recipe.grid,
        schedule=recipe.schedule,
        start=start,
        objective=objective,
        f0=f0,
        noise_meta={
            "seed": seed,
            "noise_seed": noise_seed,
            "amplitude": list(recipe.noise_amplitude),
            "correlation_length": list(recipe.noise_correlation),
        },
        env_defaults=env_defaults,
        name=recipe.name,
    )
    return case, holdout


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _reduced_recipe() -> CaseRecipe:
    """Desk-scale case: small grid, short record, solvable in minutes."""
    grid = GridSpec(nx=8, ny=8, nz=2, dx=50.0, dy=50.0, dz=10.0)
    fluid = FluidProps(viscosity=1e-3, total_compressibility=1.5e-7)
    wells = (
        WellSpec("INJ", 0, 0, 0, "injector", WellControl(kind="bhp", bhp=2.7e7), layers=(0, 1)),
        WellSpec(
            "PROD", 7, 7, 0, "producer",
            WellControl(kind="rate", rate=180.0, bhp=1.2e7), layers=(0, 1),
        ),
    )
    schedule = WellSchedule(wells=wells, dt_days=30.0, n_steps=36, p_init=2.5e7, fluid=fluid)
    return CaseRecipe(
        name="reduced",
        grid=grid,
        schedule=schedule,
        observe=ObservationSpec(kind="producer_bhp", well="PROD", unit_scale=1.0 / PSI_TO_PA),
        truth_base=(150.0, 150.0, 15.0),
        truth_variation=(40.0, 40.0, 4.0),
        truth_correlation=(2.0, 2.0, 1.0),
        noise_amplitude=(40.0, 40.0, 4.0),
        noise_correlation=(2.0, 2.0, 1.0),
        action_bound=(20.0, 20.0, 2.0),
        reg_weight=0.1,
        tolerance_fraction=0.05,
        holdout_steps=12,
    )


def _spe1_analog_recipe() -> CaseRecipe:
    """10x10x3 single-producer case observed through producer BHP (psi)."""
    grid = GridSpec(nx=10, ny=10, nz=3, dx=300.0, dy=300.0, dz=15.0)
    fluid = FluidProps(viscosity=1e-3, total_compressibility=1.5e-7)
    wells = (
        WellSpec("INJ", 0, 0, 0, "injector", WellControl(kind="bhp", bhp=2.9e7), layers=(0, 1, 2)),
        WellSpec(
            "PROD", 9, 9, 0, "producer",
            WellControl(kind="rate", rate=900.0, bhp=6.9e6), layers=(0, 1, 2),
        ),
    )
    schedule = WellSchedule(wells=wells, dt_days=15.0, n_steps=120, p_init=2.5e7, fluid=fluid)
    return CaseRecipe(
        name="spe1-analog",
        grid=grid,
        schedule=schedule,
        observe=ObservationSpec(kind="producer_bhp", well="PROD", unit_scale=1.0 / PSI_TO_PA),
        truth_base=(200.0, 200.0, 20.0),
        truth_variation=(60.0, 60.0, 6.0),
        truth_correlation=(2.0, 2.0, 1.0),
        noise_amplitude=(60.0, 60.0, 6.0),
        noise_correlation=(2.0, 2.0, 1.0),
        action_bound=(100.0, 100.0, 100.0),
        reg_weight=0.1,
        tolerance=1000.0,
        reward_solved=1e4,
        reward_diverged=-1e4,
        reward_timed_out=-1e4,
        holdout_steps=24,
    )


def _spe9_analog_recipe() -> CaseRecipe:
    """24x25x15 stress case: 25 producers, one injector, field rate observed."""
    grid = GridSpec(nx=24, ny=25, nz=15, dx=100.0, dy=100.0, dz=10.0)
    fluid = FluidProps(viscosity=1e-3, total_compressibility=1.5e-7)
    producers = []
    positions = [2, 7, 12, 17, 22]
    idx = 0
    for j in positions:
        for i in positions:
            idx += 1
            producers.append(
                WellSpec(
                    f"PROD{idx:02d}", min(i, grid.nx - 1), j, 0, "producer",
                    WellControl(kind="rate", rate=250.0, bhp=6.9e6), layers=(0, 1, 2),
                )
            )
    wells = (
        WellSpec(
            "INJ", 11, 12, 12, "injector",
            WellControl(kind="rate", rate=800.0, bhp=3.4e7), layers=(12, 13, 14),
        ),
        *producers,
    )
    schedule = WellSchedule(wells=wells, dt_days=15.0, n_steps=120, p_init=2.48e7, fluid=fluid)
    return CaseRecipe(
        name="spe9-analog",
        grid=grid,
        schedule=schedule,
        observe=ObservationSpec(kind="field_rate"),
        truth_base=(150.0, 150.0, 15.0),
        truth_variation=(50.0, 50.0, 5.0),
        truth_correlation=(3.0, 3.0, 1.0),
        noise_amplitude=(50.0, 50.0, 5.0),
        noise_correlation=(3.0, 3.0, 1.0),
        action_bound=(100.0, 100.0, 1.0),
        reg_weight=1.0,
        tolerance=2500.0,
        reward_solved=2.5e6,
        reward_diverged=-2.5e6,
        reward_timed_out=-1.25e6,
        holdout_steps=24,
    )


PRESETS = {
    "reduced": _reduced_recipe,
    "spe1-analog": _spe1_analog_recipe,
    "spe9-analog": _spe9_analog_recipe,
}


def preset_recipe(name: str) -> CaseRecipe:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
