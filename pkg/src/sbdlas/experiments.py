"""Experiment presets and runners for the Darcy inversions and the two toys.

Every preset comes in a ``paper`` flavour, which encodes the published
settings, and a ``desk`` flavour scaled down to run in minutes on one core.
A run writes a manifest (JSON), CSV tables, error traces and anchor-field
snapshots into its output directory.
"""

from __future__ import annotations

import dataclasses
import logging
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import fem, io
from .gpr import GPRField, InterfaceSplit, KernelConfig, grid_nodes
from .models import (
    AlgebraicToyModel,
    DarcyModel,
    Observation,
    OdeToyModel,
    ZeroModel,
    synthesize_observation,
)
from .sampler import ChainConfig, GaussianState
from .sbd import SBDConfig, SBDResult, estimation_error, run_pcn_baseline, run_sbd_las
from .surrogate import NetConfig, SurrogateNet, TrainingSet, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1", "exp2", "exp3", "ode-toy", "algebraic-toy")
SCALES = ("desk", "paper")


class ConfigError(ValueError):
    pass


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase}: {cause}")
        self.phase = phase


@dataclass
class ExperimentConfig:
    experiment: str = "exp1"
    scale: str = "desk"
    # geometry and discretization
    domain: str = "unit"  # unit = [0,1]^2, centered = [-1,1]^2
    coarse_n: int = 7
    fine_n: int = 20
    anchors_per_side: int = 10
    obs_per_side: int = 5
    interface_radius: float | None = None
    # prior kernel
    gamma: float = 1.0
    ell: float = 0.5
    kernel_jitter: float = 1e-8
    # data
    delta: float = 0.0
    likelihood_sigma: float | None = None
    # SBD-LAS
    iterations: int = 10
    points: int = 500
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.5])
    steps: int = 50000
    beta: float = 0.008
    burn_in: float = 0.2
    thin: int = 10
    initial_steps: int = 200000
    initial_beta: float | None = None
    final_steps: int | None = None
    final_beta: float | None = None
    baseline_steps: int = 500000
    baseline_beta: float | None = None
    prior_jitter: float | None = None
    # surrogate network
    hidden: list[int] = field(default_factory=lambda: [500, 500, 500])
    activation: str = "sigmoid"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    # toy problems
    prior_scale: float = 1.0
    initial_mean: list[float] | None = None
    initial_std: float | None = None
    train_points: int = 10
    spaces: list[float] = field(default_factory=lambda: [10.0, 20.0, 40.0])
    # bookkeeping
    seed: int = 0
    truth_seed: int = 1
    noise_seed: int = 2
    baselines: bool = True
    workers: int = 1
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}")
        if self.domain not in ("unit", "centered"):
            raise ConfigError("domain must be 'unit' or 'centered'")
        for name in ("coarse_n", "fine_n", "anchors_per_side"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        for name in ("obs_per_side", "iterations", "points", "steps", "thin", "epochs", "batch_size", "train_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")
        for name in ("initial_beta", "final_beta", "baseline_beta"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if not 0 <= self.burn_in < 1:
            raise ConfigError("burn_in must lie in [0, 1)")
        if self.gamma <= 0 or self.ell <= 0:
            raise ConfigError("kernel gamma and ell must be positive")
        if self.delta < 0 or (self.likelihood_sigma is not None and self.likelihood_sigma <= 0):
            raise ConfigError("noise levels must be non-negative (likelihood_sigma positive)")
        if any(a < 0 for a in self.alphas) or not self.alphas:
            raise ConfigError("alphas must be a non-empty list of non-negative step ratios")
        if self.learning_rate <= 0 or any(h <= 0 for h in self.hidden):
            raise ConfigError("learning rate and hidden widths must be positive")
        if self.experiment == "exp3" and not (self.interface_radius and self.interface_radius > 0):
            raise ConfigError("exp3 needs a positive interface_radius")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def chain(self, steps=None, beta=None) -> ChainConfig:
        return ChainConfig(
            steps=steps if steps is not None else self.steps,
            beta=beta if beta is not None else self.beta,
            burn_in=self.burn_in,
            thin=self.thin,
        )

    def sbd_config(self, alpha: float) -> SBDConfig:
        return SBDConfig(
            iterations=self.iterations,
            points=self.points,
            alpha=alpha,
            chain=self.chain(),
            initial_chain=self.chain(self.initial_steps, self.initial_beta),
            final_chain=self.chain(self.final_steps, self.final_beta),
            jitter=self.prior_jitter,
            seed=self.seed,
            workers=self.workers,
        )

    def net_config(self, p: int, d: int) -> NetConfig:
        return NetConfig(
            p, d, tuple(self.hidden), self.activation, self.learning_rate, self.epochs, self.batch_size, self.seed
        )


_DARCY_FULL = dict(
    domain="unit", coarse_n=7, fine_n=20, anchors_per_side=10, obs_per_side=5, gamma=1.0, ell=0.5,
    hidden=[500, 500, 500], activation="sigmoid", steps=50000, beta=0.008, baseline_steps=500000,
)

PRESETS: dict[str, dict[str, dict]] = {
    "exp1": {
        "paper": dict(_DARCY_FULL, iterations=10, points=500, initial_steps=200000, alphas=[0.0, 0.1, 0.5]),
        "desk": dict(
            _DARCY_FULL, fine_n=14, anchors_per_side=6, iterations=5, points=100, steps=5000, beta=0.2,
            initial_steps=5000, final_steps=30000, baseline_steps=30000, delta=1e-4, likelihood_sigma=3e-3,
            alphas=[0.0],
        ),
    },
    "exp2": {
        "paper": dict(_DARCY_FULL, iterations=21, points=1000, initial_steps=500000, alphas=[0.0, 0.1, 0.5]),
        "desk": dict(
            _DARCY_FULL, fine_n=14, anchors_per_side=6, iterations=6, points=100, steps=5000, beta=0.2,
            initial_steps=5000, final_steps=30000, baseline_steps=30000, likelihood_sigma=3e-3,
            alphas=[0.0, 0.5],
        ),
    },
    "exp3": {
        "paper": dict(
            _DARCY_FULL, domain="centered", coarse_n=10, fine_n=26, anchors_per_side=20, ell=1.0,
            interface_radius=0.7, delta=0.1, iterations=10, points=1000, initial_steps=200000, alphas=[0.0],
        ),
        "desk": dict(
            _DARCY_FULL, domain="centered", coarse_n=10, fine_n=26, anchors_per_side=6, ell=1.0,
            interface_radius=0.7, delta=4e-3, iterations=5, points=100, steps=5000, beta=0.2,
            initial_steps=5000, final_steps=30000, baseline_steps=30000, alphas=[0.0],
        ),
    },
    "ode-toy": {
        "paper": dict(hidden=[20, 20, 20], activation="leaky_relu", epochs=2000, learning_rate=1e-3, train_points=10),
        "desk": dict(hidden=[20, 20, 20], activation="leaky_relu", epochs=2000, learning_rate=1e-3, train_points=10),
    },
    "algebraic-toy": {
        "paper": dict(
            hidden=[40, 40], activation="sigmoid", iterations=30, points=50, steps=5000, beta=0.5,
            final_steps=50000, final_beta=0.2, prior_scale=1.0, initial_mean=[0.0, 0.5], initial_std=0.2,
            prior_jitter=0.02, learning_rate=1e-2, epochs=300, alphas=[0.0, 1.0],
        ),
        "desk": dict(
            hidden=[40, 40], activation="sigmoid", iterations=30, points=50, steps=5000, beta=0.5,
            final_steps=50000, final_beta=0.2, prior_scale=1.0, initial_mean=[0.0, 0.5], initial_std=0.2,
            prior_jitter=0.02, learning_rate=1e-2, epochs=300, alphas=[0.0, 1.0],
        ),
    },
}


def preset(name: str, scale: str = "desk", **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}")
    d = dict(PRESETS[name][scale], experiment=name, scale=scale)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- truths


def exp2_truth(points: np.ndarray) -> np.ndarray:
    """h(x1, x2) = 0.5 sin(4 pi (x1 - 0.1)) + 0.5 sin(4 pi (x2 - 0.1)) + 0.5."""
    pts = np.atleast_2d(points)
    return 0.5 * np.sin(4 * np.pi * (pts[:, 0] - 0.1)) + 0.5 * np.sin(4 * np.pi * (pts[:, 1] - 0.1)) + 0.5


def truth_rule(cfg: ExperimentConfig) -> str:
    return {"exp1": "prior-draw", "exp2": "function-h", "exp3": "two-region-prior-draw"}[cfg.experiment]


# ---------------------------------------------------------------- Darcy setup


@dataclass
class DarcySetup:
    anchors: np.ndarray
    field: GPRField | InterfaceSplit
    prior: GaussianState
    fine: DarcyModel
    coarse: DarcyModel
    grid: fem.ObservationGrid
    theta_star: np.ndarray
    obs: Observation
    notes: list[str]


def darcy_setup(cfg: ExperimentConfig) -> DarcySetup:
    domain = fem.UNIT_SQUARE if cfg.domain == "unit" else fem.CENTERED_SQUARE
    anchors = grid_nodes(domain, cfg.anchors_per_side)
    kcfg = KernelConfig(cfg.gamma, cfg.ell)
    if cfg.interface_radius:
        field_ = InterfaceSplit(anchors, kcfg, cfg.interface_radius, cfg.kernel_jitter)
    else:
        field_ = GPRField(anchors, kcfg, cfg.kernel_jitter)
    prior = GaussianState(np.zeros(field_.dim), field_.prior_covariance())
    grid = fem.ObservationGrid.interior(domain, cfg.obs_per_side, cfg.delta)
    fine = DarcyModel(fem.build_mesh(domain, cfg.fine_n), field_, grid, name="fine")
    coarse = DarcyModel(fem.build_mesh(domain, cfg.coarse_n), field_, grid, name="coarse")

    if cfg.experiment == "exp2":
        theta_star = exp2_truth(anchors)
    else:
        theta_star = prior.sample(np.random.default_rng(cfg.truth_seed))
    obs = synthesize_observation(fine, theta_star, cfg.delta, cfg.noise_seed)
    if cfg.likelihood_sigma is not None:
        obs = obs.with_sigma(cfg.likelihood_sigma)

    notes = [f"observation grid: {cfg.obs_per_side}x{cfg.obs_per_side} equispaced interior points"]
    if cfg.experiment == "exp3":
        notes.append(
            f"structured meshes {cfg.coarse_n}x{cfg.coarse_n} / {cfg.fine_n}x{cfg.fine_n} stand in for the "
            "unstructured 92 / 654 point meshes"
        )
    if obs.noise_free:
        notes.append("noise-free data: unweighted misfit")
    return DarcySetup(anchors, field_, prior, fine, coarse, grid, theta_star, obs, notes)


# ---------------------------------------------------------------- runners


def _method_row(method, error, fine_calls, extra=None):
    row = {"method": method, "error": error, "fine_calls": fine_calls}
    if extra:
        row.update(extra)
    return row


def run_darcy(cfg: ExperimentConfig, out: Path) -> dict:
    try:
        setup = darcy_setup(cfg)
    except Exception as exc:
        raise PhaseError("setup", exc) from exc
    fine_setup_calls = setup.fine.calls
    io.export_field(setup.theta_star, setup.anchors, out / "field_truth.csv")
    rows = []
    results: dict[str, dict] = {}

    if cfg.baselines:
        bchain = cfg.chain(cfg.baseline_steps, cfg.baseline_beta).replace(seed=cfg.seed + 101)
        for name, model in (("pcn-fine", setup.fine), ("pcn-coarse", setup.coarse)):
            before = setup.fine.calls
            try:
                res = run_pcn_baseline(model, setup.obs, setup.prior, bchain)
            except Exception as exc:
                raise PhaseError(f"baseline {name}", exc) from exc
            err = estimation_error(res.mean, setup.theta_star)
            nf = setup.fine.calls - before
            rows.append(_method_row(name, err, nf, {"acceptance": res.acceptance_rate}))
            results[name] = {"theta_hat": res.mean, "acceptance": res.acceptance_rate}
            io.export_field(res.mean, setup.anchors, out / f"field_{name}.csv")
            log.info("%s: error=%.4f acceptance=%.3f", name, err, res.acceptance_rate)

    traces = {}
    for alpha in cfg.alphas:
        tag = f"sbd-las-alpha-{alpha:g}"
        fine_before = setup.fine.calls
        try:
            res = run_sbd_las(
                setup.fine,
                setup.coarse,
                setup.obs,
                setup.prior,
                cfg.sbd_config(alpha),
                cfg.net_config(setup.prior.dim, setup.grid.size),
                theta_star=setup.theta_star,
                checkpoint_dir=out / "checkpoints" / tag,
            )
        except Exception as exc:
            raise PhaseError(f"SBD-LAS alpha={alpha:g}", exc) from exc
        assert res.fine_calls == setup.fine.calls - fine_before
        rows.append(_method_row(tag, res.final_error, res.fine_calls, {"acceptance": res.final_acceptance}))
        results[tag] = _sbd_summary(res)
        traces[tag] = res.errors
        io.export_field(res.theta_hat, setup.anchors, out / f"field_{tag}.csv")
        res.surrogate.save(out / f"surrogate_{tag}.bin")

    _write_error_table(out / "table.csv", rows)
    _write_traces(out, traces)
    return {
        "rows": rows,
        "results": results,
        "traces": traces,
        "truth": {"rule": truth_rule(cfg), "theta_star": setup.theta_star},
        "observation": {
            "y": setup.obs.y,
            "sigma": setup.obs.sigma,
            "locations": setup.grid.locations,
            "synthesis_fine_calls": fine_setup_calls,
        },
        "notes": setup.notes,
    }


def _sbd_summary(res: SBDResult) -> dict:
    return {
        "theta_hat": res.theta_hat,
        "final_error": res.final_error,
        "fine_calls": res.fine_calls,
        "errors": res.errors,
        "iterations": [dataclasses.asdict(r) for r in res.records],
        "final_acceptance": res.final_acceptance,
    }


def _write_error_table(path, rows):
    extra = sorted({k for r in rows for k in r} - {"method", "error", "fine_calls"})
    io.write_table(path, ["method", "error", "fine_calls", *extra], [[r["method"], r["error"], r["fine_calls"], *[r.get(k) for k in extra]] for r in rows])


def _write_traces(out: Path, traces: dict[str, list[float]]):
    for tag, errs in traces.items():
        io.write_table(out / f"errors_{tag}.csv", ["iteration", "error"], [[i, e] for i, e in enumerate(errs)])


def run_algebraic_toy(cfg: ExperimentConfig, out: Path) -> dict:
    theta_star = np.array([2.5, 2.5])
    fine = AlgebraicToyModel()
    y = fine(theta_star)
    fine.reset_calls()
    obs = Observation(y, 0.0)
    prior = GaussianState(np.zeros(2), cfg.prior_scale**2 * np.eye(2))
    initial = None
    if cfg.initial_mean is not None:
        initial = GaussianState(np.asarray(cfg.initial_mean, float), (cfg.initial_std or 1.0) ** 2 * np.eye(2))
    rows, traces, results = [], {}, {}
    for alpha in cfg.alphas:
        tag = f"sbd-las-alpha-{alpha:g}"
        fine = AlgebraicToyModel()
        try:
            res = run_sbd_las(
                fine, ZeroModel(2, 2), obs, prior, cfg.sbd_config(alpha), cfg.net_config(2, 2),
                theta_star=theta_star, initial_state=initial,
            )
        except Exception as exc:
            raise PhaseError(f"SBD-LAS alpha={alpha:g}", exc) from exc
        crossing = first_crossing(res.errors, 0.05)
        rows.append(_method_row(tag, res.final_error, res.fine_calls, {"first_iteration_below_0.05": crossing}))
        traces[tag] = res.errors
        results[tag] = _sbd_summary(res)
    _write_error_table(out / "table.csv", rows)
    _write_traces(out, traces)
    return {
        "rows": rows,
        "results": results,
        "traces": traces,
        "truth": {"theta_star": theta_star},
        "observation": {"y": y},
        "notes": ["pure-network surrogate (coarse model is identically zero)", "initial prior given explicitly"],
    }


def first_crossing(errors, threshold: float) -> int | None:
    for i, e in enumerate(errors):
        if e is not None and e <= threshold:
            return i
    return None


# ---------------------------------------------------------------- ODE toy


def likelihood_region_mse(surrogate_like: Callable[[float], float], true_like: Callable[[float], float], log: bool = False, lo: float = 4.5, hi: float = 5.5, n: int = 20) -> float:
    """Mean squared gap between two likelihood curves on n points of [lo, hi].

    Both curves are rescaled to peak 1 over those points first, since they
    are only known up to a constant. With ``log`` the callables return
    log-likelihoods, which avoids underflow for badly wrong surrogates.
    """
    grid = np.linspace(lo, hi, n)

    def normalized(fn):
        v = np.array([float(fn(t)) for t in grid])
        if log:
            return np.exp(v - v.max())
        peak = v.max()
        return v / peak if peak > 0 else np.zeros_like(v)

    return float(np.mean((normalized(true_like) - normalized(surrogate_like)) ** 2))


def ode_log_likelihood(model: Callable[[np.ndarray], np.ndarray], y: np.ndarray) -> Callable[[float], float]:
    return lambda t: -0.5 * float(np.sum((y - model(np.array([t]))) ** 2))


ODE_REGIMES = ("global-accurate", "global-coarse", "local")


def ode_training_points(regime: str, space: float, n: int) -> np.ndarray:
    """Design points for the three surrogate regimes on the parameter space (0, space]."""
    if regime == "local":
        return np.linspace(4.5, 5.5, n)
    if regime == "global-coarse":
        return np.linspace(space / n, space, n)
    if regime == "global-accurate":
        m = int(round(10 * space))
        return np.linspace(space / m, space, m)
    raise ValueError(regime)


def ode_surrogate(points: np.ndarray, cfg: ExperimentConfig, seed: int) -> tuple[SurrogateNet, float]:
    model = OdeToyModel()
    net_cfg = cfg.net_config(1, model.output_dim)
    net = SurrogateNet(ZeroModel(1, model.output_dim), net_cfg)
    X = points[:, None]
    F = model.evaluate_many(X)
    report = train(net, TrainingSet(X, F, np.zeros_like(F)), net_cfg, warm_start=False, seed=seed)
    return net, report.final_mse


def run_ode_toy(cfg: ExperimentConfig, out: Path) -> dict:
    model = OdeToyModel()
    y = model(np.array([5.0]))
    true_like = ode_log_likelihood(model, y)
    rows = []
    regimes = ODE_REGIMES
    for space in cfg.spaces:
        row = {"space": f"(0,{space:g}]"}
        for regime in regimes:
            n = cfg.train_points if regime != "global-accurate" else None
            pts = ode_training_points(regime, space, n or cfg.train_points)
            net, _ = ode_surrogate(pts, cfg, cfg.seed)
            row[f"{regime}_n_train"] = pts.size
            row[f"{regime}_mse"] = likelihood_region_mse(ode_log_likelihood(net, y), true_like, log=True)
        rows.append(row)
    header = ["space"] + [f"{r}_{c}" for r in regimes for c in ("n_train", "mse")]
    io.write_table(out / "table1.csv", header, [[r[h] for h in header] for r in rows])
    return {"rows": rows, "truth": {"theta_star": 5.0}, "observation": {"y": y}, "notes": ["noise-free data"]}


# ---------------------------------------------------------------- entry point

RUNNERS = {
    "exp1": run_darcy,
    "exp2": run_darcy,
    "exp3": run_darcy,
    "algebraic-toy": run_algebraic_toy,
    "ode-toy": run_ode_toy,
}


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Run ``cfg`` and write all artifacts; returns the manifest.

    The manifest holds only deterministic content. Wall-clock data goes to
    a separate ``metadata.json``.
    """
    cfg.validate()
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    body = RUNNERS[cfg.experiment](cfg, out)
    manifest = {"config": cfg.to_dict(), **body}
    manifest["config"]["out"] = None
    io.write_json(out / "manifest.json", manifest)
    io.write_json(
        out / "metadata.json",
        {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "wall_seconds": time.time() - started,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    )
    return io.read_json(out / "manifest.json")


def format_report(manifest: dict) -> str:
    """Plain-text tables from a manifest, for the ``report`` command."""
    cfg = manifest["config"]
    lines = [f"experiment {cfg['experiment']} ({cfg['scale']} scale, seed {cfg['seed']})"]
    rows = manifest.get("rows", [])
    if cfg["experiment"] == "ode-toy":
        lines.append(f"{'space':<10}" + "".join(f"{r:>28}" for r in ODE_REGIMES))
        lines.append(f"{'':<10}" + "".join(f"{'N_train':>16}{'MSE':>12}" for _ in ODE_REGIMES))
        for r in rows:
            cells = "".join(f"{r[g + '_n_train']:>16}{_fmt(r[g + '_mse']):>12}" for g in ODE_REGIMES)
            lines.append(f"{r['space']:<10}" + cells)
        return "\n".join(lines)
    lines.append(f"{'method':<24}{'error':>12}{'N_f':>10}")
    for r in rows:
        lines.append(f"{r['method']:<24}{_fmt(r['error']):>12}{r['fine_calls']:>10}")
    for tag, errs in manifest.get("traces", {}).items():
        lines.append(f"{tag} error trace: " + " ".join(_fmt(e) for e in errs))
    for note in manifest.get("notes", []):
        lines.append(f"note: {note}")
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
