"""Sequential Bayesian design for a locally accurate surrogate (SBD-LAS).

Each iteration samples the surrogate posterior under the current Gaussian
prior, summarizes it by its first two moments, optionally extrapolates the
mean one step ahead, and retrains the surrogate on fresh fine-solver
evaluations drawn from the new prior. The final estimate samples the
surrogate likelihood under the original problem prior.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .fem import DomainError, SolverError
from .models import ForwardModel, Observation, misfit
from .sampler import ChainConfig, ChainResult, GaussianState, default_jitter, gaussian_moments, run_chain
from .surrogate import NetConfig, SurrogateNet, TrainingSet, train

log = logging.getLogger(__name__)


class SBDError(RuntimeError):
    """A failure inside the design loop; ``partial`` holds what finished."""

    def __init__(self, iteration: int, phase: str, cause: Exception, partial: "SBDResult | None" = None):
        super().__init__(f"iteration {iteration} ({phase}): {cause}")
        self.iteration = iteration
        self.phase = phase
        self.partial = partial


def estimation_error(theta_hat, theta_star) -> float:
    """Mean squared parameter error |theta_hat - theta*|^2 / p."""
    a = np.asarray(theta_hat, dtype=float)
    b = np.asarray(theta_star, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2) / a.size)


def one_step_ahead(history: list[GaussianState], alpha: float) -> GaussianState:
    """Extrapolate the mean linearly: mu_k + alpha (mu_k - mu_{k-1}).

    The covariance of the latest state is passed through untouched. With a
    single entry there is no increment to extrapolate and it is returned
    as is.
    """
    if not history:
        raise ValueError("prior history is empty")
    if alpha < 0:
        raise ValueError("step ratio must be non-negative")
    last = history[-1]
    if len(history) == 1 or alpha == 0:
        return last
    mean = last.mean + alpha * (last.mean - history[-2].mean)
    return GaussianState(mean, last.cov)


def safe_potential(model: Callable[[np.ndarray], np.ndarray], obs: Observation) -> Callable[[np.ndarray], float]:
    """Phi for ``model``; solver failures far in the tails count as zero likelihood."""

    def phi(theta):
        try:
            return misfit(model(theta), obs)
        except (DomainError, SolverError, FloatingPointError):
            return float("inf")

    return phi


def initial_prior(coarse: ForwardModel, obs: Observation, chain: ChainConfig, prior_pi: GaussianState) -> GaussianState:
    """Moments of the coarse-model posterior under the problem prior."""
    res = run_chain(safe_potential(coarse, obs), prior_pi, chain)
    return gaussian_moments(res.samples)


@dataclass
class SBDConfig:
    iterations: int = 10
    points: int = 500
    alpha: float = 0.0
    chain: ChainConfig = field(default_factory=lambda: ChainConfig(steps=50000, beta=0.008))
    initial_chain: ChainConfig = field(default_factory=lambda: ChainConfig(steps=200000, beta=0.008))
    final_chain: ChainConfig | None = None
    jitter: float | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.points < 1:
            raise ValueError("iterations and training points per iteration must be >= 1")
        if self.alpha < 0:
            raise ValueError("step ratio alpha must be non-negative")

    def to_dict(self) -> dict:
        def chain(c):
            if c is None:
                return None
            d = asdict(c)
            d["theta0"] = None if c.theta0 is None else np.asarray(c.theta0).tolist()
            return d

        return {
            "iterations": self.iterations,
            "points": self.points,
            "alpha": self.alpha,
            "chain": chain(self.chain),
            "initial_chain": chain(self.initial_chain),
            "final_chain": chain(self.final_chain),
            "jitter": self.jitter,
            "seed": self.seed,
        }


@dataclass
class IterationRecord:
    iteration: int
    error: float | None
    acceptance_rate: float
    train_loss: float | None
    fine_calls: int
    posterior_mean: list[float]


@dataclass
class SBDResult:
    surrogate: SurrogateNet | None
    samples: np.ndarray | None
    theta_hat: np.ndarray | None
    errors: list[float]
    fine_calls: int
    history: list[GaussianState]
    records: list[IterationRecord]
    initial: GaussianState | None = None
    final_acceptance: float | None = None
    final_error: float | None = None


def _stage_seeds(seed: int, iterations: int) -> dict[str, list[int]]:
    ss = np.random.SeedSequence(seed)
    init, draws, chains, nets, final = ss.spawn(5)

    def ints(s, n):
        return [int(c.generate_state(1)[0]) for c in s.spawn(n)]

    return {
        "init": ints(init, 1),
        "draws": ints(draws, iterations),
        "chains": ints(chains, iterations),
        "nets": ints(nets, iterations),
        "final": ints(final, 1),
    }


def run_sbd_las(
    fine: ForwardModel,
    coarse: ForwardModel,
    obs: Observation,
    prior_pi: GaussianState,
    cfg: SBDConfig,
    net_cfg: NetConfig,
    theta_star=None,
    initial_state: GaussianState | None = None,
    checkpoint_dir: str | Path | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
    resume_from: str | Path | None = None,
) -> SBDResult:
    """Run the design loop and the final inversion.

    The surrogate is trained ``cfg.iterations`` times on ``cfg.points``
    fresh fine evaluations each, so the fine solver is called exactly
    iterations * points times. Iteration k samples the posterior under
    surrogate k and the current prior; the training draw after the last
    posterior is skipped because no later posterior would use it.

    ``initial_state`` replaces the coarse-solver initial prior when given.
    ``checkpoint_dir`` receives the surrogate and prior history after each
    iteration; ``resume_from`` continues from such a checkpoint (a state
    file or a directory, in which case the latest state is used).
    ``errors`` starts with the error of the initial prior mean, followed
    by the posterior-mean error of every iteration (needs ``theta_star``).
    """
    seeds = _stage_seeds(cfg.seed, cfg.iterations)
    c2 = cfg.jitter
    fine_start = fine.calls
    history: list[GaussianState] = []
    records: list[IterationRecord] = []
    errors: list[float] = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    start = 0

    def err(theta):
        return None if theta_star is None else estimation_error(theta, theta_star)

    def partial(surrogate=None):
        return SBDResult(surrogate, None, None, errors, fine.calls - fine_start, history, records, initial_state)

    def jittered(state: GaussianState) -> GaussianState:
        return state.with_jitter(default_jitter(state.cov) if c2 is None else c2)

    def retrain(k: int, prior: GaussianState, warm: bool):
        rng = np.random.default_rng(seeds["draws"][k])
        thetas = prior.sample(rng, cfg.points)
        data = TrainingSet.collect(thetas, fine, coarse, cfg.workers)
        return train(surrogate, data, net_cfg, warm_start=warm, seed=seeds["nets"][k]).final_mse

    if resume_from is not None:
        ck = load_checkpoint(resume_from, coarse, net_cfg)
        surrogate, prior, initial_state = ck.surrogate, ck.next_prior, ck.initial
        history, records, errors = ck.history, ck.records, ck.errors
        fine_start -= ck.fine_calls
        start = ck.iteration + 1
        loss = None
    else:
        try:
            if initial_state is None:
                initial_state = initial_prior(coarse, obs, cfg.initial_chain.replace(seed=seeds["init"][0]), prior_pi)
            prior = jittered(initial_state)
        except Exception as exc:
            raise SBDError(0, "initial prior", exc, partial()) from exc
        if theta_star is not None:
            errors.append(err(initial_state.mean))
        surrogate = SurrogateNet(coarse, net_cfg)
        try:
            loss = retrain(0, prior, warm=False)
        except Exception as exc:
            raise SBDError(0, "surrogate training", exc, partial()) from exc

    for k in range(start, cfg.iterations):
        if k > start or (k == start and resume_from is not None):
            try:
                loss = retrain(k, prior, warm=True)
            except Exception as exc:
                raise SBDError(k, "surrogate training", exc, partial(surrogate)) from exc
        try:
            chain_cfg = cfg.chain.replace(seed=seeds["chains"][k], theta0=prior.mean)
            res = run_chain(safe_potential(surrogate, obs), prior, chain_cfg)
            state = gaussian_moments(res.samples)
        except Exception as exc:
            raise SBDError(k, "posterior sampling", exc, partial(surrogate)) from exc
        history.append(state)
        e = err(state.mean)
        if e is not None:
            errors.append(e)
        rec = IterationRecord(k, e, res.acceptance_rate, loss, fine.calls - fine_start, state.mean.tolist())
        records.append(rec)
        log.info("iteration %d: error=%s acceptance=%.3f fine_calls=%d", k, e, res.acceptance_rate, rec.fine_calls)
        if on_iteration is not None:
            on_iteration(rec)

        prior = jittered(one_step_ahead(history, cfg.alpha))
        if ckpt is not None:
            _write_checkpoint(ckpt, k, surrogate, history, prior, initial_state, records, errors)

    final_cfg = (cfg.final_chain or cfg.chain).replace(seed=seeds["final"][0], theta0=prior.mean)
    try:
        final = run_chain(safe_potential(surrogate, obs), prior_pi, final_cfg)
    except Exception as exc:
        raise SBDError(cfg.iterations, "final inversion", exc, partial(surrogate)) from exc
    theta_hat = final.mean
    return SBDResult(
        surrogate=surrogate,
        samples=final.samples,
        theta_hat=theta_hat,
        errors=errors,
        fine_calls=fine.calls - fine_start,
        history=history,
        records=records,
        initial=initial_state,
        final_acceptance=final.acceptance_rate,
        final_error=err(theta_hat),
    )


def _write_checkpoint(directory: Path, k: int, surrogate, history, prior, initial, records, errors) -> None:
    surrogate.save(directory / f"surrogate_{k:03d}.bin")
    state = {
        "iteration": k,
        "surrogate": f"surrogate_{k:03d}.bin",
        "initial": None if initial is None else initial.to_dict(),
        "history": [h.to_dict() for h in history],
        "next_prior": prior.to_dict(),
        "records": [asdict(r) for r in records],
        "errors": list(errors),
        "fine_calls": records[-1].fine_calls if records else 0,
    }
    (directory / f"state_{k:03d}.json").write_text(json.dumps(state))


@dataclass
class Checkpoint:
    iteration: int
    surrogate: SurrogateNet
    initial: GaussianState | None
    history: list[GaussianState]
    next_prior: GaussianState
    records: list[IterationRecord]
    errors: list[float]
    fine_calls: int


def load_checkpoint(path, coarse: ForwardModel, net_cfg: NetConfig | None = None) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        states = sorted(path.glob("state_*.json"))
        if not states:
            raise FileNotFoundError(f"no checkpoint state in {path}")
        path = states[-1]
    d = json.loads(path.read_text())
    net = SurrogateNet.load(path.parent / d["surrogate"], coarse, net_cfg)
    return Checkpoint(
        iteration=d["iteration"],
        surrogate=net,
        initial=None if d["initial"] is None else GaussianState.from_dict(d["initial"]),
        history=[GaussianState.from_dict(h) for h in d["history"]],
        next_prior=GaussianState.from_dict(d["next_prior"]),
        records=[IterationRecord(**r) for r in d["records"]],
        errors=list(d["errors"]),
        fine_calls=d["fine_calls"],
    )


def run_pcn_baseline(model: ForwardModel, obs: Observation, prior_pi: GaussianState, chain: ChainConfig) -> ChainResult:
    """Plain pCN inversion with a single forward model (fine or coarse reference)."""
    return run_chain(safe_potential(model, obs), prior_pi, chain)
