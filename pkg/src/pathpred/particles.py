"""Particle propagation through the motion model over an N-step horizon.

Each particle is a weighted 2-D position carrying its own recurrent cell
state. One prediction step: pass all particles through the model, shift
each particle's offset mixture by the particle that generated it,
aggregate everything into one M*K-component mixture using the current
weights, resample M particles from it (new particles inherit the cell
state of the component's originating particle), then re-weight.

There are no measurement updates; resampling happens unconditionally at
every step.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import gmm
from .errors import HorizonTooLong
from .lstm_mdl import CellState, LstmMdlModel, forward_step_batch, precondition

DEFAULT_HORIZON_CAP = 512


@dataclass(frozen=True)
class WeightingStrategy:
    """One of: unweighted, density, temperature(tau), interpolation(kappa).

    Temperature and interpolation both start from density-value weights
    and then reshape them.
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in ("unweighted", "density", "temperature", "interpolation"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "temperature":
            if self.param is None or self.param <= 0:
                raise ValueError("temperature requires tau > 0")
        elif self.kind == "interpolation":
            if self.param is None or not 0.0 <= self.param <= 1.0:
                raise ValueError("interpolation requires kappa in [0, 1]")
        elif self.param is not None:
            raise ValueError(f"{self.kind} weighting takes no parameter")

    @classmethod
    def unweighted(cls):
        return cls("unweighted")

    @classmethod
    def density(cls):
        return cls("density")

    @classmethod
    def temperature(cls, tau: float):
        return cls("temperature", tau)

    @classmethod
    def interpolation(cls, kappa: float):
        return cls("interpolation", kappa)

    def label(self) -> str:
        if self.kind == "unweighted":
            return "-"
        if self.kind == "density":
            return "density"
        if self.kind == "temperature":
            return f"tau={self.param:g}"
        return f"kappa={self.param:g}"


def uniform_weights(count: int) -> np.ndarray:
    return np.full(count, 1.0 / count)


def density_weights(positions: np.ndarray, mix: gmm.GaussianMixture2D):
    """Weights proportional to the mixture density at each particle.

    Returns (weights, degenerate). If every density underflows to zero the
    weights fall back to uniform and ``degenerate`` is True.
    """
    dens = gmm.density_many(mix, positions)
    total = float(dens.sum())
    if total <= 0.0 or not np.isfinite(total):
        return uniform_weights(positions.shape[0]), True
    return dens / total, False


def temperature_weights(weights: np.ndarray, tau: float) -> np.ndarray:
    """Power transform w^(1/tau), renormalized; computed in log space.

    tau = 1 is the identity; tau -> 0 sharpens towards the largest weight;
    tau -> inf flattens towards uniform.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    weights = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logw = np.log(weights) / tau
    logw -= logw.max()
    out = np.exp(logw)
    return out / out.sum()


def interpolation_weights(weights: np.ndarray, kappa: float) -> np.ndarray:
    """Blend each weight with its complement: (1-k)*w + k*(1-w), renormalized.

    kappa = 0 is the identity, kappa = 0.5 is uniform, and kappa > 0.5
    reverses the ordering of the weights.
    """
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    weights = np.asarray(weights, dtype=np.float64)
    out = (1.0 - kappa) * weights + kappa * (1.0 - weights)
    total = out.sum()
    if total <= 0.0:  # kappa = 1 with a single particle of weight 1
        return uniform_weights(weights.shape[0])
    return out / total


def apply_weighting(strategy: WeightingStrategy, positions: np.ndarray, mix: gmm.GaussianMixture2D):
    """Weight a particle set against the mixture that produced it.

    Returns (weights, degenerate_flag).
    """
    if strategy.kind == "unweighted":
        return uniform_weights(positions.shape[0]), False
    weights, degenerate = density_weights(positions, mix)
    if strategy.kind == "temperature":
        weights = temperature_weights(weights, strategy.param)
    elif strategy.kind == "interpolation":
        weights = interpolation_weights(weights, strategy.param)
    return weights, degenerate


@dataclass
class ParticleSet:
    """M weighted particles with their recurrent states (batch dim M)."""

    positions: np.ndarray  # (M, 2)
    weights: np.ndarray    # (M,), sums to 1 within 1e-9
    states: CellState

    def __post_init__(self):
        m = self.positions.shape[0]
        if m < 1:
            raise ValueError("particle set needs at least one particle")
        if self.weights.shape != (m,):
            raise ValueError("one weight per particle required")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("particle weights must sum to 1 within 1e-9")

    @property
    def size(self) -> int:
        return self.positions.shape[0]


@dataclass
class PredictionResult:
    """Per-step aggregated mixtures and particle sets over the horizon.

    ``mixtures[0]`` is the K-component preconditioning mixture; every later
    entry has M*K components. ``particle_sets``/``ancestors`` are None when
    history is dropped to bound memory (the final set is always kept).
    ``ancestors[s]`` maps each particle of step s+1 to the index of its
    parent particle in step s's set (entry 0 is None: the first set has a
    single shared ancestor, the preconditioned state).
    """

    mixtures: list
    particle_sets: list | None
    final: ParticleSet
    ancestors: list | None
    degenerate_steps: int


def propagate(
    model: LstmMdlModel,
    obs: np.ndarray,
    horizon: int,
    num_particles: int,
    sampling: str = "multinomial",
    weighting: WeightingStrategy = WeightingStrategy.unweighted(),
    rng: np.random.Generator | None = None,
    keep_history: bool = True,
    horizon_cap: int = DEFAULT_HORIZON_CAP,
) -> PredictionResult:
    """Predict ``horizon`` steps ahead with ``num_particles`` particles.

    ``obs`` is the observed trajectory prefix, shape (T, 2) with T >= 1.
    Component-to-ancestor mapping: aggregated component c came from
    particle c // K, which is whose cell state a resampled particle
    inherits.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon > horizon_cap:
        raise HorizonTooLong(f"horizon {horizon} exceeds cap {horizon_cap}")
    if num_particles < 1:
        raise ValueError("num_particles must be >= 1")
    if rng is None:
        raise ValueError("an explicit numpy Generator is required for reproducibility")
    if sampling not in gmm.SAMPLING_STRATEGIES:
        raise ValueError(f"unknown sampling strategy {sampling!r}")

    k = model.config.num_components
    degenerate_steps = 0

    state0, position_mix = precondition(model, obs)
    positions, _ = gmm.sample_with_indices(position_mix, num_particles, sampling, rng)
    # every first-generation particle inherits the preconditioned state
    states = CellState(
        np.repeat(state0.h, num_particles, axis=1),
        np.repeat(state0.c, num_particles, axis=1),
    )
    weights, degenerate = apply_weighting(weighting, positions, position_mix)
    degenerate_steps += int(degenerate)

    current = ParticleSet(positions, weights, states)
    mixtures = [position_mix]
    history = [current] if keep_history else None
    ancestors = [None] if keep_history else None

    for _step in range(2, horizon + 1):
        new_states, offset_batch = forward_step_batch(model, current.states, current.positions)
        shifted_means = offset_batch.means + current.positions[:, None, :]
        aggregated = gmm.aggregate_arrays(
            shifted_means, offset_batch.stds, offset_batch.corrs, offset_batch.pis, current.weights
        )
        positions, comp_idx = gmm.sample_with_indices(aggregated, num_particles, sampling, rng)
        parent = comp_idx // k
        states = new_states.take(parent)
        weights, degenerate = apply_weighting(weighting, positions, aggregated)
        degenerate_steps += int(degenerate)
        current = ParticleSet(positions, weights, states)
        mixtures.append(aggregated)
        if keep_history:
            history.append(current)
            ancestors.append(parent)

    return PredictionResult(
        mixtures=mixtures,
        particle_sets=history,
        final=current,
        ancestors=ancestors,
        degenerate_steps=degenerate_steps,
    )


def write_result_jsonl(result: PredictionResult, path):
    """One JSON record per horizon step: aggregated mixture + particles."""
    sets = result.particle_sets
    if sets is None:
        sets = [None] * (len(result.mixtures) - 1) + [result.final]
    with open(path, "w") as fh:
        for step, (mix, pset) in enumerate(zip(result.mixtures, sets), start=1):
            record = {
                "step": step,
                "mixture": {
                    "weights": mix.weights.tolist(),
                    "means": mix.means.tolist(),
                    "stds": mix.stds.tolist(),
                    "corrs": mix.corrs.tolist(),
                },
            }
            if pset is not None:
                record["particles"] = {
                    "x": pset.positions[:, 0].tolist(),
                    "y": pset.positions[:, 1].tolist(),
                    "weight": pset.weights.tolist(),
                }
            fh.write(json.dumps(record) + "\n")


def write_particles_csv(result: PredictionResult, path):
    """Flat particle table: step,x,y,weight."""
    sets = result.particle_sets
    if sets is None:
        sets = [None] * (len(result.mixtures) - 1) + [result.final]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "x", "y", "weight"])
        for step, pset in enumerate(sets, start=1):
            if pset is None:
                continue
            for i in range(pset.size):
                writer.writerow(
                    [
                        step,
                        f"{pset.positions[i, 0]:.6f}",
                        f"{pset.positions[i, 1]:.6f}",
                        f"{pset.weights[i]:.9f}",
                    ]
                )
