"""Training loops for OT maps and Wasserstein-2 barycenters.

Each iteration draws one condition S, one data batch X from the matching
input distribution and an independent latent batch Z, then takes a single
Adam step on

    -mean log p(X | S)  +  zeta_t * transport cost(Z),

where the transport cost is the squared distance between the two
conditional pushforwards (OT) or between the sampled pushforward and the
weighted mean of all pushforwards (barycenter), and zeta_t follows a
geometric decay so the pushforward constraint dominates at convergence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .errors import ContractViolation, NonFiniteError, TrainingDiverged
from .flows import ConditionalFlowModel, ConditionEncoding
from .util import INIT_STREAM, TRAIN_STREAM, chunks, derive_seed, named_rng, single_thread_blas

EVAL_CHUNK = 16384

Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class WeightSchedule:
    """Geometric decay of the transport-cost coefficient.

    zeta_t = 10 ** (start_exp + (end_exp - start_exp) * (t - 1) / (T - 1)),
    strictly decreasing whenever end_exp < start_exp.
    """

    start_exp: float
    end_exp: float
    total_iterations: int
    kind: str = "logspace"

    def __post_init__(self):
        if self.kind != "logspace":
            raise ContractViolation(f"WeightSchedule: unknown kind '{self.kind}'")
        if self.total_iterations < 2:
            raise ContractViolation("WeightSchedule: need at least 2 iterations")


def schedule_value(schedule: WeightSchedule, t: int) -> float:
    if not 1 <= t <= schedule.total_iterations:
        raise ContractViolation(
            f"schedule_value: t={t} outside [1, {schedule.total_iterations}]"
        )
    frac = (t - 1) / (schedule.total_iterations - 1)
    return 10.0 ** (schedule.start_exp + (schedule.end_exp - schedule.start_exp) * frac)


@dataclass(frozen=True)
class TrainSpec:
    """Everything one training run depends on, except the data samplers."""

    iterations: int
    batch_size: int
    learning_rate: float
    schedule: WeightSchedule
    seed: int
    weights: tuple[float, ...] | None = None
    n_levels: int = 1
    couplings_per_level: int = 8
    hidden: tuple[int, ...] = (64, 64)
    clamp: float = 5.0
    residual: bool = True
    latent_batch: int | None = None
    likelihood_only: bool = False

    def __post_init__(self):
        if self.iterations < 2:
            raise ContractViolation("TrainSpec: iterations must be >= 2")
        if self.batch_size < 1:
            raise ContractViolation("TrainSpec: batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation("TrainSpec: learning_rate must be positive")
        if self.schedule.total_iterations != self.iterations:
            raise ContractViolation("TrainSpec: schedule length must match iterations")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
                raise ContractViolation("TrainSpec: weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class SamplerSet:
    """Indexed input distributions, their weights and condition encoding.

    Samplers must be pure functions of (rng, n).
    """

    samplers: tuple[Sampler, ...]
    weights: tuple[float, ...]
    d: int
    encoding: ConditionEncoding

    def __post_init__(self):
        if len(self.samplers) != self.encoding.n_conditions:
            raise ContractViolation("SamplerSet: one sampler per condition required")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.samplers),) or w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
            raise ContractViolation("SamplerSet: weights must be non-negative and sum to 1")


@dataclass
class TrainResult:
    model: ConditionalFlowModel
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    # rows: (iteration, nll, l2_cost, zeta, total)


def write_trace_csv(path, trace, version: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# flowot {version}\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "nll", "l2_cost", "zeta", "total"])
        for row in trace:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4])])


def _probe_dim(sampler: Sampler) -> int:
    probe = sampler(np.random.default_rng(0), 1)
    if probe.ndim != 2:
        raise ContractViolation("sampler must return [n, d] arrays")
    return probe.shape[1]


def _build_model(d: int, encoding: ConditionEncoding, spec: TrainSpec, weights=None) -> ConditionalFlowModel:
    return ConditionalFlowModel(
        d=d,
        encoding=encoding,
        n_levels=spec.n_levels,
        couplings_per_level=spec.couplings_per_level,
        hidden=spec.hidden,
        clamp=spec.clamp,
        residual=spec.residual,
        seed=derive_init_seed(spec.seed),
        condition_weights=weights,
    )


def derive_init_seed(seed: int) -> int:
    return derive_seed(seed, INIT_STREAM)


def _grads_by_name(params: dict[str, Tensor], grad_map: dict[Tensor, Tensor]) -> dict[str, Tensor]:
    return {name: grad_map[p] for name, p in params.items()}


def _grads_finite(grads: dict[str, Tensor]) -> bool:
    return all(np.isfinite(g.data).all() for g in grads.values())


def _train_loop(
    model: ConditionalFlowModel,
    samplers: Sequence[Sampler],
    condition_probs: np.ndarray,
    spec: TrainSpec,
    l2_cost_fn,
) -> TrainResult:
    params = model.parameters()
    state = AdamState(lr=spec.learning_rate)
    rng = named_rng(spec.seed, TRAIN_STREAM)
    n_cond = len(samplers)
    latent_batch = spec.latent_batch or spec.batch_size
    trace = []
    nonfinite_streak = 0

    with single_thread_blas():
        for t in range(1, spec.iterations + 1):
            zeta = schedule_value(spec.schedule, t)
            s_idx = int(rng.choice(n_cond, p=condition_probs))
            x_batch = samplers[s_idx](rng, spec.batch_size)
            # Drawn even in likelihood-only mode so the sample stream stays
            # aligned with a full run of the same seed.
            z_batch = rng.standard_normal((latent_batch, model.d))
            try:
                with Tape() as tape:
                    nll = ad.neg(ad.mean(model.log_prob(x_batch, s_idx)))
                    if spec.likelihood_only:
                        l2_val = 0.0
                        loss = nll
                    else:
                        l2 = l2_cost_fn(model, z_batch, s_idx)
                        l2_val = l2.item()
                        loss = ad.add(nll, ad.scalar_mul(l2, zeta))
                    loss_val = loss.item()
                    if not np.isfinite(loss_val):
                        raise NonFiniteError("loss", f"iteration {t}")
                    grads = _grads_by_name(params, tape.backward(loss))
                if not _grads_finite(grads):
                    raise NonFiniteError("gradients", f"iteration {t}")
            except NonFiniteError:
                nonfinite_streak += 1
                trace.append((t, float("nan"), float("nan"), zeta, float("nan")))
                if nonfinite_streak >= 50:
                    diverged = TrainingDiverged(t)
                    diverged.trace = trace
                    raise diverged
                continue
            nonfinite_streak = 0
            adam_step(params, grads, state)
            trace.append((t, nll.item(), l2_val, zeta, loss_val))
    return TrainResult(model=model, trace=trace)


def _ot_l2_cost(model: ConditionalFlowModel, z_batch: np.ndarray, _s_idx: int) -> Tensor:
    n = z_batch.shape[0]
    stacked = np.concatenate([z_batch, z_batch], axis=0)
    cond = np.repeat(np.arange(2), n)
    x, _ = model.forward(stacked, cond)
    f1 = ad.slice_axis(x, 0, 0, n)
    f2 = ad.slice_axis(x, 0, n, 2 * n)
    return ad.mean(ad.asum(ad.square(ad.sub(f1, f2)), axis=1))


def _make_barycenter_l2_cost(weights: np.ndarray):
    def cost(model: ConditionalFlowModel, z_batch: np.ndarray, s_idx: int) -> Tensor:
        n_cond = weights.shape[0]
        n = z_batch.shape[0]
        stacked = np.tile(z_batch, (n_cond, 1))
        cond = np.repeat(np.arange(n_cond), n)
        x, _ = model.forward(stacked, cond)
        parts = [ad.slice_axis(x, 0, k * n, (k + 1) * n) for k in range(n_cond)]
        mean_push = ad.scalar_mul(parts[0], float(weights[0]))
        for k in range(1, n_cond):
            mean_push = ad.add(mean_push, ad.scalar_mul(parts[k], float(weights[k])))
        return ad.mean(ad.asum(ad.square(ad.sub(parts[s_idx], mean_push)), axis=1))

    return cost


def train_ot(mu1_sampler: Sampler, mu2_sampler: Sampler, spec: TrainSpec) -> TrainResult:
    """Learn a joint two-condition flow whose pushforward gap is the OT cost."""
    d1, d2 = _probe_dim(mu1_sampler), _probe_dim(mu2_sampler)
    if d1 != d2:
        raise ContractViolation(f"train_ot: sampler dims differ ({d1} vs {d2})")
    encoding = ConditionEncoding("one-hot", 2)
    model = _build_model(d1, encoding, spec)
    probs = np.array([0.5, 0.5])
    return _train_loop(model, (mu1_sampler, mu2_sampler), probs, spec, _ot_l2_cost)


def train_barycenter(sampler_set: SamplerSet, spec: TrainSpec) -> TrainResult:
    """Learn all input distributions and pull their pushforwards together."""
    weights = np.asarray(sampler_set.weights, dtype=np.float64)
    model = _build_model(sampler_set.d, sampler_set.encoding, spec, weights=weights)
    return _train_loop(
        model,
        sampler_set.samplers,
        weights,
        spec,
        _make_barycenter_l2_cost(weights),
    )


# ---------------------------------------------------------------------------
# extraction from trained models
# ---------------------------------------------------------------------------


def _require_two_conditions(model: ConditionalFlowModel, what: str):
    if model.encoding.n_conditions != 2:
        raise ContractViolation(
            f"{what}: needs a 2-condition model, got {model.encoding.n_conditions}"
        )


def _eval_forward(model: ConditionalFlowModel, z: np.ndarray, cond) -> np.ndarray:
    out = np.empty_like(z)
    for lo, hi in chunks(z.shape[0], EVAL_CHUNK):
        c = cond if np.ndim(cond) == 0 else cond[lo:hi]
        out[lo:hi] = model.forward(z[lo:hi], c)[0].data
    return out


def _eval_inverse(model: ConditionalFlowModel, x: np.ndarray, cond) -> np.ndarray:
    out = np.empty_like(x)
    for lo, hi in chunks(x.shape[0], EVAL_CHUNK):
        c = cond if np.ndim(cond) == 0 else cond[lo:hi]
        out[lo:hi] = model.inverse(x[lo:hi], c)[0].data
    return out


def extract_ot_map(model: ConditionalFlowModel, source: int = 0, target: int = 1):
    """The learned transport map: invert at the source, push at the target."""
    _require_two_conditions(model, "extract_ot_map")
    if {source, target} != {0, 1}:
        raise ContractViolation("extract_ot_map: source/target must be the two condition indices")

    def transport(x: np.ndarray) -> np.ndarray:
        with single_thread_blas():
            return _eval_forward(model, _eval_inverse(model, np.asarray(x, dtype=np.float64), source), target)

    return transport


@dataclass(frozen=True)
class W2Estimate:
    value: float
    standard_error: float
    n_samples: int


def estimate_w2(model: ConditionalFlowModel, n_mc: int, rng: np.random.Generator) -> W2Estimate:
    """Monte-Carlo squared-distance between the two conditional pushforwards."""
    _require_two_conditions(model, "estimate_w2")
    if n_mc < 2:
        raise ContractViolation("estimate_w2: n_mc must be >= 2")
    sq = np.empty(n_mc)
    with single_thread_blas():
        for lo, hi in chunks(n_mc, EVAL_CHUNK):
            z = rng.standard_normal((hi - lo, model.d))
            diff = _eval_forward(model, z, 0) - _eval_forward(model, z, 1)
            sq[lo:hi] = (diff * diff).sum(axis=1)
    value = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(n_mc))
    return W2Estimate(value=value, standard_error=se, n_samples=n_mc)


def _require_weights(model: ConditionalFlowModel, what: str) -> np.ndarray:
    if model.condition_weights is None:
        raise ContractViolation(f"{what}: model carries no barycenter weights")
    return model.condition_weights


def _mean_pushforward(model: ConditionalFlowModel, z: np.ndarray) -> np.ndarray:
    weights = _require_weights(model, "barycenter map")
    acc = np.zeros_like(z)
    for k, w in enumerate(weights):
        acc += w * _eval_forward(model, z, k)
    return acc


def barycenter_push(model: ConditionalFlowModel, points: np.ndarray, s: int, direction: str) -> np.ndarray:
    """Transport between an input distribution and the learned barycenter.

    direction "to":   data point x of input s  ->  barycenter point h(f^{-1}(x, s))
    direction "from": latent point z           ->  input-s point f(z, s)
    """
    weights = _require_weights(model, "barycenter_push")
    if not 0 <= s < weights.shape[0]:
        raise ContractViolation(f"barycenter_push: condition {s} out of range")
    if direction not in ("to", "from"):
        raise ContractViolation(f"barycenter_push: unknown direction '{direction}'")
    points = np.asarray(points, dtype=np.float64)
    with single_thread_blas():
        if direction == "to":
            return _mean_pushforward(model, _eval_inverse(model, points, s))
        return _eval_forward(model, points, s)


def sample_barycenter(model: ConditionalFlowModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the learned barycenter h(Z), Z ~ N(0, I)."""
    if n < 1:
        raise ContractViolation("sample_barycenter: n must be >= 1")
    with single_thread_blas():
        return _mean_pushforward(model, rng.standard_normal((n, model.d)))


def mean_nll(model: ConditionalFlowModel, x: np.ndarray, cond) -> float:
    """Average negative log-likelihood of a held-out batch under condition cond."""
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    with single_thread_blas():
        for lo, hi in chunks(x.shape[0], EVAL_CHUNK):
            total += float(-model.log_prob(x[lo:hi], cond).data.sum())
    return total / x.shape[0]
