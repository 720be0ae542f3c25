"""Benchmark data sets, unexplained-variance metrics and the experiment runner.

Location-scatter families follow the standard construction: a base
distribution with identity covariance is pushed through symmetric positive
definite matrices M_s = R_s^T L R_s, where R_s is a Haar-random rotation and
L = diag(b^0/2, ..., b^(d-1)/2) with b = 4^(1/(d-1)).  For such families the
barycenter and all transport maps to it have closed forms through the
Gaussian fixed-point oracle, which is what the UVP metrics score against.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractViolation, DegenerateDistributionError, TrainingDiverged
from .flows import ConditionEncoding, save_checkpoint
from .oracle import (
    AffineMap,
    GaussianDist,
    bures_w2,
    gaussian_ot_map,
    haar_rotation,
    ls_barycenter_fixed_point,
    sqrtm_psd,
)
from .train import (
    SamplerSet,
    TrainSpec,
    WeightSchedule,
    barycenter_push,
    estimate_w2,
    extract_ot_map,
    sample_barycenter,
    train_barycenter,
    train_ot,
    write_trace_csv,
)
from .util import DATASET_STREAM, EVAL_STREAM, named_rng

RESULT_COLUMNS = [
    "run_id",
    "task",
    "base",
    "d",
    "n_inputs",
    "seed",
    "iters",
    "batch",
    "l2_uvp",
    "l2_uvp_se",
    "bw2_uvp",
    "w2_hat",
    "w2_ref",
    "wall_time_s",
    "status",
]

SWISS_T_MIN = 1.5 * np.pi
SWISS_T_MAX = 4.5 * np.pi


def make_swiss_roll(n: int, seed: int, noise: float = 0.05) -> np.ndarray:
    """2-D spiral: t ~ U[1.5 pi, 4.5 pi], point = (t cos t, t sin t) / (4.5 pi) + noise."""
    if n < 1:
        raise ContractViolation("make_swiss_roll: n must be >= 1")
    rng = np.random.default_rng(seed)
    return _swiss_roll_draw(rng, n, noise)


def _swiss_roll_draw(rng: np.random.Generator, n: int, noise: float) -> np.ndarray:
    t = rng.uniform(SWISS_T_MIN, SWISS_T_MAX, n)
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / SWISS_T_MAX
    if noise > 0:
        pts = pts + noise * rng.standard_normal((n, 2))
    return pts


def _scatter_eigenvalues(d: int) -> np.ndarray:
    b = 4.0 ** (1.0 / (d - 1))
    return 0.5 * b ** np.arange(d)


@dataclass(frozen=True)
class LocationScatterFamily:
    """n_inputs distributions M_s # mu_0 plus their closed-form descriptions."""

    base: str
    d: int
    n_inputs: int
    seed: int
    noise: float
    maps: tuple[np.ndarray, ...]
    weights: tuple[float, ...]

    def base_sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.base == "gaussian":
            return rng.standard_normal((n, self.d))
        if self.base == "uniform-cube":
            return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (n, self.d))
        return _swiss_roll_draw(rng, n, self.noise)

    def sampler(self, s: int):
        m = self.maps[s]

        def draw(rng: np.random.Generator, n: int) -> np.ndarray:
            return self.base_sample(rng, n) @ m  # m is symmetric

        return draw

    def sampler_set(self) -> SamplerSet:
        return SamplerSet(
            samplers=tuple(self.sampler(s) for s in range(self.n_inputs)),
            weights=self.weights,
            d=self.d,
            encoding=ConditionEncoding("one-hot", self.n_inputs),
        )

    @property
    def has_oracle(self) -> bool:
        """Closed forms need a centered, identity-covariance base."""
        return self.base in ("gaussian", "uniform-cube")

    def input_covariances(self) -> list[np.ndarray]:
        if not self.has_oracle:
            raise ContractViolation("input_covariances: no closed form for this base")
        return [m @ m for m in self.maps]

    def gaussians(self) -> list[GaussianDist] | None:
        if self.base != "gaussian":
            return None
        return [GaussianDist(np.zeros(self.d), m @ m) for m in self.maps]

    def oracle_barycenter(self) -> GaussianDist:
        """Moments of the true barycenter (exact for identity-covariance bases)."""
        cov, _ = ls_barycenter_fixed_point(self.input_covariances(), self.weights)
        return GaussianDist(np.zeros(self.d), cov)

    def oracle_map_to_barycenter(self, s: int) -> AffineMap:
        bar = self.oracle_barycenter()
        src = GaussianDist(np.zeros(self.d), self.maps[s] @ self.maps[s])
        return gaussian_ot_map(src, bar)[0]


def make_location_scatter(
    base: str,
    d: int,
    n: int,
    seed: int,
    weights=None,
    noise: float = 0.05,
) -> LocationScatterFamily:
    if base not in ("gaussian", "uniform-cube", "swiss-roll"):
        raise ContractViolation(f"make_location_scatter: unknown base '{base}'")
    if d < 2:
        raise ContractViolation("make_location_scatter: d must be >= 2")
    if base == "swiss-roll" and d != 2:
        raise ContractViolation("make_location_scatter: swiss-roll base is 2-D only")
    if n < 1:
        raise ContractViolation("make_location_scatter: n must be >= 1")
    if weights is None:
        weights = tuple(1.0 / n for _ in range(n))
    weights = tuple(float(w) for w in weights)
    if len(weights) != n or min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
        raise ContractViolation("make_location_scatter: weights must be non-negative and sum to 1")
    rng = named_rng(seed, DATASET_STREAM)
    lam = np.diag(_scatter_eigenvalues(d))
    maps = []
    for _ in range(n):
        r = haar_rotation(d, rng)
        m = r.T @ lam @ r
        maps.append(0.5 * (m + m.T))
    return LocationScatterFamily(
        base=base,
        d=d,
        n_inputs=n,
        seed=seed,
        noise=noise,
        maps=tuple(maps),
        weights=weights,
    )


@dataclass(frozen=True)
class RotatedGaussianFamily:
    """Zero-mean Gaussians whose covariance rotates in the first two coordinates."""

    d: int
    n_inputs: int
    angles: tuple[float, ...]
    covariances: tuple[np.ndarray, ...]
    weights: tuple[float, ...]

    @property
    def has_oracle(self) -> bool:
        return True

    def gaussians(self) -> list[GaussianDist]:
        return [GaussianDist(np.zeros(self.d), c) for c in self.covariances]

    def sampler(self, s: int):
        root = sqrtm_psd(self.covariances[s])

        def draw(rng: np.random.Generator, n: int) -> np.ndarray:
            return rng.standard_normal((n, self.d)) @ root

        return draw

    def sampler_set(self) -> SamplerSet:
        values = tuple(a / np.pi for a in self.angles)
        return SamplerSet(
            samplers=tuple(self.sampler(s) for s in range(self.n_inputs)),
            weights=self.weights,
            d=self.d,
            encoding=ConditionEncoding("scalar", self.n_inputs, values=values),
        )

    def oracle_barycenter(self) -> GaussianDist:
        cov, _ = ls_barycenter_fixed_point(list(self.covariances), self.weights)
        return GaussianDist(np.zeros(self.d), cov)

    def oracle_map_to_barycenter(self, s: int) -> AffineMap:
        bar = self.oracle_barycenter()
        return gaussian_ot_map(self.gaussians()[s], bar)[0]


def make_rotated_gaussians(d: int, n: int, seed: int = 0) -> RotatedGaussianFamily:
    """Conditions on the uniform angle grid of [0, pi]; the seed only matters
    to callers that want distinct sampler streams, the family itself is
    deterministic."""
    if d < 2:
        raise ContractViolation("make_rotated_gaussians: d must be >= 2")
    if n < 1:
        raise ContractViolation("make_rotated_gaussians: n must be >= 1")
    del seed
    sigma0 = np.diag(np.concatenate([[2.0], np.full(d - 1, 0.5)]))
    angles = np.linspace(0.0, np.pi, n) if n > 1 else np.array([0.0])
    covs = []
    for angle in angles:
        rot = np.eye(d)
        c, s = np.cos(angle), np.sin(angle)
        rot[0, 0], rot[0, 1], rot[1, 0], rot[1, 1] = c, -s, s, c
        cov = rot.T @ sigma0 @ rot
        covs.append(0.5 * (cov + cov.T))
    return RotatedGaussianFamily(
        d=d,
        n_inputs=n,
        angles=tuple(float(a) for a in angles),
        covariances=tuple(covs),
        weights=tuple(1.0 / n for _ in range(n)),
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UVPEstimate:
    value: float
    standard_error: float
    n_samples: int


def l2_uvp(t_true, t_hat, mu0_sampler, n_mc: int, rng: np.random.Generator) -> UVPEstimate:
    """100 * E|T(x) - That(x)|^2 / Var(T # mu0), Monte Carlo over mu0.

    The denominator is the trace of the empirical covariance of the true
    pushforward computed on the same draw.
    """
    if n_mc < 2:
        raise ContractViolation("l2_uvp: n_mc must be >= 2")
    x = mu0_sampler(rng, n_mc)
    pushed = np.asarray(t_true(x), dtype=np.float64)
    approx = np.asarray(t_hat(x), dtype=np.float64)
    denom = float(np.trace(np.cov(pushed, rowvar=False, ddof=1).reshape(pushed.shape[1], -1)))
    if denom <= 1e-12:
        raise DegenerateDistributionError("l2_uvp: pushforward has (near-)zero variance")
    sq = ((pushed - approx) ** 2).sum(axis=1)
    value = 100.0 * float(sq.mean()) / denom
    se = 100.0 * float(sq.std(ddof=1) / np.sqrt(n_mc)) / denom
    return UVPEstimate(value=value, standard_error=se, n_samples=n_mc)


def fit_gaussian(samples: np.ndarray) -> GaussianDist:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < samples.shape[1] + 1:
        raise DegenerateDistributionError(
            "fit_gaussian: need at least d+1 samples for a covariance fit"
        )
    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False, ddof=1).reshape(samples.shape[1], samples.shape[1])
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def bw2_uvp(target: GaussianDist, samples: np.ndarray) -> float:
    """100 * BW_2^2(target, Gaussian fit of samples) / Var(target)."""
    fitted = fit_gaussian(samples)
    if np.linalg.eigvalsh(fitted.cov).min() <= 0:
        raise DegenerateDistributionError("bw2_uvp: singular covariance fit")
    return 100.0 * bures_w2(target, fitted) / target.total_variance


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    config_hash: str
    task: str
    base: str
    d: int
    n_inputs: int
    seed: int
    iters: int
    batch: int
    l2_uvp: float | None
    l2_uvp_se: float | None
    bw2_uvp: float | None
    w2_hat: float | None
    w2_ref: float | None
    wall_time_s: float
    status: str
    loss_trace_path: str

    def csv_row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [
            fmt(v)
            for v in [
                self.run_id,
                self.task,
                self.base,
                self.d,
                self.n_inputs,
                self.seed,
                self.iters,
                self.batch,
                self.l2_uvp,
                self.l2_uvp_se,
                self.bw2_uvp,
                self.w2_hat,
                self.w2_ref,
                self.wall_time_s,
                self.status,
            ]
        ]


def append_result_row(path, result: RunResult) -> None:
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        if fresh:
            fh.write(f"# flowot {__version__}\n")
            csv.writer(fh).writerow(RESULT_COLUMNS)
        csv.writer(fh).writerow(result.csv_row())


def read_result_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _train_spec_from_config(config) -> TrainSpec:
    return TrainSpec(
        iterations=config.iterations,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        schedule=WeightSchedule(config.schedule_start, config.schedule_end, config.iterations),
        seed=config.seed,
        weights=config.weights if config.task == "barycenter" else None,
        n_levels=config.levels,
        couplings_per_level=config.couplings,
        hidden=config.hidden,
        clamp=config.clamp,
        residual=config.residual,
        latent_batch=config.latent_batch,
    )


def _build_family(config):
    if config.family == "location-scatter":
        return make_location_scatter(
            config.base,
            config.d,
            config.n_inputs,
            config.seed,
            weights=config.weights,
            noise=config.noise,
        )
    return make_rotated_gaussians(config.d, config.n_inputs, config.seed)


def run_experiment(config, append_results: bool = True):
    """Train one configuration and score it against the closed-form oracles.

    Writes <outdir>/<run_id>/{config.echo, trace.csv, checkpoint.bin} plus a
    row appended to <outdir>/results.csv.  Training divergence is recorded as
    a failed row and re-raised with the partial result attached.  Callers
    that fan runs out across workers pass ``append_results=False`` and append
    through a single writer themselves.
    """
    family = _build_family(config)
    spec = _train_spec_from_config(config)
    run_dir = Path(config.outdir) / config.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(config.to_text())

    started = time.perf_counter()
    result = RunResult(
        run_id=config.run_id(),
        config_hash=config.config_hash(),
        task=config.task,
        base=config.base_label(),
        d=config.d,
        n_inputs=config.n_inputs,
        seed=config.seed,
        iters=config.iterations,
        batch=config.batch_size,
        l2_uvp=None,
        l2_uvp_se=None,
        bw2_uvp=None,
        w2_hat=None,
        w2_ref=None,
        wall_time_s=0.0,
        status="ok",
        loss_trace_path=str(run_dir / "trace.csv"),
    )
    try:
        if config.task == "ot":
            trained = _run_ot(config, family, spec, result)
        else:
            trained = _run_barycenter(config, family, spec, result, run_dir)
    except TrainingDiverged as exc:
        result.status = "diverged"
        result.wall_time_s = time.perf_counter() - started
        trace = getattr(exc, "trace", None)
        if trace is not None:
            write_trace_csv(run_dir / "trace.csv", trace, __version__)
        if append_results:
            append_result_row(Path(config.outdir) / "results.csv", result)
        exc.partial_result = result
        raise
    result.wall_time_s = time.perf_counter() - started
    write_trace_csv(run_dir / "trace.csv", trained.trace, __version__)
    save_checkpoint(trained.model, run_dir / "checkpoint.bin")
    if append_results:
        append_result_row(Path(config.outdir) / "results.csv", result)
    return result


def _run_ot(config, family: LocationScatterFamily, spec: TrainSpec, result: RunResult):
    sset = family.sampler_set()
    trained = train_ot(sset.samplers[0], sset.samplers[1], spec)
    model = trained.model
    eval_rng = named_rng(config.seed, EVAL_STREAM)

    covs = family.input_covariances()
    src = GaussianDist(np.zeros(config.d), covs[0])
    dst = GaussianDist(np.zeros(config.d), covs[1])
    true_map, _ = gaussian_ot_map(src, dst)
    # Exact squared transport cost for any centered base with these
    # covariances: E|x - Ax|^2 = tr((I - A) Sigma_1 (I - A)).
    eye = np.eye(config.d)
    result.w2_ref = float(np.trace((eye - true_map.matrix) @ covs[0] @ (eye - true_map.matrix)))

    learned_map = extract_ot_map(model)
    uvp = l2_uvp(true_map, learned_map, sset.samplers[0], config.eval_samples, eval_rng)
    result.l2_uvp = uvp.value
    result.l2_uvp_se = uvp.standard_error
    pushed = learned_map(sset.samplers[0](eval_rng, config.eval_samples))
    result.bw2_uvp = bw2_uvp(dst, pushed)
    result.w2_hat = estimate_w2(model, config.eval_samples, eval_rng).value
    return trained


def _run_barycenter(config, family, spec: TrainSpec, result: RunResult, run_dir: Path):
    sset = family.sampler_set()
    trained = train_barycenter(sset, spec)
    model = trained.model
    eval_rng = named_rng(config.seed, EVAL_STREAM)
    weights = np.asarray(sset.weights)

    bar_samples = sample_barycenter(model, config.eval_samples, eval_rng)
    if family.has_oracle:
        bar = family.oracle_barycenter()
        result.bw2_uvp = bw2_uvp(bar, bar_samples)
        vals, ses = [], []
        for s in range(config.n_inputs):
            true_map = family.oracle_map_to_barycenter(s)
            uvp = l2_uvp(
                true_map,
                lambda x, s=s: barycenter_push(model, x, s, "to"),
                sset.samplers[s],
                config.eval_samples,
                eval_rng,
            )
            vals.append(uvp.value)
            ses.append(uvp.standard_error)
        result.l2_uvp = float(np.dot(weights, vals))
        result.l2_uvp_se = float(np.sqrt(np.dot(weights**2, np.array(ses) ** 2)))
    else:
        # Swiss-roll base: no exact transport oracle; score fitted moments
        # against an empirical reference barycenter and emit the qualitative
        # artifacts instead.
        ref = _empirical_reference_barycenter(family, eval_rng, config.eval_samples)
        result.bw2_uvp = bw2_uvp(fit_gaussian(ref), bar_samples)
        _emit_qualitative(family, model, sset, ref, bar_samples, run_dir, eval_rng)
    return trained


def _empirical_reference_barycenter(
    family: LocationScatterFamily, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Reference barycenter sample for location-scatter families.

    The barycenter of a location-scatter family is again a member: its
    covariance solves the Gaussian fixed point of the member covariances and
    its mean is the weighted mean of the member means.  Base moments are
    estimated empirically, so for non-Gaussian bases this is a reference,
    not an exact oracle.
    """
    base_big = family.base_sample(rng, max(n, 100_000))
    m0 = base_big.mean(axis=0)
    c0 = np.cov(base_big, rowvar=False, ddof=1)
    c0 = 0.5 * (c0 + c0.T)
    member_covs = [m @ c0 @ m for m in family.maps]
    bar_cov, _ = ls_barycenter_fixed_point(member_covs, family.weights)
    # SPD matrix pushing the centered base (cov c0) to covariance bar_cov.
    member_map, _ = gaussian_ot_map(
        GaussianDist(np.zeros(family.d), c0), GaussianDist(np.zeros(family.d), bar_cov)
    )
    mbar = np.sum([w_s * (m @ m0) for w_s, m in zip(family.weights, family.maps)], axis=0)
    base = family.base_sample(rng, n)
    return (base - m0) @ member_map.matrix.T + mbar


def dump_points(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.10g")


def _emit_qualitative(family, model, sset, ref_barycenter, bar_samples, run_dir: Path, rng):
    n_show = 2000
    inputs_true, inputs_model, transported = [], [], []
    for s in range(family.n_inputs):
        true_pts = sset.samplers[s](rng, n_show)
        model_pts = model.sample(n_show, s, rng)
        moved = barycenter_push(model, true_pts, s, "to")
        inputs_true.append(true_pts)
        inputs_model.append(model_pts)
        transported.append(moved)
        dump_points(run_dir / f"input_true_s{s}.txt", true_pts)
        dump_points(run_dir / f"input_model_s{s}.txt", model_pts)
        dump_points(run_dir / f"transported_s{s}.txt", moved)
    dump_points(run_dir / "barycenter_model.txt", bar_samples[:n_show])
    dump_points(run_dir / "barycenter_reference.txt", ref_barycenter[:n_show])
    _scatter_grid_svg(
        run_dir / "inputs_true_vs_model.svg",
        [inputs_true, inputs_model],
        ["true s=%d", "model s=%d"],
    )
    _scatter_grid_svg(
        run_dir / "barycenter_true_vs_model.svg",
        [[ref_barycenter[:n_show]], [bar_samples[:n_show]]],
        ["reference barycenter", "model barycenter"],
    )
    _scatter_grid_svg(
        run_dir / "inputs_transported.svg",
        [inputs_true, transported],
        ["input s=%d", "to barycenter s=%d"],
    )


def _scatter_grid_svg(path, rows, row_titles) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.4 * n_cols, 2.4 * n_rows), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            if j < len(row):
                pts = row[j]
                ax.scatter(pts[:, 0], pts[:, 1], s=1.0, alpha=0.4, linewidths=0)
                title = row_titles[i] % j if "%d" in row_titles[i] else row_titles[i]
                ax.set_title(title, fontsize=7)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def weighted_bures_objective(gaussians, weights, candidate: GaussianDist) -> float:
    """sum_s w_s BW_2^2(candidate, mu_s); the barycenter functional on moments."""
    return float(sum(w * bures_w2(candidate, g) for w, g in zip(weights, gaussians)))
