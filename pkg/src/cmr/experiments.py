"""Experiment harnesses: phase diagrams, dimension sweeps, and moment checks.

Every harness is a pure function of its config. Per-trial seeds are derived
from the master seed and the trial's grid coordinates through a fixed public
integer mixer (splitmix64), so serial and parallel runs agree bit for bit,
and BLAS pools are pinned to one thread inside each trial so the worker
count never changes any recorded number.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import CmrError
from .estimator import (
    RefineConfig,
    estimate_a,
    estimate_gamma,
    fit_local,
    refine_gd,
    spectral_cmr,
)
from .linalg import operator_norm, subspace_distance
from .model import (
    CmrModel,
    TaskCovariances,
    TaskDataset,
    davis_kahan_bound,
    expected_a,
    generate_synthetic,
    random_covariances,
    sample_dataset,
)

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(master_seed: int, *parts: int) -> int:
    """Derive a 64-bit per-trial seed from the master seed and grid indices.

    One splitmix64 round absorbs the master seed, then one round per index;
    the scheme is order-sensitive and collision-resistant in practice, and
    is what makes parallel and serial runs agree exactly.
    """
    state = _splitmix64(master_seed & _MASK64)
    for part in parts:
        state = _splitmix64(state ^ (int(part) & _MASK64))
    return state


def fmt17(x: float) -> str:
    """Float to text with 17 significant digits (exact round-trip)."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class PhaseGridConfig:
    """Grid definition for the recovery phase diagram."""

    b: int = 20
    p: int = 10
    r: int = 1
    i_values: tuple[int, ...] = (10, 50, 100, 500, 2000)
    t_values: tuple[int, ...] = (2, 5, 10, 20, 50)
    trials_per_cell: int = 50
    master_seed: int = 0
    init_mode: str = "spectral"
    success_threshold: float = 0.90
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        if self.init_mode not in ("spectral", "random"):
            raise ValueError(f"init_mode must be spectral or random, got {self.init_mode!r}")
        if not (0 < self.success_threshold < 1):
            raise ValueError("success_threshold must lie in (0, 1)")
        if min(self.i_values) < 1 or min(self.t_values) < 1 or self.trials_per_cell < 1:
            raise ValueError("grid values and trials_per_cell must be >= 1")


@dataclass(frozen=True)
class TrialRecord:
    """One trial of a grid harness; cell_i/cell_t are grid values, not indices."""

    cell_i: int
    cell_t: int
    trial: int
    seed: int
    dist: float
    sq_corr: float
    success: bool
    error_kind: str = ""


@dataclass
class PhaseDiagramResult:
    config: PhaseGridConfig
    success_rate: np.ndarray  # |i_values| x |t_values|
    records: list[TrialRecord]


def _run_fit_trial(
    dataset: TaskDataset,
    model: CmrModel,
    r: int,
    init_mode: str,
    refine: RefineConfig,
    threshold: float,
    rng: np.random.Generator,
) -> tuple[float, float, bool]:
    """Initialize (spectral or random), refine, and score one instance."""
    if init_mode == "spectral":
        w0 = spectral_cmr(dataset, r).w_hat
    else:
        w0 = np.linalg.qr(rng.standard_normal((dataset.b, r)))[0]
    v0 = np.stack(
        [
            fit_local(w0, dataset.x[i], dataset.y[i], refine.ridge)
            for i in range(dataset.i_tasks)
        ]
    )
    fit = refine_gd(w0, v0, dataset, refine)
    dist = subspace_distance(fit.w, model.w)
    sq_corr = 1.0 - dist * dist
    return dist, sq_corr, bool(sq_corr > threshold)


def _phase_trial(cfg: PhaseGridConfig, job: tuple[int, int, int]) -> TrialRecord:
    ii, ti, trial = job
    i_val, t_val = cfg.i_values[ii], cfg.t_values[ti]
    seed = mix_seed(cfg.master_seed, ii, ti, trial)
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        try:
            cov = TaskCovariances.identity(cfg.b, cfg.p, i_val)
            model, dataset = generate_synthetic(
                cfg.b, cfg.p, cfg.r, i_val, t_val, cov, rng
            )
            dist, sq_corr, success = _run_fit_trial(
                dataset, model, cfg.r, cfg.init_mode, cfg.refine,
                cfg.success_threshold, rng,
            )
            return TrialRecord(i_val, t_val, trial, seed, dist, sq_corr, success)
        except (CmrError, np.linalg.LinAlgError) as exc:
            return TrialRecord(
                i_val, t_val, trial, seed, float("nan"), float("nan"),
                False, type(exc).__name__,
            )


def _run_jobs(worker, cfg, jobs, threads):
    if threads is None:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(jobs) <= 1:
        return [worker(cfg, job) for job in jobs]
    from functools import partial

    chunk = max(1, len(jobs) // (threads * 8))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(partial(worker, cfg), jobs, chunksize=chunk))


def run_phase_diagram(cfg: PhaseGridConfig, threads: int | None = None) -> PhaseDiagramResult:
    """Empirical recovery probability over the (tasks x samples-per-task) grid.

    Trials that fail inside the estimator (singular whitening at tiny
    sample counts, rank requests, ...) count as non-successes and carry
    their error kind. The result is independent of thread count and of the
    order cells are evaluated in.
    """
    jobs = [
        (ii, ti, k)
        for ii in range(len(cfg.i_values))
        for ti in range(len(cfg.t_values))
        for k in range(cfg.trials_per_cell)
    ]
    records = _run_jobs(_phase_trial, cfg, jobs, threads)
    records.sort(key=lambda rec: (cfg.i_values.index(rec.cell_i),
                                  cfg.t_values.index(rec.cell_t), rec.trial))
    rate = np.zeros((len(cfg.i_values), len(cfg.t_values)))
    for ii, i_val in enumerate(cfg.i_values):
        for ti, t_val in enumerate(cfg.t_values):
            flags = [r.success for r in records
                     if r.cell_i == i_val and r.cell_t == t_val]
            rate[ii, ti] = float(np.mean(flags))
    return PhaseDiagramResult(config=cfg, success_rate=rate, records=records)


@dataclass(frozen=True)
class BSweepConfig:
    """Band-dimension sweep at a fixed number of tasks and samples."""

    b_values: tuple[int, ...] = (10, 20, 40)
    p: int = 10
    r: int = 1
    i_tasks: int = 100
    t_samples: int = 5
    trials_per_cell: int = 50
    master_seed: int = 0
    init_mode: str = "spectral"
    success_threshold: float = 0.90
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        if self.init_mode not in ("spectral", "random"):
            raise ValueError(f"init_mode must be spectral or random, got {self.init_mode!r}")
        if min(self.b_values) < 1 or self.i_tasks < 1 or self.t_samples < 1:
            raise ValueError("b_values, i_tasks and t_samples must be >= 1")


@dataclass
class BSweepResult:
    config: BSweepConfig
    success_rate: np.ndarray  # |b_values|
    records: list[TrialRecord]


def _b_sweep_trial(cfg: BSweepConfig, job: tuple[int, int]) -> TrialRecord:
    bi, trial = job
    b_val = cfg.b_values[bi]
    seed = mix_seed(cfg.master_seed, bi, trial)
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        try:
            cov = TaskCovariances.identity(b_val, cfg.p, cfg.i_tasks)
            model, dataset = generate_synthetic(
                b_val, cfg.p, cfg.r, cfg.i_tasks, cfg.t_samples, cov, rng
            )
            dist, sq_corr, success = _run_fit_trial(
                dataset, model, cfg.r, cfg.init_mode, cfg.refine,
                cfg.success_threshold, rng,
            )
            return TrialRecord(b_val, cfg.t_samples, trial, seed, dist, sq_corr, success)
        except (CmrError, np.linalg.LinAlgError) as exc:
            return TrialRecord(
                b_val, cfg.t_samples, trial, seed, float("nan"), float("nan"),
                False, type(exc).__name__,
            )


def run_b_sweep(cfg: BSweepConfig, threads: int | None = None) -> BSweepResult:
    """Success rate as the band dimension grows at fixed (I, T)."""
    jobs = [(bi, k) for bi in range(len(cfg.b_values)) for k in range(cfg.trials_per_cell)]
    records = _run_jobs(_b_sweep_trial, cfg, jobs, threads)
    records.sort(key=lambda rec: (cfg.b_values.index(rec.cell_i), rec.trial))
    rate = np.array(
        [
            float(np.mean([r.success for r in records if r.cell_i == b_val]))
            for b_val in cfg.b_values
        ]
    )
    return BSweepResult(config=cfg, success_rate=rate, records=records)


# ---------------------------------------------------------------------------
# Moment-concentration and recovery-bound harnesses
# ---------------------------------------------------------------------------


@dataclass
class ConcentrationReport:
    """Summary of a concentration or bound-check run.

    For rate harnesses: per-size medians and quartiles of the measured
    operator-norm error, plus (for the moment-matrix harness) the relative
    error of the across-repetition mean estimate. For the bound check:
    violation counts among valid trials.
    """

    sample_sizes: list[int] = field(default_factory=list)
    median_errors: list[float] = field(default_factory=list)
    q25_errors: list[float] = field(default_factory=list)
    q75_errors: list[float] = field(default_factory=list)
    mean_rel_errors: list[float] = field(default_factory=list)
    bound_violations: int = 0
    valid_trials: int = 0
    excluded_trials: int = 0
    rows: list[tuple] = field(default_factory=list)

    def median_ratios(self) -> list[float]:
        """Ratio of each size's median error to the previous size's."""
        meds = self.median_errors
        return [meds[k + 1] / meds[k] for k in range(len(meds) - 1)]


@dataclass(frozen=True)
class AConcentrationConfig:
    """Moment-matrix concentration harness settings."""

    b: int = 8
    p: int = 4
    r: int = 1
    t_samples: int = 50
    i_values: tuple[int, ...] = (50, 200, 800)
    repetitions: int = 20
    master_seed: int = 0
    random_cov: bool = True


def run_a_concentration(cfg: AConcentrationConfig) -> ConcentrationReport:
    """Measure ||A_hat - A||_2 against its closed-form expectation.

    One fixed model per run; independent datasets per repetition. The
    i_values sweep scales the pooled sample count, so medians should halve
    (up to noise) each time the task count quadruples.
    """
    report = ConcentrationReport()
    rng_model = np.random.default_rng(mix_seed(cfg.master_seed, 0))
    max_i = max(cfg.i_values)
    if cfg.random_cov:
        cov_all = random_covariances(cfg.b, cfg.p, max_i, rng_model)
    else:
        cov_all = TaskCovariances.identity(cfg.b, cfg.p, max_i)
    w = np.linalg.qr(rng_model.standard_normal((cfg.b, cfg.r)))[0]
    v_all = rng_model.standard_normal((max_i, cfg.p, cfg.r))
    v_all /= np.linalg.svd(v_all, compute_uv=False)[:, 0][:, None, None]

    for si, i_tasks in enumerate(cfg.i_values):
        model = CmrModel(w=w, v=v_all[:i_tasks].copy())
        cov = TaskCovariances(
            gamma=cov_all.gamma,
            deltas=cov_all.deltas[:i_tasks].copy(),
            trace_normalized=False,  # deltas were already normalized above
        )
        cov.trace_normalized = cov_all.trace_normalized
        exp = expected_a(model, cov, cfg.t_samples)
        a_norm = operator_norm(exp.a)
        errors = []
        mean_a = np.zeros((cfg.b, cfg.b))
        for rep in range(cfg.repetitions):
            seed = mix_seed(cfg.master_seed, 1 + si, rep)
            rng = np.random.default_rng(seed)
            with threadpool_limits(limits=1):
                dataset = sample_dataset(model, cov, cfg.t_samples, rng)
                a_hat = estimate_a(dataset)
            err = operator_norm(a_hat - exp.a)
            errors.append(err)
            mean_a += a_hat
            report.rows.append((i_tasks, rep, seed, err))
        mean_a /= cfg.repetitions
        report.sample_sizes.append(i_tasks * cfg.t_samples)
        report.median_errors.append(float(np.median(errors)))
        report.q25_errors.append(float(np.quantile(errors, 0.25)))
        report.q75_errors.append(float(np.quantile(errors, 0.75)))
        report.mean_rel_errors.append(operator_norm(mean_a - exp.a) / a_norm)
    return report


@dataclass(frozen=True)
class GammaConcentrationConfig:
    """Shared-covariance concentration harness settings."""

    b: int = 20
    p: int = 10
    t_samples: int = 10
    i_values: tuple[int, ...] = (40, 160, 640)
    repetitions: int = 20
    master_seed: int = 0
    random_cov: bool = False


def run_gamma_concentration(cfg: GammaConcentrationConfig) -> ConcentrationReport:
    """Measure ||Gamma_hat - Gamma||_2 / lambda_min(Gamma) as samples grow.

    The error is normalized by the smallest eigenvalue of the true shared
    covariance, matching how the covariance deviation enters the recovery
    bound (for identity covariances the normalization is 1).
    """
    report = ConcentrationReport()
    rng_cov = np.random.default_rng(mix_seed(cfg.master_seed, 0))
    max_i = max(cfg.i_values)
    if cfg.random_cov:
        cov_all = random_covariances(cfg.b, cfg.p, max_i, rng_cov)
    else:
        cov_all = TaskCovariances.identity(cfg.b, cfg.p, max_i)
    gamma = cov_all.gamma
    lam_min = float(np.linalg.eigvalsh(gamma)[0])
    # a placeholder rank-1 model: Gamma_hat ignores responses entirely
    w = np.eye(cfg.b, 1)
    v = np.broadcast_to(np.eye(cfg.p, 1), (max_i, cfg.p, 1)).copy()

    for si, i_tasks in enumerate(cfg.i_values):
        model = CmrModel(w=w, v=v[:i_tasks].copy())
        cov = TaskCovariances(
            gamma=gamma, deltas=cov_all.deltas[:i_tasks].copy(), trace_normalized=False
        )
        cov.trace_normalized = cov_all.trace_normalized
        errors = []
        for rep in range(cfg.repetitions):
            seed = mix_seed(cfg.master_seed, 1 + si, rep)
            rng = np.random.default_rng(seed)
            with threadpool_limits(limits=1):
                dataset = sample_dataset(model, cov, cfg.t_samples, rng)
                gamma_hat = estimate_gamma(dataset)
            err = operator_norm(gamma_hat - gamma) / lam_min
            errors.append(err)
            report.rows.append((i_tasks, rep, seed, err))
        report.sample_sizes.append(i_tasks * cfg.t_samples * cfg.p)
        report.median_errors.append(float(np.median(errors)))
        report.q25_errors.append(float(np.quantile(errors, 0.25)))
        report.q75_errors.append(float(np.quantile(errors, 0.75)))
    return report


@dataclass(frozen=True)
class BoundCheckConfig:
    """Recovery-bound check settings."""

    b: int = 10
    p: int = 5
    r: int = 1
    i_tasks: int = 200
    t_samples: int = 20
    trials: int = 100
    master_seed: int = 0
    random_cov: bool = True


def _bound_trial(cfg: BoundCheckConfig, trial: int) -> tuple:
    seed = mix_seed(cfg.master_seed, trial)
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        if cfg.random_cov:
            cov = random_covariances(cfg.b, cfg.p, cfg.i_tasks, rng)
        else:
            cov = TaskCovariances.identity(cfg.b, cfg.p, cfg.i_tasks)
        model, dataset = generate_synthetic(
            cfg.b, cfg.p, cfg.r, cfg.i_tasks, cfg.t_samples, cov, rng
        )
        exp = expected_a(model, cov, cfg.t_samples)
        gamma_hat = estimate_gamma(dataset)
        a_hat = estimate_a(dataset)
        lam_min = float(np.linalg.eigvalsh(cov.gamma)[0])
        eps1 = operator_norm(gamma_hat - cov.gamma) / lam_min
        eps2 = operator_norm(a_hat - exp.a)
        if eps1 >= 1.0:
            return (trial, seed, eps1, eps2, float("nan"), float("nan"), False, True)
        est = spectral_cmr(dataset, cfg.r)
        dist = subspace_distance(est.w_hat, model.w)
        bound = davis_kahan_bound(eps1, eps2, model, cov, exp)
        return (trial, seed, eps1, eps2, dist, bound, bool(dist > bound), False)


def run_bound_check(cfg: BoundCheckConfig, threads: int | None = None) -> ConcentrationReport:
    """Execute the deviation-to-recovery bound as an assertion over trials.

    Among trials whose measured covariance error keeps eps1 below one, the
    subspace distance of the spectral estimate must never exceed the bound;
    trials with eps1 >= 1 are excluded and counted separately.
    """
    rows = _run_jobs(_bound_trial, cfg, list(range(cfg.trials)), threads)
    rows.sort(key=lambda row: row[0])
    report = ConcentrationReport(rows=rows)
    for row in rows:
        _, _, eps1, eps2, dist, bound, violated, excluded = row
        if excluded:
            report.excluded_trials += 1
            continue
        report.valid_trials += 1
        if violated:
            report.bound_violations += 1
    return report


@dataclass(frozen=True)
class GradCheckConfig:
    """Finite-difference gradient check settings."""

    b: int = 6
    p: int = 4
    r: int = 2
    i_tasks: int = 3
    t_samples: int = 5
    instances: int = 20
    master_seed: int = 0
    fd_step: float = 1e-5
    ridge: float = 0.0


def relative_grad_error(analytic: float, numeric: float) -> float:
    """Per-coordinate relative discrepancy with a floor against 0/0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def run_gradient_check(cfg: GradCheckConfig) -> tuple[float, list[tuple]]:
    """Compare analytic refinement gradients with central differences.

    Evaluated at random (not ground-truth) points so the gradients are far
    from zero. Returns the worst per-coordinate relative error over all
    instances plus one row per instance.
    """
    from .estimator import loss_and_grads, _resid_and_loss

    rows = []
    worst = 0.0
    for instance in range(cfg.instances):
        seed = mix_seed(cfg.master_seed, instance)
        rng = np.random.default_rng(seed)
        cov = TaskCovariances.identity(cfg.b, cfg.p, cfg.i_tasks)
        _, dataset = generate_synthetic(
            cfg.b, cfg.p, cfg.r, cfg.i_tasks, cfg.t_samples, cov, rng
        )
        w = rng.standard_normal((cfg.b, cfg.r))
        v = rng.standard_normal((cfg.i_tasks, cfg.p, cfg.r))
        _, grad_w, grad_v = loss_and_grads(w, v, dataset, cfg.ridge)

        def loss_at(w_pt, v_pt):
            return _resid_and_loss(w_pt, v_pt, dataset.x, dataset.y, cfg.ridge)[1]

        max_err = 0.0
        h = cfg.fd_step
        for flat_idx in range(w.size):
            idx = np.unravel_index(flat_idx, w.shape)
            w_hi, w_lo = w.copy(), w.copy()
            w_hi[idx] += h
            w_lo[idx] -= h
            numeric = (loss_at(w_hi, v) - loss_at(w_lo, v)) / (2 * h)
            max_err = max(max_err, relative_grad_error(grad_w[idx], numeric))
        for flat_idx in range(v.size):
            idx = np.unravel_index(flat_idx, v.shape)
            v_hi, v_lo = v.copy(), v.copy()
            v_hi[idx] += h
            v_lo[idx] -= h
            numeric = (loss_at(w, v_hi) - loss_at(w, v_lo)) / (2 * h)
            max_err = max(max_err, relative_grad_error(grad_v[idx], numeric))
        rows.append((instance, seed, max_err))
        worst = max(worst, max_err)
    return worst, rows


# ---------------------------------------------------------------------------
# Result writers (CSV / PGM); floats carry 17 significant digits
# ---------------------------------------------------------------------------


def write_trials_csv(path, records: list[TrialRecord], cell_names=("cell_i", "cell_t")) -> None:
    lines = [f"{cell_names[0]},{cell_names[1]},trial,seed,dist,sq_corr,success,error_kind"]
    for rec in records:
        lines.append(
            f"{rec.cell_i},{rec.cell_t},{rec.trial},{rec.seed},"
            f"{fmt17(rec.dist)},{fmt17(rec.sq_corr)},{int(rec.success)},{rec.error_kind}"
        )
    _write_text(path, lines)


def write_phase_summary_csv(path, result: PhaseDiagramResult) -> None:
    lines = ["i_value,t_value,success_rate"]
    for ii, i_val in enumerate(result.config.i_values):
        for ti, t_val in enumerate(result.config.t_values):
            lines.append(f"{i_val},{t_val},{fmt17(result.success_rate[ii, ti])}")
    _write_text(path, lines)


def write_sweep_summary_csv(path, result: BSweepResult) -> None:
    lines = ["b_value,success_rate"]
    for bi, b_val in enumerate(result.config.b_values):
        lines.append(f"{b_val},{fmt17(result.success_rate[bi])}")
    _write_text(path, lines)


def write_phase_pgm(path, result: PhaseDiagramResult) -> None:
    """8-bit PGM heatmap: rows are task counts descending, columns sample
    counts ascending, pixel value round(255 * success rate)."""
    cfg = result.config
    i_order = np.argsort(cfg.i_values)[::-1]
    t_order = np.argsort(cfg.t_values)
    grid = result.success_rate[np.ix_(i_order, t_order)]
    pixels = np.round(255.0 * grid).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def write_concentration_csv(path, report: ConcentrationReport, kind: str) -> None:
    if kind == "bound":
        lines = ["trial,seed,eps1,eps2,dist,bound,violated,excluded"]
        for trial, seed, eps1, eps2, dist, bound, violated, excluded in report.rows:
            lines.append(
                f"{trial},{seed},{fmt17(eps1)},{fmt17(eps2)},{fmt17(dist)},"
                f"{fmt17(bound)},{int(violated)},{int(excluded)}"
            )
    else:
        lines = ["sample_size,repetition,seed,error"]
        for size, rep, seed, err in report.rows:
            lines.append(f"{size},{rep},{seed},{fmt17(err)}")
    _write_text(path, lines)


def write_concentration_summary_csv(path, report: ConcentrationReport) -> None:
    lines = ["sample_size,median_error,q25_error,q75_error,mean_rel_error"]
    for k, size in enumerate(report.sample_sizes):
        mean_rel = (
            fmt17(report.mean_rel_errors[k]) if k < len(report.mean_rel_errors) else ""
        )
        lines.append(
            f"{size},{fmt17(report.median_errors[k])},{fmt17(report.q25_errors[k])},"
            f"{fmt17(report.q75_errors[k])},{mean_rel}"
        )
    _write_text(path, lines)


def _write_text(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def config_as_dict(cfg) -> dict:
    """Dataclass config to a plain JSON-serializable dict."""
    return asdict(cfg)
