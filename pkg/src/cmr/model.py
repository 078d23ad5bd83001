"""Ground-truth model, Kronecker matrix-variate sampling, and closed-form oracles.

The generative model: a shared B x R mechanism W, per-task P x R regressors
V_i, design matrices X_it with cov(vec(X_it)) = Gamma (x) Delta_i (row-major
vec), and noiseless responses y_it = tr(W^T X_it V_i).

Besides sampling, this module evaluates the closed-form expectation of the
pooled second-moment estimator, the deviation-to-recovery bound used to
certify the spectral step, and the task-divergence diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import Degenerate, NotPsd, OutOfDomain, ShapeMismatch
from .linalg import as_symmetric, eig_sym, sqrt_psd

PSD_TOL = 1e-9  # relative tolerance on the smallest eigenvalue


@dataclass
class CmrModel:
    """Ground truth: common mechanism w (B x R) and per-task v (I x P x R)."""

    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.w.ndim != 2:
            raise ShapeMismatch(f"w must be 2-d (B x R), got shape {self.w.shape}")
        if self.v.ndim != 3 or self.v.shape[2] != self.w.shape[1]:
            raise ShapeMismatch(
                f"v must be I x P x R with R={self.w.shape[1]}, got {self.v.shape}"
            )
        # full column rank of w is assumed by the recovery guarantees but not
        # enforced here: degenerate models (e.g. w = 0) are legal inputs to
        # the expectation oracle and fail later only where rank matters

    @property
    def b(self) -> int:
        return self.w.shape[0]

    @property
    def r(self) -> int:
        return self.w.shape[1]

    @property
    def i_tasks(self) -> int:
        return self.v.shape[0]

    @property
    def p(self) -> int:
        return self.v.shape[1]


@dataclass
class TaskCovariances:
    """Shared B-covariance gamma and per-task P-covariances deltas (I x P x P).

    With trace_normalized=True (the default) every delta is rescaled at
    construction to tr(delta) = P. Under that normalization
    E[X X^T] = Gamma, which is what the moment estimator of the shared
    covariance averages to; pass trace_normalized=False to keep raw deltas.
    """

    gamma: np.ndarray
    deltas: np.ndarray
    trace_normalized: bool = True

    def __post_init__(self):
        self.gamma = as_symmetric(self.gamma, "gamma")
        deltas = np.asarray(self.deltas, dtype=float)
        if deltas.ndim != 3 or deltas.shape[1] != deltas.shape[2]:
            raise ShapeMismatch(
                f"deltas must be I x P x P, got shape {deltas.shape}"
            )
        deltas = (deltas + deltas.transpose(0, 2, 1)) / 2.0
        _require_psd(self.gamma, "gamma")
        for i in range(deltas.shape[0]):
            _require_psd(deltas[i], f"delta[{i}]")
        if self.trace_normalized:
            p = deltas.shape[1]
            traces = np.trace(deltas, axis1=1, axis2=2)
            if np.any(traces <= 0):
                raise Degenerate("cannot trace-normalize a delta with tr <= 0")
            deltas = deltas * (p / traces)[:, None, None]
        self.deltas = deltas

    @property
    def b(self) -> int:
        return self.gamma.shape[0]

    @property
    def p(self) -> int:
        return self.deltas.shape[1]

    @property
    def i_tasks(self) -> int:
        return self.deltas.shape[0]

    @classmethod
    def identity(cls, b: int, p: int, i_tasks: int) -> "TaskCovariances":
        return cls(np.eye(b), np.broadcast_to(np.eye(p), (i_tasks, p, p)).copy())


@dataclass
class TaskDataset:
    """Observed data: x is I x T x B x P design matrices, y is I x T responses."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 4:
            raise ShapeMismatch(f"x must be I x T x B x P, got shape {self.x.shape}")
        if self.y.shape != self.x.shape[:2]:
            raise ShapeMismatch(
                f"y shape {self.y.shape} does not match x tasks/samples {self.x.shape[:2]}"
            )
        if not np.all(np.isfinite(self.y)):
            raise ShapeMismatch("y contains non-finite entries")

    @property
    def i_tasks(self) -> int:
        return self.x.shape[0]

    @property
    def t_samples(self) -> int:
        return self.x.shape[1]

    @property
    def b(self) -> int:
        return self.x.shape[2]

    @property
    def p(self) -> int:
        return self.x.shape[3]


@dataclass(frozen=True)
class ExpectedA:
    """Closed-form expectation of the pooled second-moment estimator.

    a = (1 + 1/T) Gamma W Q W^T Gamma + beta Gamma, with q the task-average
    R x R second-moment matrix and beta the scalar identity offset.
    """

    a: np.ndarray
    q: np.ndarray
    beta: float


@dataclass(frozen=True)
class DivergenceCoefficients:
    """Dimensionless ratios measuring heterogeneity across tasks.

    l_per_task holds the per-task scale products; d, m, l are its mean
    square, root-mean fourth power, and max. The remaining ratios are all
    normalized by the smallest nonzero eigenvalue of Gamma W Q W^T Gamma
    (eta, nu linearly; alpha, mu quadratically) or by trace-normalized
    delta scale (psi, chi), plus the condition number kappa_gamma.
    """

    eta: float
    alpha: float
    mu: float
    nu: float
    psi: float
    chi: float
    kappa_gamma: float
    l_per_task: np.ndarray
    d: float
    m: float
    l: float


def _require_psd(m: np.ndarray, name: str) -> None:
    vals = np.linalg.eigvalsh(m)
    lam_max = float(vals[-1]) if vals.size else 0.0
    if float(vals[0]) < -PSD_TOL * max(abs(lam_max), 1e-300):
        raise NotPsd(f"{name} has eigenvalue {vals[0]:.3e} below the PSD tolerance")


def _is_identity(m: np.ndarray) -> bool:
    return m.shape[0] == m.shape[1] and np.array_equal(m, np.eye(m.shape[0]))


def sample_matrix_normal(gamma, delta, rng: np.random.Generator, size: int | None = None):
    """Draw from the zero-mean matrix-variate normal with covariance Gamma (x) Delta.

    Returns Gamma^{1/2} K Delta^{1/2} for K a B x P matrix of independent
    standard normals, so cov of the row-major vec is kron(Gamma, Delta).
    With size=n, returns n independent draws stacked as (n, B, P) while
    computing the matrix roots only once.
    """
    g = as_symmetric(gamma, "gamma")
    d = as_symmetric(delta, "delta")
    _require_psd(g, "gamma")
    _require_psd(d, "delta")
    n = 1 if size is None else int(size)
    k = rng.standard_normal((n, g.shape[0], d.shape[0]))
    if not _is_identity(g):
        k = np.matmul(sqrt_psd(g), k)
    if not _is_identity(d):
        k = np.matmul(k, sqrt_psd(d))
    return k[0] if size is None else k


def responses(model: CmrModel, x) -> np.ndarray:
    """Noiseless responses y_it = tr(w^T x_it v_i) for every task and sample."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 4:
        raise ShapeMismatch(f"x must be I x T x B x P, got shape {x.shape}")
    i, t, b, p = x.shape
    if i != model.i_tasks or b != model.b or p != model.p:
        raise ShapeMismatch(
            f"x shape {x.shape} does not match model (I={model.i_tasks}, "
            f"B={model.b}, P={model.p})"
        )
    return _bilinear_responses(model.w, model.v, x)


def _bilinear_responses(w: np.ndarray, v: np.ndarray, x: np.ndarray) -> np.ndarray:
    # tr(w^T X v_i) = <X, w v_i^T>_F; one batched matvec pass over x
    i, t, b, p = x.shape
    g = np.einsum("br,ipr->ibp", w, v).reshape(i, b * p, 1)
    return np.matmul(x.reshape(i, t, b * p), g)[:, :, 0]


def generate_synthetic(
    b: int,
    p: int,
    r: int,
    i_tasks: int,
    t_samples: int,
    cov: TaskCovariances,
    rng: np.random.Generator,
) -> tuple[CmrModel, TaskDataset]:
    """Random ground truth plus a sampled noiseless dataset.

    w gets i.i.d. standard normal entries with columns orthonormalized; each
    v_i gets i.i.d. standard normal entries scaled to unit spectral norm, so
    recovery metrics are scale-free across trials. Draw order (w, all v,
    all x) is fixed, making the output a pure function of the seed.
    """
    if r < 1 or r > min(b, p):
        raise ShapeMismatch(f"rank r={r} must satisfy 1 <= r <= min(B={b}, P={p})")
    if i_tasks < 1 or t_samples < 1:
        raise ShapeMismatch("i_tasks and t_samples must be positive")
    if cov.b != b or cov.p != p or cov.i_tasks != i_tasks:
        raise ShapeMismatch(
            f"covariances are (B={cov.b}, P={cov.p}, I={cov.i_tasks}), "
            f"expected ({b}, {p}, {i_tasks})"
        )
    w_raw = rng.standard_normal((b, r))
    w = np.linalg.qr(w_raw)[0]
    v = rng.standard_normal((i_tasks, p, r))
    v /= np.linalg.svd(v, compute_uv=False)[:, 0][:, None, None]
    model = CmrModel(w=w, v=v)
    return model, sample_dataset(model, cov, t_samples, rng)


def sample_dataset(
    model: CmrModel, cov: TaskCovariances, t_samples: int, rng: np.random.Generator
) -> TaskDataset:
    """Fresh design matrices and noiseless responses for an existing model."""
    if cov.b != model.b or cov.p != model.p or cov.i_tasks != model.i_tasks:
        raise ShapeMismatch("covariance shapes do not match the model")
    if t_samples < 1:
        raise ShapeMismatch("t_samples must be >= 1")
    i_tasks = model.i_tasks
    k = rng.standard_normal((i_tasks, t_samples, model.b, model.p))
    if not _is_identity(cov.gamma):
        k = np.matmul(sqrt_psd(cov.gamma), k)
    if not all(_is_identity(cov.deltas[i]) for i in range(i_tasks)):
        roots = np.stack([sqrt_psd(cov.deltas[i]) for i in range(i_tasks)])
        k = np.matmul(k, roots[:, None, :, :])
    y = _bilinear_responses(model.w, model.v, k)
    return TaskDataset(x=k, y=y)


def expected_a(model: CmrModel, cov: TaskCovariances, t_samples: int) -> ExpectedA:
    """Exact expectation of the pooled moment matrix for this model.

    a = (1 + 1/T) Gamma W Q W^T Gamma + beta Gamma with
    q = mean_i V_i^T Delta_i^2 V_i and
    beta = (1/T) tr(W^T Gamma W * mean_i[V_i^T Delta_i V_i tr(Delta_i)]).
    """
    if t_samples < 1:
        raise ShapeMismatch("t_samples must be >= 1")
    if cov.b != model.b or cov.p != model.p or cov.i_tasks != model.i_tasks:
        raise ShapeMismatch("covariance shapes do not match the model")
    w, v, deltas = model.w, model.v, cov.deltas
    t = float(t_samples)
    dv = np.matmul(deltas, v)  # (I, P, R)
    q = np.einsum("ipr,ips->rs", dv, dv) / model.i_tasks
    q = (q + q.T) / 2.0
    m_i = np.einsum("ipr,ips->irs", v, dv)  # V_i^T Delta_i V_i
    traces = np.trace(deltas, axis1=1, axis2=2)
    wgw = w.T @ cov.gamma @ w
    beta = float(
        np.einsum("rs,isr->i", wgw, m_i) @ traces / (t * model.i_tasks)
    )
    gw = cov.gamma @ w
    a = (1.0 + 1.0 / t) * gw @ q @ gw.T + beta * cov.gamma
    return ExpectedA(a=(a + a.T) / 2.0, q=q, beta=beta)


def _smallest_nonzero_signal_eig(model: CmrModel, cov: TaskCovariances, q: np.ndarray) -> float:
    """R-th largest eigenvalue of Gamma W Q W^T Gamma.

    The matrix has rank <= R, so its full-spectrum minimum is zero whenever
    R < B; the meaningful floor is the smallest eigenvalue over the signal
    span, i.e. the R-th largest.
    """
    gw = cov.gamma @ model.w
    core = gw @ q @ gw.T
    vals = eig_sym(core).values
    lam = float(vals[model.r - 1])
    if lam <= 0.0:
        raise Degenerate(
            "the signal part of the expected moment matrix has a non-positive "
            f"R-th eigenvalue ({lam:.3e})"
        )
    return lam


def davis_kahan_bound(
    eps1: float,
    eps2: float,
    model: CmrModel,
    cov: TaskCovariances,
    expected: ExpectedA,
) -> float:
    """Recovery bound f(eps1, eps2) on the subspace distance of the spectral step.

    eps1 is the shared-covariance error relative to lambda_min(Gamma); eps2
    is the absolute moment-matrix error. Monotone non-decreasing in both.
    """
    if eps1 < 0 or eps2 < 0:
        raise OutOfDomain("eps1 and eps2 must be non-negative")
    if eps1 >= 1.0:
        raise OutOfDomain(f"eps1={eps1} must be < 1")
    gvals = eig_sym(cov.gamma).values
    lam_min_gamma = float(gvals[-1])
    if lam_min_gamma <= 0.0:
        raise Degenerate("gamma must be strictly positive definite for the bound")
    kappa = float(gvals[0]) / lam_min_gamma
    lam_signal = _smallest_nonzero_signal_eig(model, cov, expected.q)
    lead = eps1 / (1.0 - eps1)
    amp = ((kappa + eps1) / (1.0 - eps1)) ** 1.5
    return lead + 2.0 * np.sqrt(model.r) * amp * (
        eps2 + expected.beta * lam_min_gamma * eps1
    ) / lam_signal


def divergence_coefficients(model: CmrModel, cov: TaskCovariances) -> DivergenceCoefficients:
    """Task-divergence diagnostics for a model/covariance pair."""
    if cov.b != model.b or cov.p != model.p or cov.i_tasks != model.i_tasks:
        raise ShapeMismatch("covariance shapes do not match the model")
    gvals = eig_sym(cov.gamma).values
    gamma_norm = float(gvals[0])
    lam_min_gamma = float(gvals[-1])
    if lam_min_gamma <= 0.0:
        raise Degenerate("gamma must be strictly positive definite")
    delta_norms = np.array(
        [float(np.linalg.eigvalsh(cov.deltas[i])[-1]) for i in range(cov.i_tasks)]
    )
    w_norm = float(np.linalg.svd(model.w, compute_uv=False)[0])
    v_norms = np.linalg.svd(model.v, compute_uv=False)[:, 0]
    l_per_task = (gamma_norm**2) * (w_norm**2) * (delta_norms**2) * (v_norms**2)
    d = float(np.mean(l_per_task**2))
    m = float(np.sqrt(np.mean(l_per_task**4)))
    l = float(np.max(l_per_task))
    q = expected_a(model, cov, t_samples=1).q
    lam_signal = _smallest_nonzero_signal_eig(model, cov, q)
    mean_trace_rate = float(np.mean(np.trace(cov.deltas, axis1=1, axis2=2))) / cov.p
    return DivergenceCoefficients(
        eta=float(np.mean(l_per_task)) / lam_signal,
        alpha=d / lam_signal**2,
        mu=m / lam_signal**2,
        nu=l / lam_signal,
        psi=float(np.mean(delta_norms**2)) / mean_trace_rate**2,
        chi=float(np.max(delta_norms)) / mean_trace_rate,
        kappa_gamma=gamma_norm / lam_min_gamma,
        l_per_task=l_per_task,
        d=d,
        m=m,
        l=l,
    )


def random_psd(dim: int, rng: np.random.Generator, eig_range=(0.5, 2.0)) -> np.ndarray:
    """Random PSD matrix with eigenvalues log-uniform in eig_range."""
    lo, hi = eig_range
    if not (0 < lo <= hi):
        raise OutOfDomain(f"eig_range must satisfy 0 < lo <= hi, got {eig_range}")
    q = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    vals = np.exp(rng.uniform(np.log(lo), np.log(hi), size=dim))
    m = (q * vals) @ q.T
    return (m + m.T) / 2.0


def random_covariances(
    b: int,
    p: int,
    i_tasks: int,
    rng: np.random.Generator,
    gamma_range=(0.5, 2.0),
    delta_range=(0.5, 2.0),
    trace_normalized: bool = True,
) -> TaskCovariances:
    """Random PSD shared/per-task covariances with bounded condition numbers."""
    gamma = random_psd(b, rng, gamma_range)
    deltas = np.stack([random_psd(p, rng, delta_range) for _ in range(i_tasks)])
    return TaskCovariances(gamma=gamma, deltas=deltas, trace_normalized=trace_normalized)


def save_model(path, model: CmrModel, cov: TaskCovariances, seed: int | None = None) -> None:
    """Serialize a model/covariance pair (plus optional seed) to a JSON document.

    Matrices are stored as row-major nested lists; see README for the schema.
    """
    doc = {
        "format": "cmr-model",
        "version": 1,
        "b": model.b,
        "p": model.p,
        "r": model.r,
        "i_tasks": model.i_tasks,
        "seed": seed,
        "w": model.w.tolist(),
        "v": model.v.tolist(),
        "gamma": cov.gamma.tolist(),
        "deltas": cov.deltas.tolist(),
        "trace_normalized": cov.trace_normalized,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> tuple[CmrModel, TaskCovariances, int | None]:
    """Load a model/covariance JSON document written by save_model."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "cmr-model":
        raise ShapeMismatch(f"{path} is not a cmr model document")
    model = CmrModel(w=np.array(doc["w"], dtype=float), v=np.array(doc["v"], dtype=float))
    # deltas were already normalized (or not) when saved; do not re-normalize
    cov = TaskCovariances(
        gamma=np.array(doc["gamma"], dtype=float),
        deltas=np.array(doc["deltas"], dtype=float),
        trace_normalized=False,
    )
    cov.trace_normalized = bool(doc["trace_normalized"])
    return model, cov, doc.get("seed")
