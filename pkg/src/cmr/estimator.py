"""The recovery algorithm: moment estimators, whitened spectral step, refinement.

Pipeline: estimate the shared covariance and the response-weighted second
moment from pooled data, whiten the moment matrix, read the common mechanism
off its top eigenvectors, then (optionally) polish the whole model by joint
gradient descent on the mean squared residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Diverged, EmptyDataset, RankRequest, ShapeMismatch
from .linalg import as_symmetric, eig_sym, inv_sqrt_psd
from .model import TaskDataset, _bilinear_responses

ARMIJO_C = 1e-4
MIN_STEP = 1e-20


@dataclass(frozen=True)
class SpectralEstimate:
    """Everything the spectral step produces.

    w_hat equals the whitened moment matrix's top-R eigenvectors mapped back
    through the inverse covariance root; b_eigenvalues is the full descending
    spectrum of b_hat.
    """

    gamma_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    b_eigenvalues: np.ndarray
    w_hat: np.ndarray

    @property
    def rank(self) -> int:
        return self.w_hat.shape[1]

    @property
    def eigengap(self) -> float:
        """Gap between the R-th and (R+1)-th eigenvalues; diagnostic only."""
        r = self.rank
        if r >= self.b_eigenvalues.size:
            return float("nan")
        return float(self.b_eigenvalues[r - 1] - self.b_eigenvalues[r])


@dataclass(frozen=True)
class RefineConfig:
    """Gradient-descent settings for the refinement stage."""

    max_iters: int = 500
    step_size: float = 1.0
    grad_tol: float = 1e-8
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ShapeMismatch("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ShapeMismatch("step_size must be positive")
        if self.grad_tol < 0 or self.ridge < 0:
            raise ShapeMismatch("grad_tol and ridge must be non-negative")


@dataclass
class FitResult:
    """Outcome of the joint refinement."""

    w: np.ndarray
    v: np.ndarray
    loss_history: np.ndarray
    converged: bool


def estimate_gamma(dataset: TaskDataset) -> np.ndarray:
    """Pooled shared-covariance estimate: mean over (i, t) of X X^T / P."""
    i, t, b, p = dataset.x.shape
    if i == 0 or t == 0:
        raise EmptyDataset("dataset has no samples")
    flat = dataset.x.reshape(i * t, b, p)
    g = np.einsum("nbp,ncp->bc", flat, flat, optimize=True) / (i * t * p)
    return (g + g.T) / 2.0


def estimate_a(dataset: TaskDataset) -> np.ndarray:
    """Response-weighted pooled second moment.

    Evaluated in the factored form mean_i Z_i Z_i^T with
    Z_i = mean_t y_it X_it, which is algebraically identical to the double
    sum over sample pairs but costs O(ITBP) instead of O(I T^2 B P).
    """
    i, t, b, p = dataset.x.shape
    if i == 0 or t == 0:
        raise EmptyDataset("dataset has no samples")
    z = np.matmul(dataset.y[:, None, :], dataset.x.reshape(i, t, b * p))[:, 0, :]
    z = z.reshape(i, b, p) / t
    a = np.einsum("ibp,icp->bc", z, z, optimize=True) / i
    return (a + a.T) / 2.0


def spectral_from_moments(
    gamma_hat, a_hat, r: int, eig_floor: float | None = None
) -> SpectralEstimate:
    """Spectral step from already-computed moment matrices.

    Whitens a_hat by the inverse root of gamma_hat and maps the top-r
    eigenvectors back through the same root.
    """
    gamma_hat = as_symmetric(gamma_hat, "gamma_hat")
    a_hat = as_symmetric(a_hat, "a_hat")
    if gamma_hat.shape != a_hat.shape:
        raise ShapeMismatch("gamma_hat and a_hat must have the same shape")
    if not 1 <= r <= gamma_hat.shape[0]:
        raise RankRequest(f"rank r={r} must satisfy 1 <= r <= B={gamma_hat.shape[0]}")
    inv_root = inv_sqrt_psd(gamma_hat, eig_floor)
    b_hat = as_symmetric(inv_root @ a_hat @ inv_root, "b_hat")
    pair = eig_sym(b_hat)
    w_hat = inv_root @ pair.vectors[:, :r]
    return SpectralEstimate(
        gamma_hat=gamma_hat,
        a_hat=a_hat,
        b_hat=b_hat,
        b_eigenvalues=pair.values,
        w_hat=w_hat,
    )


def _check_rank_request(dataset: TaskDataset, r: int, allow_rank_violation: bool) -> None:
    if not 1 <= r <= dataset.b:
        raise RankRequest(f"rank r={r} must satisfy 1 <= r <= B={dataset.b}")
    if r > dataset.t_samples and not allow_rank_violation:
        raise RankRequest(
            f"rank r={r} exceeds samples per task T={dataset.t_samples}; "
            "pass allow_rank_violation=True to run the ablation anyway"
        )


def spectral_cmr(
    dataset: TaskDataset,
    r: int,
    eig_floor: float | None = None,
    allow_rank_violation: bool = False,
) -> SpectralEstimate:
    """Whitened spectral recovery of the common mechanism from pooled data."""
    _check_rank_request(dataset, r, allow_rank_violation)
    gamma_hat = estimate_gamma(dataset)
    a_hat = estimate_a(dataset)
    return spectral_from_moments(gamma_hat, a_hat, r, eig_floor)


def spectral_cmr_nw(
    dataset: TaskDataset, r: int, allow_rank_violation: bool = False
) -> SpectralEstimate:
    """Spectral recovery without whitening (shared covariance forced to identity)."""
    _check_rank_request(dataset, r, allow_rank_violation)
    a_hat = estimate_a(dataset)
    pair = eig_sym(a_hat)
    return SpectralEstimate(
        gamma_hat=np.eye(dataset.b),
        a_hat=a_hat,
        b_hat=a_hat,
        b_eigenvalues=pair.values,
        w_hat=pair.vectors[:, :r].copy(),
    )


def ridge_solve(features: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """argmin_w sum (y - F w)^2 + ridge ||w||^2.

    Normal equations for ridge > 0, switching to the algebraically identical
    dual form F^T (F F^T + ridge I)^{-1} y when there are more features than
    samples; minimum-norm least squares at ridge = 0 (the same solution
    whenever F has full column rank).
    """
    if ridge < 0:
        raise ShapeMismatch("ridge must be non-negative")
    f = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if f.ndim != 2 or y.shape != (f.shape[0],):
        raise ShapeMismatch(
            f"features {f.shape} and targets {y.shape} are inconsistent"
        )
    if ridge == 0.0:
        return np.linalg.lstsq(f, y, rcond=None)[0]
    n, d = f.shape
    if d > n:
        gram = f @ f.T + ridge * np.eye(n)
        return f.T @ np.linalg.solve(gram, y)
    gram = f.T @ f + ridge * np.eye(d)
    return np.linalg.solve(gram, f.T @ y)


def fit_local(w, x, y, ridge: float = 0.0) -> np.ndarray:
    """Closed-form per-task regressor given a fixed common mechanism.

    Uses the reduction tr(w^T X V) = <vec(V), vec(X^T w)>, turning the task
    into ridge least squares on P*R-dimensional features.
    """
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if w.ndim != 2 or x.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(
            f"w {w.shape} and x {x.shape} are inconsistent (x must be T x B x P)"
        )
    if y.shape != (x.shape[0],):
        raise ShapeMismatch(f"y must have shape ({x.shape[0]},), got {y.shape}")
    t, _, p = x.shape
    r = w.shape[1]
    feats = np.matmul(x.transpose(0, 2, 1), w).reshape(t, p * r)
    return ridge_solve(feats, y, ridge).reshape(p, r)


def frr_baseline(features, labels, ridge: float) -> np.ndarray:
    """Independent per-task ridge regression on flat feature vectors.

    features is I x T x D, labels is I x T; returns the I x D weight matrix.
    """
    f = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if f.ndim != 3 or y.shape != f.shape[:2]:
        raise ShapeMismatch(
            f"features {f.shape} and labels {y.shape} are inconsistent"
        )
    return np.stack([ridge_solve(f[i], y[i], ridge) for i in range(f.shape[0])])


def _penalty(w: np.ndarray, v: np.ndarray, ridge: float) -> float:
    if ridge == 0.0:
        return 0.0
    return ridge * (float(np.sum(w * w)) + float(np.sum(v * v)))


def _resid_and_loss(w, v, x, y, ridge: float):
    resid = y - _bilinear_responses(w, v, x)
    return resid, float(np.mean(resid * resid)) + _penalty(w, v, ridge)


def _grads_from_resid(resid, w, v, x, ridge: float):
    i, t, b, p = x.shape
    n = i * t
    # s_i = sum_t resid_it X_it, shared by both gradients
    s = np.matmul(resid[:, None, :], x.reshape(i, t, b * p))[:, 0, :].reshape(i, b, p)
    grad_w = (-2.0 / n) * np.einsum("ibp,ipr->br", s, v, optimize=True)
    grad_v = (-2.0 / n) * np.matmul(s.transpose(0, 2, 1), w)
    if ridge != 0.0:
        grad_w = grad_w + 2.0 * ridge * w
        grad_v = grad_v + 2.0 * ridge * v
    return grad_w, grad_v


def loss_and_grads(w, v, dataset: TaskDataset, ridge: float = 0.0):
    """Objective value and analytic gradients of the refinement loss.

    Exposed separately so the gradients can be checked against finite
    differences; refine_gd uses the same computations internally.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    resid, loss = _resid_and_loss(w, v, dataset.x, dataset.y, ridge)
    grad_w, grad_v = _grads_from_resid(resid, w, v, dataset.x, ridge)
    return loss, grad_w, grad_v


def refine_gd(init_w, init_v, dataset: TaskDataset, cfg: RefineConfig) -> FitResult:
    """Joint gradient descent on the mean squared residual.

    Minimizes mean_it (y_it - tr(w^T X_it v_i))^2 plus an optional ridge on
    all parameters, using backtracking line search (so accepted steps never
    increase the loss). Stops when the gradient Frobenius norm reaches
    grad_tol or max_iters is hit.
    """
    w = np.array(init_w, dtype=float)
    v = np.array(init_v, dtype=float)
    x, y = dataset.x, dataset.y
    if w.ndim != 2 or w.shape[0] != dataset.b:
        raise ShapeMismatch(f"init_w {w.shape} does not match B={dataset.b}")
    if v.shape != (dataset.i_tasks, dataset.p, w.shape[1]):
        raise ShapeMismatch(
            f"init_v {v.shape} must be (I={dataset.i_tasks}, P={dataset.p}, "
            f"R={w.shape[1]})"
        )
    resid, loss = _resid_and_loss(w, v, x, y, cfg.ridge)
    if not np.isfinite(loss):
        raise Diverged(f"initial loss is not finite ({loss})")
    grad_w, grad_v = _grads_from_resid(resid, w, v, x, cfg.ridge)
    history = [loss]
    step = cfg.step_size
    converged = False
    for _ in range(cfg.max_iters):
        gnorm_sq = float(np.sum(grad_w * grad_w)) + float(np.sum(grad_v * grad_v))
        if not np.isfinite(gnorm_sq):
            raise Diverged("gradient is not finite")
        if np.sqrt(gnorm_sq) <= cfg.grad_tol:
            converged = True
            break
        accepted = False
        while step >= MIN_STEP:
            w_new = w - step * grad_w
            v_new = v - step * grad_v
            resid_new, new_loss = _resid_and_loss(w_new, v_new, x, y, cfg.ridge)
            if np.isfinite(new_loss) and new_loss <= loss - ARMIJO_C * step * gnorm_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # stalled at the numerical step floor
        w, v, loss = w_new, v_new, new_loss
        history.append(loss)
        grad_w, grad_v = _grads_from_resid(resid_new, w, v, x, cfg.ridge)
        step *= 2.0
    else:
        # max_iters exhausted; re-check the gradient one final time
        gnorm_sq = float(np.sum(grad_w * grad_w)) + float(np.sum(grad_v * grad_v))
        converged = np.sqrt(gnorm_sq) <= cfg.grad_tol
    return FitResult(w=w, v=v, loss_history=np.array(history), converged=converged)


def cmr1(
    x,
    y,
    r: int,
    cfg: RefineConfig,
    eig_floor: float | None = None,
    allow_rank_violation: bool = False,
) -> FitResult:
    """Single-task recovery: the full pipeline applied with I = 1.

    x is T x B x P, y is (T,). Spectral step on the one-task dataset, local
    closed-form regressor, then joint refinement.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 3:
        raise ShapeMismatch(f"x must be T x B x P, got {x.shape}")
    dataset = TaskDataset(x=x[None], y=y[None])
    est = spectral_cmr(dataset, r, eig_floor, allow_rank_violation)
    v0 = fit_local(est.w_hat, x, y, cfg.ridge)
    return refine_gd(est.w_hat, v0[None], dataset, cfg)
