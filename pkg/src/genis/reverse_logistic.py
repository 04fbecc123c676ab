"""Stage 1: normalizing-constant ratios by reverse logistic regression.

Given chains X^(l) targeting unnormalized densities nu_l with unknown
constants m_l, the membership probability of pool entry x in component l
under log-offsets zeta is

    p_l(x, zeta) = nu_l(x) e^{zeta_l} / sum_s nu_s(x) e^{zeta_s}.

Maximizing the weighted quasi-log-likelihood

    l_n(zeta) = sum_l w_l sum_i log p_l(X_i^(l), zeta),   w_l = a_l n / n_l,

under sum_l zeta_l = 0 (the objective is invariant to adding a constant
to zeta) yields ratio estimates

    d_j = exp(zeta_1 - zeta_j) a_j / a_1,   j = 2..k,

which estimate m_j / m_1.  The asymptotic covariance of the scaled ratio
errors is the sandwich D^T B^+ Omega B^+ D, where B is minus the scaled
Hessian, Omega the long-run covariance of the score, and D the Jacobian
of the zeta -> d map.  Omega is estimated per chain by batch means or,
as an independent route, from regeneration tours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .batch_means import DEFAULT_BM_SPEC, BatchMeansSpec, bm_cov, block_size
from .densities import UnnormalizedDensity
from .errors import ConvergenceError, UndefinedPointError
from .regen import rs_long_run_cov
from .samplers import SampleSet

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
SE_METHODS = ("bm", "rs", "both")


@dataclass(frozen=True)
class StageWeights:
    """Positive chain weights a, stored normalized to sum to one."""

    a: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if a.ndim != 1 or a.size < 1:
            raise ValueError("a must be a nonempty vector")
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError("chain weights must be positive and finite")
        object.__setattr__(self, "a", a / a.sum())

    @property
    def k(self) -> int:
        return self.a.size

    def w(self, n_per_chain) -> np.ndarray:
        """Per-sample weights w_l = a_l * n / n_l."""
        n_per = np.asarray(n_per_chain, dtype=float)
        if n_per.shape != self.a.shape:
            raise ValueError("n_per_chain must have one entry per chain")
        return self.a * n_per.sum() / n_per


def naive_stage_weights(n_per_chain) -> StageWeights:
    """Weights proportional to chain lengths, so w_l = 1 for every chain."""
    return StageWeights(np.asarray(n_per_chain, dtype=float))


@dataclass(frozen=True)
class RatioEstimate:
    """Stage-1 output: ratio estimates with asymptotic covariance.

    cov_* matrices estimate the covariance of sqrt(n) * (d_hat - d) with
    n the pooled stage-1 sample size, so se = sqrt(diag(cov) / n).
    """

    d_hat: np.ndarray
    zeta_hat: np.ndarray
    a: np.ndarray
    n_per_chain: np.ndarray
    cov_bm: np.ndarray | None
    cov_rs: np.ndarray | None
    iterations: int
    grad_norm: float

    @property
    def k(self) -> int:
        return self.zeta_hat.size

    @property
    def n_total(self) -> int:
        return int(np.sum(self.n_per_chain))

    @property
    def cov(self) -> np.ndarray:
        c = self.cov_bm if self.cov_bm is not None else self.cov_rs
        if c is None:
            raise ValueError("no covariance estimate was computed")
        return c

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None) / self.n_total)

    @property
    def se_rs(self) -> np.ndarray:
        if self.cov_rs is None:
            raise ValueError("no regenerative covariance estimate was computed")
        return np.sqrt(np.clip(np.diag(self.cov_rs), 0.0, None) / self.n_total)


def _check_alignment(samples: SampleSet, references: Sequence[UnnormalizedDensity]):
    if len(samples.chains) != len(references):
        raise ValueError("one chain per reference density required")
    for chain, ref in zip(samples.chains, references):
        if chain.density_id != ref.id:
            raise ValueError(
                f"chain order mismatch: {chain.density_id!r} vs {ref.id!r}"
            )


def log_density_matrices(
    samples: SampleSet, references: Sequence[UnnormalizedDensity]
) -> list[np.ndarray]:
    """Per chain, the (n_l, k) matrix of log nu_s at that chain's states."""
    _check_alignment(samples, references)
    return [
        np.column_stack([ref.log_density(chain.states) for ref in references])
        for chain in samples.chains
    ]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=1)
    if np.any(np.isneginf(m)):
        raise UndefinedPointError("all reference densities vanish at a state")
    p = np.exp(scores - m[:, None])
    p[np.isneginf(scores)] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    return p


def membership_probs(
    x, references: Sequence[UnnormalizedDensity], zeta
) -> np.ndarray:
    """Membership probabilities p_l(x, zeta), one row per state."""
    zeta = np.asarray(zeta, dtype=float)
    scores = np.column_stack([ref.log_density(x) for ref in references])
    return _softmax_rows(scores + zeta)


def _qll_core(mats: list[np.ndarray], zeta: np.ndarray, w: np.ndarray) -> float:
    total = 0.0
    for l, mat in enumerate(mats):
        scores = mat + zeta
        m = np.max(scores, axis=1)
        if np.any(np.isneginf(m)):
            raise UndefinedPointError("all reference densities vanish at a state")
        lse = m + np.log(np.sum(np.exp(scores - m[:, None]), axis=1))
        total += w[l] * float(np.sum(scores[:, l] - lse))
    return total


def _score_core(
    mats: list[np.ndarray], zeta: np.ndarray, w: np.ndarray, n_per: np.ndarray
) -> np.ndarray:
    g = w * n_per
    for l, mat in enumerate(mats):
        p = _softmax_rows(mat + zeta)
        g = g - w[l] * p.sum(axis=0)
    return g


def _info_core(mats: list[np.ndarray], zeta: np.ndarray, a: np.ndarray) -> np.ndarray:
    k = zeta.size
    out = np.zeros((k, k))
    for l, mat in enumerate(mats):
        p = _softmax_rows(mat + zeta)
        gram = p.T @ p
        out += (a[l] / mat.shape[0]) * (np.diag(p.sum(axis=0)) - gram)
    return 0.5 * (out + out.T)


def quasi_log_likelihood(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    zeta,
    weights: StageWeights | None = None,
) -> float:
    """Weighted reverse-logistic objective; invariant to shifting zeta."""
    mats = log_density_matrices(samples, references)
    zeta = np.asarray(zeta, dtype=float)
    n_per = samples.n_per_chain.astype(float)
    weights = naive_stage_weights(n_per) if weights is None else weights
    return _qll_core(mats, zeta, weights.w(n_per))


def quasi_score(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    zeta,
    weights: StageWeights | None = None,
) -> np.ndarray:
    """Gradient of the objective in zeta; components sum to zero."""
    mats = log_density_matrices(samples, references)
    zeta = np.asarray(zeta, dtype=float)
    n_per = samples.n_per_chain.astype(float)
    weights = naive_stage_weights(n_per) if weights is None else weights
    return _score_core(mats, zeta, weights.w(n_per), n_per)


def _fit_core(
    mats: list[np.ndarray],
    a: np.ndarray,
    n_per: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, int, float]:
    k = a.size
    if k == 1:
        return np.zeros(1), 0, 0.0
    n = float(n_per.sum())
    w = a * n / n_per
    zeta = np.zeros(k)
    ll = _qll_core(mats, zeta, w)
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        g = _score_core(mats, zeta, w, n_per)
        g_proj = g - g.mean()
        # per-sample scale: the raw score is O(n), so an absolute cutoff
        # would sit below the float64 rounding floor for large chains
        grad_norm = float(np.max(np.abs(g_proj))) / n
        if grad_norm <= tol:
            return zeta - zeta.mean(), it - 1, grad_norm
        # Newton in the reduced parameterization zeta_k = -sum_{j<k} zeta_j
        hess = -n * _info_core(mats, zeta, a)
        h_red = (
            hess[: k - 1, : k - 1]
            - hess[: k - 1, k - 1][:, None]
            - hess[k - 1, : k - 1][None, :]
            + hess[k - 1, k - 1]
        )
        g_red = g[: k - 1] - g[k - 1]
        neg_h = -h_red
        ridge = 0.0
        for _ in range(12):
            try:
                chol = np.linalg.cholesky(neg_h + ridge * np.eye(k - 1))
                break
            except np.linalg.LinAlgError:
                ridge = max(ridge * 10.0, 1e-10 * max(np.trace(neg_h), 1.0))
        else:
            raise ConvergenceError(
                "reduced Hessian is not positive definite",
                zeta=zeta - zeta.mean(),
                grad_norm=grad_norm,
                iterations=it - 1,
            )
        step_red = np.linalg.solve(chol.T, np.linalg.solve(chol, g_red))
        step = np.concatenate([step_red, [-step_red.sum()]])
        slope = float(g_red @ step_red)
        # once the Newton decrement sinks below the objective's rounding
        # noise the Armijo test carries no signal; the full step is then
        # safely inside the quadratic basin and finishes the solve
        if slope <= 1e4 * np.finfo(float).eps * (1.0 + abs(ll)):
            zeta = zeta + step
            ll = _qll_core(mats, zeta, w)
            continue
        t = 1.0
        for _ in range(60):
            cand = zeta + t * step
            ll_new = _qll_core(mats, cand, w)
            if ll_new >= ll + 1e-4 * t * slope:
                zeta = cand
                ll = ll_new
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                "line search failed to improve the objective",
                zeta=zeta - zeta.mean(),
                grad_norm=grad_norm,
                iterations=it,
            )
    g = _score_core(mats, zeta, w, n_per)
    grad_norm = float(np.max(np.abs(g - g.mean()))) / n
    if grad_norm <= tol:
        return zeta - zeta.mean(), max_iter, grad_norm
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations (grad norm {grad_norm:.3e})",
        zeta=zeta - zeta.mean(),
        grad_norm=grad_norm,
        iterations=max_iter,
    )


def fit_reverse_logistic(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    weights: StageWeights | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Maximize the objective under sum(zeta) = 0 by damped Newton."""
    mats = log_density_matrices(samples, references)
    n_per = samples.n_per_chain.astype(float)
    weights = naive_stage_weights(n_per) if weights is None else weights
    zeta, _, _ = _fit_core(mats, weights.a, n_per, tol, max_iter)
    return zeta


def zeta_to_ratios(zeta, a) -> np.ndarray:
    """Map the fitted offsets to ratio estimates d_j = e^{z_1 - z_j} a_j / a_1."""
    zeta = np.asarray(zeta, dtype=float)
    a = np.asarray(a, dtype=float)
    if zeta.shape != a.shape:
        raise ValueError("zeta and a must have the same length")
    return np.exp(zeta[0] - zeta[1:]) * a[1:] / a[0]


def ratio_jacobian(d_hat) -> np.ndarray:
    """Jacobian D of the zeta -> d map at the fitted point, (k, k-1).

    Row 0 holds (d_2..d_k); row j has -d_{j+1} on its diagonal entry.
    Columns sum to zero.
    """
    d_hat = np.atleast_1d(np.asarray(d_hat, dtype=float))
    km1 = d_hat.size
    out = np.zeros((km1 + 1, km1))
    out[0, :] = d_hat
    out[1:, :][np.diag_indices(km1)] = -d_hat
    return out


def info_matrix(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    zeta,
    a,
) -> np.ndarray:
    """The matrix B: a-weighted average curvature of the membership model.

    B_rr = sum_l a_l mean_i p_r(1-p_r), B_rs = -sum_l a_l mean_i p_r p_s.
    Symmetric PSD with zero row sums; equals -Hessian/n of the objective.
    """
    mats = log_density_matrices(samples, references)
    return _info_core(mats, np.asarray(zeta, dtype=float), np.asarray(a, dtype=float))


def _score_series(mat: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    return _softmax_rows(mat + zeta)


def _omega_core(
    mats: list[np.ndarray],
    chains,
    zeta: np.ndarray,
    a: np.ndarray,
    bm_spec: BatchMeansSpec,
    method: str,
) -> np.ndarray:
    if method not in ("bm", "rs"):
        raise ValueError("method must be 'bm' or 'rs'")
    n_per = np.array([mat.shape[0] for mat in mats], dtype=float)
    n = n_per.sum()
    k = zeta.size
    omega = np.zeros((k, k))
    for l, mat in enumerate(mats):
        series = _score_series(mat, zeta)
        if method == "bm":
            sigma_l = bm_cov(series, block_size(mat.shape[0], bm_spec))
        else:
            chain = chains[l]
            marks = chain.regen_marks
            if chain.kind != "iid" and marks is None:
                raise ValueError(
                    f"chain {chain.density_id!r} has no regeneration marks"
                )
            sigma_l = rs_long_run_cov(series, marks)
        omega += (n / n_per[l]) * a[l] ** 2 * sigma_l
    return omega


def score_long_run_cov(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    zeta,
    a,
    bm_spec: BatchMeansSpec = DEFAULT_BM_SPEC,
    method: str = "bm",
) -> np.ndarray:
    """Long-run covariance Omega of the scaled score.

    Per chain the series is the membership-probability vector evaluated
    along the chain; chain l contributes (n/n_l) a_l^2 times its long-run
    covariance, estimated by batch means or from regeneration tours.
    """
    mats = log_density_matrices(samples, references)
    return _omega_core(
        mats,
        samples.chains,
        np.asarray(zeta, dtype=float),
        np.asarray(a, dtype=float),
        bm_spec,
        method,
    )


def sym_pseudo_inverse(mat, rank_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix via eigendecomposition.

    Eigenvalues with magnitude at most rank_tol times the largest are
    treated as zero; rank_tol defaults to k * machine epsilon.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("matrix must be square")
    k = mat.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    if rank_tol is None:
        rank_tol = k * np.finfo(float).eps
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    cutoff = rank_tol * np.max(np.abs(vals), initial=0.0)
    inv_vals = np.where(np.abs(vals) > cutoff, 1.0 / np.where(vals == 0, 1.0, vals), 0.0)
    out = (vecs * inv_vals) @ vecs.T
    return 0.5 * (out + out.T)


def _deflated_info_pinv(info: np.ndarray) -> np.ndarray:
    """Pseudo-inverse of the curvature matrix with its null space removed.

    The membership probabilities sum to one, so the curvature matrix
    always annihilates the all-ones vector.  Assembly rounding can leave
    that eigenvalue slightly positive, and a generic rank cutoff then
    inverts noise into enormous entries.  Shifting along the known null
    direction before inverting and subtracting the shift afterwards is
    exact when the row sums vanish and stays bounded when they almost do.
    """
    info = 0.5 * (info + info.T)
    k = info.shape[0]
    lam = float(np.trace(info))
    if lam <= 0.0:
        return np.zeros_like(info)
    j = np.full((k, k), 1.0 / k)
    out = sym_pseudo_inverse(info + lam * j) - j / lam
    return 0.5 * (out + out.T)


def ratio_covariance(d_jacobian, info_pinv, omega) -> np.ndarray:
    """Sandwich covariance D^T B^+ Omega B^+ D of the scaled ratio errors."""
    d_jacobian = np.asarray(d_jacobian, dtype=float)
    info_pinv = np.asarray(info_pinv, dtype=float)
    omega = np.asarray(omega, dtype=float)
    inner = info_pinv @ omega @ info_pinv
    out = d_jacobian.T @ inner @ d_jacobian
    return 0.5 * (out + out.T)


def estimate_ratios(
    samples: SampleSet,
    references: Sequence[UnnormalizedDensity],
    weights: StageWeights | None = None,
    bm_spec: BatchMeansSpec = DEFAULT_BM_SPEC,
    se_method: str = "bm",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RatioEstimate:
    """Full stage 1: fit, map to ratios, and attach asymptotic covariance."""
    if se_method not in SE_METHODS:
        raise ValueError(f"se_method must be one of {SE_METHODS}")
    mats = log_density_matrices(samples, references)
    n_per = samples.n_per_chain.astype(float)
    weights = naive_stage_weights(n_per) if weights is None else weights
    if weights.k != len(references):
        raise ValueError("weights must have one entry per chain")
    zeta, iterations, grad_norm = _fit_core(mats, weights.a, n_per, tol, max_iter)
    d_hat = zeta_to_ratios(zeta, weights.a)

    cov_bm = None
    cov_rs = None
    if len(references) > 1:
        jac = ratio_jacobian(d_hat)
        info_pinv = _deflated_info_pinv(_info_core(mats, zeta, weights.a))
        for method in ("bm", "rs"):
            if se_method not in (method, "both"):
                continue
            omega = _omega_core(
                mats, samples.chains, zeta, weights.a, bm_spec, method
            )
            cov = ratio_covariance(jac, info_pinv, omega)
            if method == "bm":
                cov_bm = cov
            else:
                cov_rs = cov
    else:
        empty = np.zeros((0, 0))
        cov_bm = empty if se_method in ("bm", "both") else None
        cov_rs = empty if se_method in ("rs", "both") else None

    return RatioEstimate(
        d_hat=d_hat,
        zeta_hat=zeta,
        a=weights.a,
        n_per_chain=samples.n_per_chain,
        cov_bm=cov_bm,
        cov_rs=cov_rs,
        iterations=iterations,
        grad_norm=grad_norm,
    )
