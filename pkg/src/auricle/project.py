"""Exact (quadratic) t-SNE for joint projection before distance matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .validation import check_matrix

P_FLOOR = 1e-12
EXAGGERATION_ITERS = 250
ENTROPY_TOL_BITS = 1e-5
MAX_BISECTIONS = 50


@dataclass(frozen=True)
class TsneParams:
    n_components: int = 2
    perplexity: float = 30.0
    learning_rate: float = 200.0
    n_iter: int = 1000
    early_exaggeration: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.perplexity <= 0.0:
            raise ValueError("perplexity must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.n_iter < EXAGGERATION_ITERS:
            raise ValueError(f"n_iter must be >= {EXAGGERATION_ITERS}")
        if self.early_exaggeration < 1.0:
            raise ValueError("early_exaggeration must be >= 1")

    def effective_perplexity(self, n: int) -> float:
        """Perplexity auto-clamped to (N - 1) / 3; errors when unusable."""
        eff = min(self.perplexity, (n - 1) / 3.0)
        if eff < 1.0:
            raise ValueError(
                f"N = {n} is too small for t-SNE (clamped perplexity {eff:.3g} < 1); "
                "use the projection bypass"
            )
        if self.perplexity >= n:
            raise ValueError(f"perplexity {self.perplexity} must be < N = {n}")
        return eff


@dataclass
class ProjectionResult:
    coordinates: np.ndarray  # N x n_components
    kl_trace: list  # KL divergence every 50 iterations
    params: TsneParams
    unconverged_rows: list = field(default_factory=list)


@dataclass(frozen=True)
class CalibrationResult:
    sigma: float
    probs: np.ndarray
    converged: bool
    entropy_bits: float


def squared_distances(X: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Pairwise squared Euclidean distances via explicit differences.

    The difference form keeps the matrix exactly invariant under exactly
    representable global translations of the inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = X[start:stop, None, :] - X[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(out, 0.0)
    return out


def perplexity_calibration(sq_distances_row: np.ndarray, perplexity: float) -> CalibrationResult:
    """Bisect the Gaussian precision so the row entropy hits log2(perplexity).

    Runs at most 50 bisection steps and keeps the best precision found;
    all-zero rows fall back to the uniform distribution.
    """
    d = np.asarray(sq_distances_row, dtype=np.float64)
    if d.ndim != 1 or d.shape[0] < 1:
        raise ValueError("expected a nonempty 1-D row of squared distances")
    if np.any(d < 0):
        raise ValueError("squared distances must be nonnegative")
    m = d.shape[0]
    if np.all(d == 0.0):
        probs = np.full(m, 1.0 / m)
        return CalibrationResult(np.inf, probs, True, float(np.log2(m)))

    target = float(np.log2(perplexity))
    dmin = d.min()
    shifted = d - dmin

    def entropy_and_probs(beta: float):
        q = np.exp(-beta * shifted)
        s = q.sum()
        probs = q / s
        h_nats = beta * float(shifted @ probs) + np.log(s)
        return h_nats / np.log(2.0), probs

    beta = 1.0
    beta_min, beta_max = -np.inf, np.inf
    best = None
    converged = False
    for _ in range(MAX_BISECTIONS):
        h_bits, probs = entropy_and_probs(beta)
        diff = h_bits - target
        if best is None or abs(diff) < best[0]:
            best = (abs(diff), beta, probs, h_bits)
        if abs(diff) <= ENTROPY_TOL_BITS:
            converged = True
            break
        if diff > 0:
            beta_min = beta
            beta = beta * 2.0 if np.isinf(beta_max) else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = beta / 2.0 if np.isinf(beta_min) else (beta + beta_min) / 2.0
    _, beta, probs, h_bits = best
    sigma = float(np.sqrt(1.0 / (2.0 * beta)))
    return CalibrationResult(sigma, probs, converged, float(h_bits))


def joint_probabilities(X: np.ndarray, perplexity: float):
    """Symmetrized, floored t-SNE joint probability matrix P."""
    n = X.shape[0]
    sq = squared_distances(X)
    P_cond = np.zeros((n, n), dtype=np.float64)
    unconverged = []
    off = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = sq[i][off[i]]
        cal = perplexity_calibration(row, perplexity)
        P_cond[i][off[i]] = cal.probs
        if not cal.converged:
            unconverged.append(i)
    P = (P_cond + P_cond.T) / (2.0 * n)
    P = np.where(off, np.maximum(P, P_FLOOR), 0.0)
    return P, unconverged


def _q_matrix(Y: np.ndarray):
    sq = squared_distances(Y)
    W = 1.0 / (1.0 + sq)
    np.fill_diagonal(W, 0.0)
    Q = W / W.sum()
    return np.maximum(Q, P_FLOOR), W


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q) of the current layout; nonnegative by definition."""
    Q, _ = _q_matrix(Y)
    off = ~np.eye(P.shape[0], dtype=bool)
    kl = float(np.sum(P[off] * (np.log(P[off]) - np.log(Q[off]))))
    # the 1e-12 floors can push the float sum a hair below zero
    return max(kl, 0.0)


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Analytic t-SNE gradient: 4 sum_j (p_ij - q_ij)(y_i - y_j)(1+|y_i-y_j|^2)^-1."""
    Q, W = _q_matrix(Y)
    M = (P - Q) * W
    np.fill_diagonal(M, 0.0)
    return 4.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)


def tsne_embed(X: np.ndarray, params: TsneParams) -> ProjectionResult:
    """Gradient-descent t-SNE with early exaggeration and momentum schedule.

    Deterministic for a fixed seed: seeded Gaussian init (stddev 1e-4),
    exaggeration for the first 250 iterations, momentum 0.5 then 0.8, and the
    layout recentered to zero mean every iteration. KL against the true P is
    recorded every 50 iterations.
    """
    X = check_matrix(X, "X", min_rows=2)
    n = X.shape[0]
    perp = params.effective_perplexity(n)  # advises bypass for n < 4
    P, unconverged = joint_probabilities(X, perp)

    rng = np.random.default_rng(params.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, params.n_components))
    update = np.zeros_like(Y)
    kl_trace = []
    for it in range(1, params.n_iter + 1):
        exaggerating = it <= EXAGGERATION_ITERS
        P_eff = P * params.early_exaggeration if exaggerating else P
        grad = kl_gradient(P_eff, Y)
        momentum = 0.5 if exaggerating else 0.8
        update = momentum * update - params.learning_rate * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError(
                f"t-SNE diverged at iteration {it}: non-finite coordinates "
                f"(learning_rate={params.learning_rate})"
            )
        if it % 50 == 0:
            kl_trace.append(kl_divergence(P, Y))
    return ProjectionResult(Y, kl_trace, params, unconverged)


def project_or_bypass(X: np.ndarray, params: TsneParams, enabled: bool) -> np.ndarray:
    """Project with t-SNE when enabled; otherwise pass vectors through."""
    if not enabled:
        return np.asarray(X, dtype=np.float64)
    return tsne_embed(X, params).coordinates


class TsneEmbedding(BaseEstimator):
    """sklearn-style wrapper; t-SNE is joint, so only fit_transform exists."""

    def __init__(self, n_components=2, perplexity=30.0, learning_rate=200.0,
                 n_iter=1000, early_exaggeration=12.0, seed=0):
        self.n_components = n_components
        self.perplexity = perplexity
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.early_exaggeration = early_exaggeration
        self.seed = seed

    def _params(self) -> TsneParams:
        return TsneParams(self.n_components, self.perplexity, self.learning_rate,
                          self.n_iter, self.early_exaggeration, self.seed)

    def fit_transform(self, X, y=None):
        result = tsne_embed(X, self._params())
        self.embedding_ = result.coordinates
        self.kl_trace_ = result.kl_trace
        self.unconverged_rows_ = result.unconverged_rows
        return self.embedding_
