"""Two-covariance PLDA backend with log-likelihood-ratio scoring.

The generative model is ``y_s ~ N(mu, B)`` per speaker and ``x ~ N(y_s, W)``
per observation.  Parameters are fitted by expectation-maximization from a
centered training set; scoring compares the same-speaker and
different-speaker joint Gaussians of an (enroll, test) pair in closed form.
Plain cosine similarity is provided for comparison.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

__all__ = [
    "LabeledEmbeddingSet",
    "PldaModel",
    "center_normalize",
    "length_normalize",
    "plda_train",
    "plda_score",
    "plda_score_matrix",
    "cosine_score",
]

log = logging.getLogger("xvkd.plda")

EIGEN_FLOOR = 1e-8


@dataclass
class LabeledEmbeddingSet:
    """n embeddings with integer speaker labels and utterance ids."""

    vectors: np.ndarray
    speaker_labels: np.ndarray
    utterance_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.speaker_labels = np.asarray(self.speaker_labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError(f"expected an (n, d) matrix, got {self.vectors.shape}")
        if self.speaker_labels.shape != (self.vectors.shape[0],):
            raise ValueError("one speaker label per vector required")
        if not self.utterance_ids:
            self.utterance_ids = [f"utt{i:06d}" for i in range(self.vectors.shape[0])]
        if len(self.utterance_ids) != self.vectors.shape[0]:
            raise ValueError("one utterance id per vector required")

    @property
    def n_speakers(self) -> int:
        return np.unique(self.speaker_labels).size


@dataclass
class PldaModel:
    """Global mean plus between-class and within-class covariances."""

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.between = np.asarray(self.between, dtype=np.float64)
        self.within = np.asarray(self.within, dtype=np.float64)
        d = self.mean.size
        if self.between.shape != (d, d) or self.within.shape != (d, d):
            raise ValueError("covariance shapes must match the mean dimension")
        self._scorer = None

    @property
    def dim(self) -> int:
        return self.mean.size


def center_normalize(
    embedding_set: LabeledEmbeddingSet, length_norm: bool = False
) -> tuple[LabeledEmbeddingSet, np.ndarray]:
    """Subtract the training-set global mean; return the set and the mean.

    The stored mean must be applied to enrollment/test vectors at scoring
    time.  ``length_norm`` additionally projects rows onto the unit sphere
    (off by default).
    """
    mean = embedding_set.vectors.mean(axis=0)
    vectors = embedding_set.vectors - mean
    if length_norm:
        vectors = length_normalize(vectors)
    out = LabeledEmbeddingSet(
        vectors=vectors,
        speaker_labels=embedding_set.speaker_labels.copy(),
        utterance_ids=list(embedding_set.utterance_ids),
    )
    return out, mean


def length_normalize(vectors: np.ndarray) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _chol_logdet(mat: np.ndarray):
    """Lower-cholesky factor (scipy form) and log-determinant.

    Rounding can leave a mathematically positive-semidefinite update with a
    slightly negative eigenvalue; retry with an escalating trace-scaled
    ridge before giving up.
    """
    jitter = 0.0
    scale = max(float(np.trace(mat)) / mat.shape[0], EIGEN_FLOOR)
    for attempt in range(4):
        try:
            factor = cho_factor(
                mat if jitter == 0.0 else mat + jitter * np.eye(mat.shape[0]),
                lower=True,
                check_finite=False,
            )
            logdet = 2.0 * float(np.log(np.diagonal(factor[0])).sum())
            return factor, logdet
        except np.linalg.LinAlgError:
            jitter = scale * 10.0 ** (-12 + 3 * attempt)
    raise np.linalg.LinAlgError("covariance is not positive definite even after jitter")


def _is_positive_definite(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


def plda_train(
    embedding_set: LabeledEmbeddingSet,
    iterations: int = 10,
    eigen_floor: float = EIGEN_FLOOR,
) -> PldaModel:
    """Fit the two-covariance model by EM.

    The per-iteration total log-likelihood is recorded on the returned model
    and is non-decreasing (within numerical tolerance).  A rank-deficient
    within-class scatter triggers the eigenvalue floor with a warning.

    When the embedding dimension exceeds the number of vectors, the EM runs
    exactly in the span of the data (where all scatter lives); on the
    orthogonal complement both covariances stay isotropic and follow a
    scalar recursion.  The reconstructed full-dimension model matches a
    direct fit up to floating-point roundoff.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x = embedding_set.vectors
    labels = embedding_set.speaker_labels
    n, d = x.shape
    speakers, inverse = np.unique(labels, return_inverse=True)
    n_spk = speakers.size
    if n_spk < 2:
        raise ValueError(f"PLDA training needs >= 2 speakers, got {n_spk}")
    if n < 2:
        raise ValueError("PLDA training needs >= 2 vectors")
    counts = np.bincount(inverse, minlength=n_spk).astype(np.float64)

    if d > n:
        basis, _ = np.linalg.qr(x.T)  # (d, n) orthonormal span of the data
        coords = x @ basis
        mu_r, b_r, w_r, history, b_c, w_c = _em_fit(
            coords, inverse, counts, iterations, eigen_floor, extra_dims=d - n
        )
        eye_r = np.eye(n)
        mean = basis @ mu_r
        between = basis @ (b_r - b_c * eye_r) @ basis.T + b_c * np.eye(d)
        within = basis @ (w_r - w_c * eye_r) @ basis.T + w_c * np.eye(d)
        between = 0.5 * (between + between.T)
        within = 0.5 * (within + within.T)
    else:
        mean, between, within, history, _, _ = _em_fit(
            x, inverse, counts, iterations, eigen_floor, extra_dims=0
        )
    return PldaModel(mean=mean, between=between, within=within, log_likelihoods=history)


def _em_fit(
    x: np.ndarray,
    inverse: np.ndarray,
    counts: np.ndarray,
    iterations: int,
    eigen_floor: float,
    extra_dims: int,
):
    """EM in the working space, plus the isotropic complement recursion.

    `extra_dims` counts orthogonal-complement dimensions carrying no data:
    there both covariances are the scalars (b_c, w_c) times identity, the
    posterior deviations vanish, and only the log-determinant terms
    contribute to the likelihood.
    """
    n, d = x.shape
    n_spk = counts.size
    sums = np.zeros((n_spk, d))
    np.add.at(sums, inverse, x)
    means = sums / counts[:, None]
    # within-speaker scatter is constant across EM iterations
    centered = x - means[inverse]
    s_within = centered.T @ centered
    if n - n_spk < d + extra_dims or not _is_positive_definite(s_within):
        warnings.warn(
            "within-class scatter is rank-deficient; eigenvalue floor applied",
            RuntimeWarning,
        )

    mu = x.mean(axis=0)
    total = x - mu
    scatter = (total.T @ total) / n
    between = 0.5 * scatter + eigen_floor * np.eye(d)
    within = 0.5 * scatter + eigen_floor * np.eye(d)
    b_c = w_c = eigen_floor

    history: list[float] = []
    distinct_counts = np.unique(counts)
    d_full = d + extra_dims
    d_log2pi = d_full * math.log(2.0 * math.pi)
    const = -0.5 * d_full * float(np.log(counts).sum())
    for it in range(iterations + 1):
        # shared factorizations serve both the log-likelihood and the E-step
        chol_w, logdet_w = _chol_logdet(within)
        logdet_w += extra_dims * math.log(w_c)
        trace_term = float(np.trace(cho_solve(chol_w, s_within, check_finite=False)))
        loglik = const - 0.5 * (trace_term + (n - n_spk) * d_log2pi + (n - n_spk) * logdet_w)
        last = it == iterations
        post_means = np.empty_like(means)
        b_new = np.zeros((d, d))
        w_new = s_within.copy()
        b_c_new = 0.0
        w_c_new = 0.0
        for c in distinct_counts:
            sel = counts == c
            n_sel = int(sel.sum())
            chol_c, logdet_c = _chol_logdet(between + within / c)
            logdet_c += extra_dims * math.log(b_c + w_c / c)
            dev = means[sel] - mu
            half = solve_triangular(chol_c[0], dev.T, lower=True, check_finite=False)
            loglik += -0.5 * (n_sel * (d_log2pi + logdet_c) + float((half * half).sum()))
            if last:
                continue
            gb = cho_solve(chol_c, between, check_finite=False).T  # B (B + W/c)^{-1}
            cov = between - gb @ between
            post_means[sel] = mu + dev @ gb.T
            b_new += n_sel * cov
            w_new += c * n_sel * cov
            resid = means[sel] - post_means[sel]
            w_new += c * (resid.T @ resid)
            cov_c = b_c - b_c * b_c / (b_c + w_c / c)
            b_c_new += n_sel * cov_c
            w_c_new += c * n_sel * cov_c
        history.append(loglik)
        if last:
            break
        mu = post_means.mean(axis=0)
        dev = post_means - mu
        b_new += dev.T @ dev
        between = b_new / n_spk + eigen_floor * np.eye(d)
        within = w_new / n + eigen_floor * np.eye(d)
        between = 0.5 * (between + between.T)
        within = 0.5 * (within + within.T)
        b_c = b_c_new / n_spk + eigen_floor
        w_c = w_c_new / n + eigen_floor
    return mu, between, within, history, b_c, w_c


class _PldaScorer:
    """Precomputed quadratic forms for the pairwise log-likelihood ratio.

    The ratio decomposes as ``0.5 e'Qe + 0.5 t'Qt + e'S t + k`` for symmetric
    Q and S.  Both are built in the basis that diagonalizes (W, B) jointly,
    which stays well defined even for rank-deficient between-class
    covariances: with eigenvalues lam of B in the whitened-W space,

        Q = -V diag(lam^2 / ((1+lam)(1+2 lam))) V',
        S =  V diag(lam / (1+2 lam)) V',
        k = 0.5 * sum(log((1+lam)^2 / (1+2 lam))),  where V = W^{-T/2} U.
    """

    def __init__(self, model: PldaModel):
        chol_w = np.linalg.cholesky(model.within)
        white = solve_triangular(chol_w, model.between, lower=True, check_finite=False)
        white = solve_triangular(chol_w, white.T, lower=True, check_finite=False)
        white = 0.5 * (white + white.T)
        lam, u = np.linalg.eigh(white)
        lam = np.clip(lam, 0.0, None)
        v = solve_triangular(chol_w.T, u, lower=False, check_finite=False)
        self.mean = model.mean
        q_diag = -(lam * lam) / ((1.0 + lam) * (1.0 + 2.0 * lam))
        s_diag = lam / (1.0 + 2.0 * lam)
        self.q = (v * q_diag) @ v.T
        self.s = (v * s_diag) @ v.T
        self.k = 0.5 * float(np.sum(2.0 * np.log1p(lam) - np.log1p(2.0 * lam)))
        self.q = 0.5 * (self.q + self.q.T)
        self.s = 0.5 * (self.s + self.s.T)

    def score_pairs(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(enroll) - self.mean
        t = np.atleast_2d(test) - self.mean
        qe = 0.5 * ((e @ self.q) * e).sum(axis=1)
        qt = 0.5 * ((t @ self.q) * t).sum(axis=1)
        cross = ((e @ self.s) * t).sum(axis=1)
        return qe + qt + cross + self.k


def _scorer(model: PldaModel) -> _PldaScorer:
    if model._scorer is None:
        model._scorer = _PldaScorer(model)
    return model._scorer


def plda_score(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    """Log-likelihood ratio of same-speaker vs different-speaker hypotheses."""
    enroll = np.asarray(enroll, dtype=np.float64).reshape(-1)
    test = np.asarray(test, dtype=np.float64).reshape(-1)
    if enroll.size != model.dim or test.size != model.dim:
        raise ValueError(
            f"expected {model.dim}-d vectors, got {enroll.size} and {test.size}"
        )
    return float(_scorer(model).score_pairs(enroll[None, :], test[None, :])[0])


def plda_score_matrix(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Score aligned rows of `enroll` against `test` (one score per row pair)."""
    enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if enroll.shape != test.shape or enroll.shape[1] != model.dim:
        raise ValueError("enroll/test must be aligned (n, d) matrices")
    return _scorer(model).score_pairs(enroll, test)


def cosine_score(enroll: np.ndarray, test: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero vectors are rejected."""
    e = np.asarray(enroll, dtype=np.float64).reshape(-1)
    t = np.asarray(test, dtype=np.float64).reshape(-1)
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0.0 or nt == 0.0:
        raise ValueError("cosine score of a zero vector is undefined")
    return float(e @ t / (ne * nt))
