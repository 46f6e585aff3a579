"""Open-set feature fusion: per-voxel Normal-Inverse-Gamma posteriors.

Per voxel and feature dimension the unknown (mu, sigma^2) carries a
NIG(m, lambda, nu, beta) belief, fused with conjugate batch updates.  Two of
the four parameters ride on the voxel's integration weight W instead of
being stored: lambda = max(W, lambda_floor) and 2*nu = W.  The posterior
predictive for a new observation is Student-t.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln

from .errors import SemvoxError


def absorb_batch(m, beta, lam, batch) -> tuple[NDArray, NDArray]:
    """Conjugate NIG update from a batch of feature vectors.

    batch has shape (n, l); m and beta are (l,).  Returns updated (m, beta);
    the caller advances lambda and nu through the weight it controls.
    """
    m = np.asarray(m, np.float64)
    beta = np.asarray(beta, np.float64)
    batch = np.atleast_2d(np.asarray(batch, np.float64))
    n = batch.shape[0]
    if n == 0:
        return m.copy(), beta.copy()
    if batch.shape[1] != m.shape[-1]:
        raise SemvoxError(
            f"batch feature dim {batch.shape[1]} != state dim {m.shape[-1]}"
        )
    lam = float(lam)
    if lam <= 0:
        raise SemvoxError(f"lambda must be positive, got {lam}")
    zbar = batch.mean(axis=0)
    lam_post = lam + n
    m_post = (lam * m + n * zbar) / lam_post
    ss = ((batch - zbar) ** 2).sum(axis=0)
    beta_post = beta + 0.5 * ss + (lam * n / lam_post) * (zbar - m) ** 2 * 0.5
    return m_post, beta_post


def student_t_params(m, beta, weight) -> tuple[NDArray, float, NDArray]:
    """Posterior predictive Student-t (mean, dof, scale^2) per dimension.

    dof = 2*nu = weight; scale^2 = beta*(lambda+1)/(lambda*nu) with
    lambda = weight.  Requires weight > 0.
    """
    w = float(weight)
    if w <= 0:
        raise SemvoxError("predictive undefined for an unobserved voxel (weight 0)")
    m = np.asarray(m, np.float64)
    beta = np.asarray(beta, np.float64)
    scale2 = 2.0 * beta * (w + 1.0) / (w * w)
    return m.copy(), w, scale2


def predictive_variance(m, beta, weight) -> NDArray[np.float64]:
    """Variance of the Student-t predictive; requires dof > 2."""
    _, dof, scale2 = student_t_params(m, beta, weight)
    if dof <= 2.0:
        raise SemvoxError(f"predictive variance undefined for dof <= 2 (dof={dof})")
    return dof / (dof - 2.0) * scale2


def nig_log_pdf(mu, sigma2, m, lam, nu, beta) -> float:
    """Log density of NIG at (mu, sigma^2), product over dimensions."""
    mu = np.asarray(mu, np.float64)
    sigma2 = np.asarray(sigma2, np.float64)
    m = np.asarray(m, np.float64)
    beta = np.asarray(beta, np.float64)
    lam, nu = float(lam), float(nu)
    if np.any(sigma2 <= 0) or lam <= 0 or nu <= 0 or np.any(beta <= 0):
        raise SemvoxError("NIG density requires positive sigma^2, lambda, nu, beta")
    # N(mu | m, sigma^2/lambda) * InvGamma(sigma^2 | nu, beta), per dimension
    log_norm = 0.5 * (np.log(lam) - np.log(2.0 * np.pi * sigma2)) - lam * (mu - m) ** 2 / (
        2.0 * sigma2
    )
    log_ig = (
        nu * np.log(beta) - gammaln(nu) - (nu + 1.0) * np.log(sigma2) - beta / sigma2
    )
    return float(np.sum(log_norm + log_ig))


def student_t_log_pdf(z, m, dof, scale2) -> float:
    """Log density of the independent-per-dimension Student-t predictive."""
    z = np.asarray(z, np.float64)
    m = np.asarray(m, np.float64)
    scale2 = np.asarray(scale2, np.float64)
    dof = float(dof)
    if dof <= 0 or np.any(scale2 <= 0):
        raise SemvoxError("Student-t requires positive dof and scale")
    lg = gammaln(0.5 * (dof + 1.0)) - gammaln(0.5 * dof)
    core = -0.5 * (dof + 1.0) * np.log1p((z - m) ** 2 / (dof * scale2))
    per_dim = lg - 0.5 * np.log(dof * np.pi * scale2) + core
    return float(np.sum(per_dim))


def query_classes(m, weight, embeddings, temperature=0.01, confidence_threshold=0.1):
    """Score a voxel mean against label embeddings.

    Cosine similarities pass through a softmax at the given temperature;
    returns (probs (k,), accepted).  accepted is False when the best
    probability misses the confidence threshold or the mean is degenerate.
    """
    m = np.asarray(m, np.float64)
    emb = np.asarray(embeddings, np.float64)
    if emb.ndim != 2 or emb.shape[1] != m.shape[0]:
        raise SemvoxError(
            f"embeddings shape {emb.shape} incompatible with feature dim {m.shape[0]}"
        )
    mn = math.sqrt(float(m @ m))
    if mn == 0.0 or weight <= 0.0:
        return np.full(emb.shape[0], np.nan), False
    en = np.sqrt((emb * emb).sum(axis=1))
    if np.any(en == 0.0):
        raise SemvoxError("zero-norm label embedding")
    sims = (emb @ m) / (en * mn)
    logits = sims / temperature
    logits -= logits.max()
    e = np.exp(logits)
    probs = e / e.sum()
    accepted = bool(probs.max() >= confidence_threshold)
    return probs, accepted


def classify_means(means, weights, embeddings, temperature=0.01, confidence_threshold=0.1):
    """Batch form of query_classes: label each row of means (N, l).

    Returns (labels (N,) int32, best_prob (N,) float64).  Label 0 marks
    rejection: degenerate mean, non-positive weight, or best softmax
    probability under the confidence threshold.
    """
    means = np.asarray(means, np.float64)
    weights = np.asarray(weights, np.float64)
    sims = cosine_to_embeddings(means, embeddings)
    ok = np.isfinite(sims).all(axis=1) & (weights > 0.0)
    labels = np.zeros(means.shape[0], np.int32)
    best = np.zeros(means.shape[0], np.float64)
    if ok.any():
        logits = sims[ok] / temperature
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        top = probs.max(axis=1)
        lab = np.argmax(probs, axis=1).astype(np.int32) + 1
        lab[top < confidence_threshold] = 0
        labels[ok] = lab
        best[ok] = top
    return labels, best


def cosine_to_embeddings(means: NDArray, embeddings: NDArray) -> NDArray[np.float64]:
    """Cosine similarity of each row of means (N, l) against embeddings
    (k, l) -> (N, k).  Zero-norm means yield NaN rows."""
    means = np.asarray(means, np.float64)
    emb = np.asarray(embeddings, np.float64)
    mn = np.sqrt((means * means).sum(axis=1))
    en = np.sqrt((emb * emb).sum(axis=1))
    if np.any(en == 0.0):
        raise SemvoxError("zero-norm label embedding")
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (means @ emb.T) / (mn[:, None] * en[None, :])
    sims[mn == 0.0] = np.nan
    return sims


def tied_argmax(values: np.ndarray, rtol: float = 5e-3) -> np.ndarray:
    """Row argmax that treats components within rtol of the row max as
    tied and resolves ties to the lowest index."""
    values = np.asarray(values, np.float64)
    mx = values.max(axis=1, keepdims=True)
    tied = values >= mx - rtol * np.abs(mx)
    return np.argmax(tied, axis=1)


def one_hot_bridge_ratio(open_grid, closed_grid, rtol: float = 5e-3) -> float:
    """Agreement between per-voxel classes read from the open-set feature
    means and from the closed-set Dirichlet counts, over coincident
    active voxels.

    With one-hot basis features and a zero prior mean, each per-class
    mean is that class's observation count scaled by a factor shared
    across classes, except that the voxel's first batch is discounted by
    lambda_floor / (lambda_floor + W_first) because lambda re-derives
    from W and the prior mass is absorbed only once.  For unit weights
    the discount is below lambda_floor, so strict count majorities keep
    their argmax while exact count ties smear by less than lambda_floor
    relative.  Classifying both sides with `tied_argmax` puts smeared
    ties back onto the closed-set tie resolution (lowest index), which
    is what makes noiseless agreement exact; genuinely distinct counts
    differ by at least one observation and sit far above rtol.
    """
    c_coords, (counts,) = closed_grid.active_values()
    o_coords, (means, _) = open_grid.active_values()
    if c_coords.shape[0] == 0 or o_coords.shape[0] == 0:
        raise SemvoxError("grids share no active voxels")
    both = np.concatenate([np.asarray(o_coords), np.asarray(c_coords)], axis=0)
    _, inv = np.unique(both, axis=0, return_inverse=True)
    n_open = o_coords.shape[0]
    open_at = np.full(inv.max() + 1, -1, np.int64)
    closed_at = np.full(inv.max() + 1, -1, np.int64)
    open_at[inv[:n_open]] = np.arange(n_open)
    closed_at[inv[n_open:]] = np.arange(c_coords.shape[0])
    shared = (open_at >= 0) & (closed_at >= 0)
    if not shared.any():
        raise SemvoxError("grids share no active voxels")
    open_labels = tied_argmax(means[open_at[shared]], rtol)
    closed_labels = tied_argmax(counts[closed_at[shared]], rtol)
    return float(np.mean(open_labels == closed_labels))
