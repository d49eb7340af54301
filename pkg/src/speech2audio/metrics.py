"""Generation metrics over oracle-classifier outputs.

Fréchet distance between Gaussians fit to embedding sets, paired posterior
KL, inception score over renormalized posteriors, and per-clip event-set F1
(conditioning accuracy). Directions: FD down, KL down, IS up, accuracy up.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .utils import f1_score_sets
from .validation import ValidationError

EPS_COV = 1e-6
EPS_PROB = 1e-10

METRIC_DIRECTIONS = {
    "frechet_distance": "down",
    "kl": "down",
    "inception_score": "up",
    "conditioning_accuracy": "up",
}


def gaussian_frechet(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValidationError("moment shapes disagree")
    diff = float(np.sum((mu1 - mu2) ** 2))
    sqrt_prod, _ = scipy.linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.all(np.isfinite(sqrt_prod)):
        reg = EPS_COV * np.eye(cov1.shape[0])
        sqrt_prod, _ = scipy.linalg.sqrtm((cov1 + reg) @ (cov2 + reg), disp=False)
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    value = diff + float(np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(sqrt_prod))
    return max(value, 0.0)


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fit to two embedding sets.

    Each set needs at least dim + 1 vectors; near-singular covariances are
    regularized by EPS_COV * I.
    """
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.ndim != 2 or emb_b.ndim != 2 or emb_a.shape[1] != emb_b.shape[1]:
        raise ValidationError("embedding sets must be 2-D with equal width")
    dim = emb_a.shape[1]
    for name, emb in (("first", emb_a), ("second", emb_b)):
        if emb.shape[0] < dim + 1:
            raise ValidationError(
                f"{name} set has {emb.shape[0]} vectors; need at least dim+1 = {dim + 1}"
            )
    mu1, mu2 = emb_a.mean(axis=0), emb_b.mean(axis=0)
    cov1 = np.cov(emb_a, rowvar=False)
    cov2 = np.cov(emb_b, rowvar=False)
    return gaussian_frechet(mu1, cov1, mu2, cov2)


def _normalize_rows(posteriors: np.ndarray) -> np.ndarray:
    p = np.asarray(posteriors, dtype=np.float64) + EPS_PROB
    return p / p.sum(axis=1, keepdims=True)


def kl_metric(post_real: np.ndarray, post_gen: np.ndarray) -> float:
    """Mean KL(real || generated) over paired per-clip posteriors."""
    post_real = np.asarray(post_real, dtype=np.float64)
    post_gen = np.asarray(post_gen, dtype=np.float64)
    if post_real.shape != post_gen.shape or post_real.ndim != 2:
        raise ValidationError("posterior matrices must share an n x C shape")
    p = _normalize_rows(post_real)
    q = _normalize_rows(post_gen)
    return float(np.mean(np.sum(p * np.log(p / q), axis=1)))


def inception_score(post_gen: np.ndarray) -> float:
    """exp(E[KL(p(y|x) || p(y))]) over renormalized posteriors; in [1, C]."""
    post_gen = np.asarray(post_gen, dtype=np.float64)
    if post_gen.ndim != 2 or post_gen.shape[0] == 0:
        raise ValidationError("need a nonempty n x C posterior matrix")
    p = _normalize_rows(post_gen)
    marginal = p.mean(axis=0, keepdims=True)
    kl = np.sum(p * np.log(p / marginal), axis=1)
    return float(np.exp(np.mean(kl)))


def conditioning_accuracy(
    generated_waves, target_event_sets, oracle, threshold: float | None = None
) -> float:
    """Mean per-clip F1 between oracle-detected events and target sets."""
    if len(generated_waves) != len(target_event_sets):
        raise ValidationError("one target event set per generated clip required")
    proba = oracle.predict_proba(generated_waves)
    thr = oracle.threshold if threshold is None else threshold
    scores = []
    for row, targets in zip(proba, target_event_sets):
        detected = set(int(i) for i in np.flatnonzero(row >= thr))
        scores.append(f1_score_sets(detected, set(int(t) for t in targets)))
    return float(np.mean(scores))
