"""Negative ELBO: mixture log-loss plus weighted GMRF KL terms."""
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .graphprior import PrecisionMatrix, logdet_pd

P_CLAMP = 1e-12
clamp_events = Counter()


@dataclass
class LossBreakdown:
    nll: float
    kl: np.ndarray  # per expert, batch-averaged
    total: float
    lambda_kl: float

    def as_record(self, step, **extra):
        rec = {"step": int(step), "nll": float(self.nll), "kl": [float(v) for v in self.kl],
               "total": float(self.total)}
        rec.update(extra)
        return rec


def kl_gmrf(mu, log_sigma, Q, logdet=None, paper_sign=False):
    """KL( N(mu_j, diag sigma_j^2) || N(0, Q^-1) ) summed over latent coordinates j.

    ``mu`` and ``log_sigma`` are (..., C, d_z); each column is one C-vector.
    ``Q`` is a PrecisionMatrix or an (..., C, C) array with matching
    leading axes; ``logdet`` optionally supplies log|Q| of shape (...).
    Returns a Tensor of shape (...).

    ``paper_sign`` flips the log|Q| term to +log|Q|, which is not a
    divergence (it can go negative) and exists only for reproduction runs.
    """
    if isinstance(Q, PrecisionMatrix):
        logdet = Q.logdet if logdet is None else logdet
        Q = Q.Q
    Q = np.asarray(Q, dtype=np.float64)
    mu, log_sigma = tn.as_tensor(mu), tn.as_tensor(log_sigma)
    if mu.shape != log_sigma.shape or mu.shape[-2] != Q.shape[-1]:
        raise tn.ShapeError(f"kl_gmrf: mu {mu.shape}, log_sigma {log_sigma.shape}, Q {Q.shape}")
    if logdet is None:
        flat = Q.reshape(-1, Q.shape[-1], Q.shape[-1])
        logdet = np.array([logdet_pd(q) for q in flat]).reshape(Q.shape[:-2])
    C, dz = mu.shape[-2], mu.shape[-1]
    qdiag = np.diagonal(Q, axis1=-2, axis2=-1)[..., None]
    var = tn.exp(log_sigma * 2.0)
    trace_term = tn.tsum(var * qdiag, axis=(-2, -1))
    quad = tn.tsum(tn.matmul(Q, mu) * mu, axis=(-2, -1))
    log_det_sigma = tn.tsum(log_sigma, axis=(-2, -1)) * 2.0
    sign = 1.0 if paper_sign else -1.0
    const = sign * dz * np.asarray(logdet) - C * dz
    return (trace_term + quad - log_det_sigma + const) * 0.5


def classification_nll(p_hat, y):
    """Binary log-loss from a probability; clamps to [1e-12, 1 - 1e-12]."""
    p = np.asarray(p_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bad = (p < P_CLAMP) | (p > 1 - P_CLAMP)
    if np.any(bad):
        clamp_events["nll"] += int(np.sum(bad))
        warnings.warn(f"{int(np.sum(bad))} probabilities clamped before log-loss")
        p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def nll_from_log_probs(lp1, lp0, y):
    """Per-sample -[y log p + (1-y) log(1-p)] on the tape."""
    y = np.asarray(y, dtype=np.float64)
    return -(lp1 * y + lp0 * (1.0 - y))


def combine(nll, kl, lambda_kl):
    """Batch mean of nll plus lambda times the sum over experts of batch-mean KL.

    ``nll``: (N,) tensor; ``kl``: (N, K) tensor or None (prior disabled).
    Returns the scalar loss tensor and its LossBreakdown.
    """
    if lambda_kl < 0:
        raise ValueError("lambda_kl must be >= 0")
    nll_mean = tn.mean(nll)
    if kl is None:
        K = 4
        kl_mean_data = np.zeros(K)
        total = nll_mean
    else:
        kl_mean = tn.mean(kl, axis=0)
        kl_mean_data = kl_mean.data.copy()
        if lambda_kl:
            kl_term = tn.tsum(kl_mean) * lambda_kl
            total = nll_mean + kl_term
            total.terms = (float(nll_mean.data), float(kl_term.data))
        else:
            total = nll_mean
    return total, LossBreakdown(float(nll_mean.data), kl_mean_data, float(total.data), lambda_kl)


def total_loss(batch, model, lambda_kl, eps=None, rng=None):
    """Negative ELBO of ``model`` on ``batch``; see VMoGE.loss."""
    return model.loss(batch, lambda_kl=lambda_kl, eps=eps, rng=rng)
