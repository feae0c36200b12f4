"""Per-band variational GCN encoders with mean-field Gaussian posteriors.

All K band encoders are stored stacked along a leading expert axis so a
batch of shape (N, K, C, d) runs through every expert in one pass.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .graphprior import normalized_adjacency

LOGSIG_MIN, LOGSIG_MAX = -8.0, 4.0


@dataclass
class LatentPosterior:
    mu: tn.Tensor  # (..., C, d_z)
    log_sigma: tn.Tensor

    @property
    def sigma(self):
        return np.exp(self.log_sigma.data)


@dataclass
class LatentSample:
    z: tn.Tensor
    eps: np.ndarray


def normalize_adjacency(A, add_self_loops=False):
    return normalized_adjacency(A, add_self_loops)


class BandEncoder:
    """Two-layer GCN plus mean / log-std heads for each of K experts."""

    def __init__(self, store, rng, K, d_h, d_g=16, d_z=8, prefix="enc", logsig_init=0.0):
        self.store = store
        self.prefix = prefix
        self.K, self.d_z = K, d_z
        p = prefix
        store.add(f"{p}.gcn1.w", tn.glorot_uniform(rng, (K, d_h, d_g), d_h, d_g))
        store.add(f"{p}.gcn1.b", np.zeros((K, 1, d_g)))
        store.add(f"{p}.gcn2.w", tn.glorot_uniform(rng, (K, d_g, d_g), d_g, d_g))
        store.add(f"{p}.gcn2.b", np.zeros((K, 1, d_g)))
        store.add(f"{p}.mu.w", tn.glorot_uniform(rng, (K, d_g, d_z), d_g, d_z))
        store.add(f"{p}.mu.b", np.zeros((K, 1, d_z)))
        # zero weights: every posterior starts at the same scale exp(logsig_init)
        store.add(f"{p}.logsig.w", np.zeros((K, d_g, d_z)))
        store.add(f"{p}.logsig.b", np.full((K, 1, d_z), float(logsig_init)))

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def gcn_forward(self, H, A_hat):
        """H: (N, K, C, d_h), A_hat: (N, K, C, C) -> (N, K, C, d_g)."""
        h = tn.leaky_relu(A_hat @ H @ self._p("gcn1.w") + self._p("gcn1.b"))
        return A_hat @ h @ self._p("gcn2.w") + self._p("gcn2.b")

    def posterior_params(self, Ht):
        mu = Ht @ self._p("mu.w") + self._p("mu.b")
        raw = Ht @ self._p("logsig.w") + self._p("logsig.b")
        return LatentPosterior(mu, tn.clamp(raw, LOGSIG_MIN, LOGSIG_MAX))

    def __call__(self, H, A_hat):
        return self.posterior_params(self.gcn_forward(H, A_hat))


def reparameterize(post, eps):
    """Z = mu + exp(log_sigma) * eps with eps held fixed."""
    eps = np.asarray(eps, dtype=np.float64)
    return LatentSample(post.mu + tn.exp(post.log_sigma) * eps, eps)
