"""Expert decoders, input-dependent gate and the mixture prediction."""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as tn

EXPERT_HIDDEN = 16
GATE_HIDDEN = 32
MIXTURE_MODES = ("prob", "logit")


@dataclass
class MixtureOutput:
    pi: np.ndarray  # (N, K)
    logits: np.ndarray  # (N, K)
    p_hat: np.ndarray  # (N,)

    @property
    def expert_probs(self):
        return expit(self.logits)


def mean_pool(Z):
    """Average node latents over the channel axis (second to last)."""
    return tn.mean(Z, axis=-2)


class MixtureHead:
    def __init__(self, store, rng, K, d_h, d_z, prefix="moe"):
        self.store = store
        self.prefix = prefix
        self.K = K
        p = prefix
        h = EXPERT_HIDDEN
        store.add(f"{p}.exp1.w", tn.glorot_uniform(rng, (K, d_z, h), d_z, h))
        store.add(f"{p}.exp1.b", np.zeros((K, 1, h)))
        store.add(f"{p}.exp2.w", tn.glorot_uniform(rng, (K, h, 1), h, 1))
        store.add(f"{p}.exp2.b", np.zeros((K, 1, 1)))
        store.add(f"{p}.phi.w", tn.glorot_uniform(rng, (K * d_h, GATE_HIDDEN), K * d_h, GATE_HIDDEN))
        store.add(f"{p}.phi.b", np.zeros(GATE_HIDDEN))
        # zero scores: the gate starts uniform and only moves once experts differ
        store.add(f"{p}.gate.w", np.zeros((GATE_HIDDEN, K)))

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def gate_logits(self, H_cat):
        """H_cat: (N, C, K*d_h) concatenated band features -> (N, K) scores w_k . phi(H')."""
        phi = tn.leaky_relu(tn.mean(H_cat, axis=1) @ self._p("phi.w") + self._p("phi.b"))
        return phi @ self._p("gate.w")

    def gate_weights(self, H_cat):
        return tn.softmax(self.gate_logits(H_cat), axis=-1)

    def expert_decode(self, zbar):
        """zbar: (N, K, d_z) -> (N, K) expert logits."""
        N, K, dz = zbar.shape
        h = tn.leaky_relu(zbar.reshape(N, K, 1, dz) @ self._p("exp1.w") + self._p("exp1.b"))
        out = h @ self._p("exp2.w") + self._p("exp2.b")
        return out.reshape(N, K)


def gate_softmax(scores):
    """Softmax over experts with max subtraction (plain numpy)."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mixture_predict(pi, logits, mode="prob"):
    """Mixed probability: sum pi_k sigmoid(l_k) ('prob') or sigmoid(sum pi_k l_k) ('logit')."""
    pi = np.asarray(pi, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "prob":
        return (pi * expit(logits)).sum(axis=-1)
    if mode == "logit":
        return expit((pi * logits).sum(axis=-1))
    raise ValueError(f"mixture mode must be one of {MIXTURE_MODES}")


def mixture_log_probs(log_pi, logits, mode="prob"):
    """Tape version: (log p_hat, log(1 - p_hat)) computed in log space."""
    if mode == "prob":
        lp1 = tn.logsumexp(log_pi + tn.log_sigmoid(logits), axis=-1)
        lp0 = tn.logsumexp(log_pi + tn.log_sigmoid(-logits), axis=-1)
        return lp1, lp0
    if mode == "logit":
        mixed = tn.tsum(tn.exp(log_pi) * logits, axis=-1)
        return tn.log_sigmoid(mixed), tn.log_sigmoid(-mixed)
    raise ValueError(f"mixture mode must be one of {MIXTURE_MODES}")
