"""Multi-granularity transformer node-feature extractor.

Each band-limited channel signal is tokenized by strided convolutions at
several window lengths, the token streams are concatenated, given a
sinusoidal positional encoding, passed through pre-norm transformer
blocks and pooled into one feature vector per channel.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .kernels import conv_out_len

# window lengths in seconds
GRANULARITIES = {
    "fine": (0.02, 0.03, 0.04),
    "medium": (0.04, 0.06, 0.08),
    "coarse": (0.08, 0.10, 0.12),
    "mixed-1": (0.02, 0.06, 0.10),
    "mixed-2": (0.03, 0.07, 0.11),
    "single-fine": (0.02,),
    "single-medium": (0.06,),
    "single-coarse": (0.10,),
}
AGGREGATIONS = ("mean", "max", "attention")
POOL = 2


def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def kernel_length(g, fs):
    return max(1, _round_half_up(g * fs))


def stride_for(k):
    return max(1, _round_half_up(k / 2))


@dataclass(frozen=True)
class GranularityConfig:
    name: str
    windows: tuple

    @classmethod
    def named(cls, name):
        if name not in GRANULARITIES:
            raise ValueError(f"unknown granularity {name!r}; choose from {sorted(GRANULARITIES)}")
        return cls(name, GRANULARITIES[name])

    def kernels(self, fs):
        return [kernel_length(g, fs) for g in self.windows]

    def token_lengths(self, T, fs):
        """Tokens per granularity for a T-sample input (0 where skipped)."""
        out = []
        for k in self.kernels(fs):
            if T < k:
                out.append(0)
            else:
                out.append(conv_out_len(T, k, stride_for(k)) // POOL)
        return out


@dataclass
class NFEConfig:
    d_token: int = 16
    heads: int = 2
    layers: int = 2
    d_h: int = 16
    aggregation: str = "mean"
    max_len: int = 512
    use_pe: bool = True

    def __post_init__(self):
        if self.d_token % self.heads:
            raise ValueError(f"d_token={self.d_token} not divisible by heads={self.heads}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


def sinusoidal_encoding(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)
    ang = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


class MGTNFE:
    def __init__(self, store, rng, cfg, granularity, fs, prefix="nfe"):
        self.cfg = cfg
        self.gran = granularity
        self.fs = fs
        self.prefix = prefix
        self.store = store
        self.pe = sinusoidal_encoding(cfg.max_len, cfg.d_token)
        D = cfg.d_token
        p = prefix
        for i, k in enumerate(granularity.kernels(fs)):
            store.add(f"{p}.conv{i}.w", tn.glorot_uniform(rng, (D, k), k, D))
            store.add(f"{p}.conv{i}.b", np.zeros(D))
        for l in range(cfg.layers):
            b = f"{p}.block{l}"
            for ln in ("ln1", "ln2"):
                store.add(f"{b}.{ln}.g", np.ones(D))
                store.add(f"{b}.{ln}.b", np.zeros(D))
            for m in ("q", "k", "v", "o"):
                store.add(f"{b}.attn.{m}.w", tn.glorot_uniform(rng, (D, D), D, D))
                if m != "k":  # a key bias shifts every score of a query equally; softmax ignores it
                    store.add(f"{b}.attn.{m}.b", np.zeros(D))
            store.add(f"{b}.ff1.w", tn.glorot_uniform(rng, (D, 4 * D), D, 4 * D))
            store.add(f"{b}.ff1.b", np.zeros(4 * D))
            store.add(f"{b}.ff2.w", tn.glorot_uniform(rng, (4 * D, D), 4 * D, D))
            store.add(f"{b}.ff2.b", np.zeros(D))
        if cfg.aggregation == "attention":
            store.add(f"{p}.pool.w", tn.glorot_uniform(rng, (D, 1), D, 1))
        store.add(f"{p}.proj.w", tn.glorot_uniform(rng, (D, cfg.d_h), D, cfg.d_h))
        store.add(f"{p}.proj.b", np.zeros(cfg.d_h))

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def tokenize(self, x, i):
        """(M, T') signals -> (M, L_g, D_T) tokens for granularity i, or None if too short."""
        w = self._p(f"conv{i}.w")
        k = w.shape[1]
        T = x.shape[-1]
        if T < k or conv_out_len(T, k, stride_for(k)) < POOL:
            warnings.warn(
                f"granularity {self.gran.windows[i]} s (kernel {k}) skipped: input has {T} samples"
            )
            return None
        h = tn.conv1d(x, w, self._p(f"conv{i}.b"), stride_for(k))
        return tn.maxpool2(tn.leaky_relu(h))

    def attention(self, x, block, return_weights=False):
        H = self.cfg.heads

        def proj(m):
            h = x @ self._p(f"{block}.attn.{m}.w")
            return h if m == "k" else h + self._p(f"{block}.attn.{m}.b")

        ctx, a = tn.attention(proj("q"), proj("k"), proj("v"), H, return_weights=True)
        out = ctx @ self._p(f"{block}.attn.o.w") + self._p(f"{block}.attn.o.b")
        return (out, a) if return_weights else out

    def block(self, x, l, return_weights=False):
        b = f"block{l}"
        h = tn.layer_norm(x, self._p(f"{b}.ln1.g"), self._p(f"{b}.ln1.b"))
        att = self.attention(h, b, return_weights)
        if return_weights:
            att, weights = att
        x = x + att
        h = tn.layer_norm(x, self._p(f"{b}.ln2.g"), self._p(f"{b}.ln2.b"))
        h = tn.leaky_relu(h @ self._p(f"{b}.ff1.w") + self._p(f"{b}.ff1.b"))
        x = x + (h @ self._p(f"{b}.ff2.w") + self._p(f"{b}.ff2.b"))
        return (x, weights) if return_weights else x

    def encode_tokens(self, tokens, return_weights=False):
        """Concatenate token streams, add positions, run the transformer stack."""
        seq = tn.concat(tokens, axis=1) if len(tokens) > 1 else tokens[0]
        L = seq.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"{L} tokens exceed max_len={self.cfg.max_len}; increase max_len")
        if self.cfg.use_pe:
            seq = seq + self.pe[:L]
        weights = []
        for l in range(self.cfg.layers):
            if return_weights:
                seq, w = self.block(seq, l, True)
                weights.append(w)
            else:
                seq = self.block(seq, l)
        return (seq, weights) if return_weights else seq

    def aggregate(self, enc):
        mode = self.cfg.aggregation
        if mode == "mean":
            return tn.mean(enc, axis=1)
        if mode == "max":
            return tn.amax(enc, axis=1)
        a = tn.softmax(enc @ self._p("pool.w"), axis=1)
        return tn.tsum(enc * a, axis=1)

    def encode(self, x):
        """(M, T') band-limited signals -> (M, d_h) node features."""
        if not isinstance(x, tn.Tensor):
            x = tn.Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        tokens = [t for t in (self.tokenize(x, i) for i in range(len(self.gran.windows))) if t is not None]
        if not tokens:
            raise ValueError(f"every granularity was skipped for input length {x.shape[-1]}")
        pooled = self.aggregate(self.encode_tokens(tokens))
        return pooled @ self._p("proj.w") + self._p("proj.b")

    def encode_channel_band(self, x_ck):
        return self.encode(np.asarray(x_ck, dtype=np.float64)[None, :])

    def extract_band_features(self, feat, k):
        """Node feature matrix H^(k) (C x d_h) for one epoch and band index k."""
        return self.encode(feat.filtered[k])
