"""Band graphs, normalized Laplacians and GMRF precision matrices."""
import math
from dataclasses import dataclass

import numpy as np

VARIANTS = ("none", "laplacian-shift", "normalized-laplacian-shift", "pure-normalized")
VARIANT_ALIASES = {
    "none": "none",
    "l-shift": "laplacian-shift",
    "lnorm-shift": "normalized-laplacian-shift",
    "pure": "pure-normalized",
}
PURE_JITTER = 1e-6
MAX_JITTER = 1e-2


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    variant: str = "normalized-laplacian-shift"
    shift: float = 0.1

    def __post_init__(self):
        v = VARIANT_ALIASES.get(self.variant, self.variant)
        if v not in VARIANTS:
            raise ValueError(f"unknown prior variant {self.variant!r}")
        if self.shift < 0:
            raise ValueError("prior shift must be >= 0")
        object.__setattr__(self, "variant", v)

    @property
    def enabled(self):
        return self.variant != "none"


@dataclass
class PrecisionMatrix:
    Q: np.ndarray
    chol: np.ndarray
    logdet: float
    jitter: float = 0.0

    @property
    def diag(self):
        return np.diag(self.Q)


def _abs_corr(x):
    x = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=1))
    ok = norm > 0
    xs = np.zeros_like(x)
    xs[ok] = x[ok] / norm[ok, None]
    r = np.abs(xs @ xs.T)
    np.clip(r, 0.0, 1.0, out=r)
    np.fill_diagonal(r, 0.0)
    return r


def build_adjacency(filtered, density=0.3):
    """Top-density fraction of absolute Pearson correlations between channels.

    Channels with zero variance have all correlations set to 0.
    """
    filtered = np.asarray(filtered, dtype=np.float64)
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    C, T = filtered.shape
    if T < 2:
        raise ValueError("need at least 2 samples per channel")
    r = _abs_corr(filtered)
    iu, ju = np.triu_indices(C, k=1)
    vals = r[iu, ju]
    keep = math.ceil(density * vals.size - 1e-9)
    order = np.argsort(-vals, kind="stable")[:keep]
    A = np.zeros((C, C))
    A[iu[order], ju[order]] = vals[order]
    A[ju[order], iu[order]] = vals[order]
    return A


def _inv_sqrt_degree(A):
    deg = A.sum(axis=-1)
    out = np.zeros_like(deg)
    pos = deg > 0
    out[pos] = 1.0 / np.sqrt(deg[pos])
    return out


def normalized_adjacency(A, add_self_loops=False):
    """D^{-1/2} A D^{-1/2}; isolated nodes get D^{-1/2} = 0. Works on stacks."""
    A = np.asarray(A, dtype=np.float64)
    if add_self_loops:
        A = A + np.eye(A.shape[-1])
    d = _inv_sqrt_degree(A)
    return d[..., :, None] * A * d[..., None, :]


def normalized_laplacian(A):
    A = np.asarray(A, dtype=np.float64)
    return np.eye(A.shape[-1]) - normalized_adjacency(A)


def laplacian(A):
    A = np.asarray(A, dtype=np.float64)
    return np.diag(A.sum(axis=1)) - A


def _locate_pivot(Q):
    for k in range(1, Q.shape[0] + 1):
        try:
            np.linalg.cholesky(Q[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return None


def cholesky_pd(Q, name="Q"):
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        k = _locate_pivot(Q)
        raise NotPositiveDefiniteError(
            f"{name} ({Q.shape[0]}x{Q.shape[1]}) is not positive definite: "
            f"Cholesky fails at pivot {k}"
        ) from None


def logdet_pd(Q, name="Q"):
    """log|Q| from the Cholesky factor: 2 * sum(log diag(L))."""
    L = cholesky_pd(np.asarray(Q, dtype=np.float64), name)
    return 2.0 * float(np.log(np.diag(L)).sum())


def precision_matrix(A, spec):
    if not spec.enabled:
        raise ValueError("prior variant 'none' has no precision matrix")
    A = np.asarray(A, dtype=np.float64)
    C = A.shape[0]
    eye = np.eye(C)
    if spec.variant == "laplacian-shift":
        base = laplacian(A) + spec.shift * eye
        jitter = 0.0
    elif spec.variant == "normalized-laplacian-shift":
        base = normalized_laplacian(A) + spec.shift * eye
        jitter = 0.0
    else:
        base = normalized_laplacian(A)
        jitter = PURE_JITTER
    base = 0.5 * (base + base.T)
    while True:
        Q = base + jitter * eye if jitter else base
        try:
            L = np.linalg.cholesky(Q)
            if np.all(np.diag(L) > 0):
                break
        except np.linalg.LinAlgError:
            pass
        jitter = PURE_JITTER if jitter == 0 else jitter * 10
        if jitter > MAX_JITTER * (1 + 1e-9):
            cholesky_pd(base + MAX_JITTER * eye, name=f"precision[{spec.variant}]")
            raise NotPositiveDefiniteError(f"precision[{spec.variant}] not PD after jitter {MAX_JITTER}")
    return PrecisionMatrix(Q=Q, chol=L, logdet=2.0 * float(np.log(np.diag(L)).sum()), jitter=jitter)


def precision_stack(adjacency, spec):
    """Precision matrices for an (..., C, C) stack of adjacencies.

    Returns (Q, logdet) arrays of shapes (..., C, C) and (...).
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    lead = adjacency.shape[:-2]
    C = adjacency.shape[-1]
    flat = adjacency.reshape(-1, C, C)
    Qs = np.empty_like(flat)
    ld = np.empty(flat.shape[0])
    for i, A in enumerate(flat):
        pm = precision_matrix(A, spec)
        Qs[i] = pm.Q
        ld[i] = pm.logdet
    return Qs.reshape(lead + (C, C)), ld.reshape(lead)
