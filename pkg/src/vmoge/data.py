"""Featurized datasets and the dense arrays the model consumes."""
from dataclasses import dataclass, field

import numpy as np

from .graphprior import PriorSpec, build_adjacency, normalized_adjacency, precision_stack
from .spectral import BANDS, band_decompose, epoch_split, relative_band_power

GRAPH_SCOPES = ("epoch", "subject")


@dataclass
class FeatureSet:
    """All epochs of a cohort, stacked.

    rbp (N, B, C), filtered (N, B, C, T'), adjacency (N, B, C, C),
    subject_index (N,) into ``subjects``, labels (N,), epoch_index (N,).
    """

    rbp: np.ndarray
    filtered: np.ndarray
    adjacency: np.ndarray
    subject_index: np.ndarray
    labels: np.ndarray
    subjects: list
    fs: float
    epoch_index: np.ndarray | None = None
    covariates: dict = field(default_factory=dict)  # subject -> {name: value}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subject_index = np.asarray(self.subject_index, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.epoch_index is None:
            self.epoch_index = np.zeros(len(self.labels), dtype=np.int64)
            counts = {}
            for i, s in enumerate(self.subject_index):
                self.epoch_index[i] = counts.get(s, 0)
                counts[s] = self.epoch_index[i] + 1
        self.epoch_index = np.asarray(self.epoch_index, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def n_channels(self):
        return self.filtered.shape[2]

    @property
    def epoch_samples(self):
        return self.filtered.shape[3]

    def subject_labels(self):
        """Label per subject (taken from its first epoch)."""
        out = {}
        for s, y in zip(self.subject_index, self.labels):
            out.setdefault(int(s), int(y))
        return out

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureSet(
            rbp=self.rbp[idx], filtered=self.filtered[idx], adjacency=self.adjacency[idx],
            subject_index=self.subject_index[idx], labels=self.labels[idx],
            subjects=self.subjects, fs=self.fs, epoch_index=self.epoch_index[idx],
            covariates=self.covariates, meta=self.meta,
        )


def featurize_recordings(recordings, epoch_sec=4.0, density=0.3, graph_scope="epoch",
                         nperseg=None, overlap=0.5):
    """Epoch, decompose and graph a list of RawRecordings into a FeatureSet."""
    if graph_scope not in GRAPH_SCOPES:
        raise ValueError(f"graph_scope must be one of {GRAPH_SCOPES}")
    fs_set = {r.fs for r in recordings}
    if len(fs_set) != 1:
        raise ValueError(f"recordings have mixed sampling rates {sorted(fs_set)}")
    fs = fs_set.pop()
    rbp, filt, adj, sidx, labels, eidx = [], [], [], [], [], []
    subjects, covs = [], {}
    for rec in recordings:
        epochs = epoch_split(rec, epoch_sec)
        if not epochs:
            continue
        if rec.label is None:
            raise ValueError(f"recording {rec.subject!r} has no label")
        si = len(subjects)
        subjects.append(rec.subject)
        if rec.covariates:
            covs[rec.subject] = dict(rec.covariates)
        bands_per_epoch = [band_decompose(ep, fs) for ep in epochs]
        if graph_scope == "subject":
            joined = np.concatenate(bands_per_epoch, axis=-1)
            shared = np.stack([build_adjacency(joined[b], density) for b in range(len(BANDS))])
        for e, (ep, fb) in enumerate(zip(epochs, bands_per_epoch)):
            rbp.append(relative_band_power(ep, fs, nperseg=nperseg, overlap=overlap))
            filt.append(fb)
            if graph_scope == "subject":
                adj.append(shared)
            else:
                adj.append(np.stack([build_adjacency(fb[b], density) for b in range(len(BANDS))]))
            sidx.append(si)
            labels.append(int(rec.label))
            eidx.append(e)
    if not rbp:
        raise ValueError("no recording yields a complete epoch")
    return FeatureSet(
        rbp=np.stack(rbp), filtered=np.stack(filt), adjacency=np.stack(adj),
        subject_index=np.array(sidx), labels=np.array(labels), subjects=subjects, fs=fs,
        epoch_index=np.array(eidx), covariates=covs,
        meta={"epoch_sec": epoch_sec, "density": density, "graph_scope": graph_scope},
    )


@dataclass
class GraphBatch:
    filtered: np.ndarray  # (N, K, C, T')
    a_hat: np.ndarray  # (N, K, C, C)
    labels: np.ndarray  # (N,)
    Q: np.ndarray | None = None  # (N, K, C, C)
    logdet: np.ndarray | None = None  # (N, K)

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return GraphBatch(
            self.filtered[idx], self.a_hat[idx], self.labels[idx],
            None if self.Q is None else self.Q[idx],
            None if self.logdet is None else self.logdet[idx],
        )


def make_batch(features, prior=None, add_self_loops=False):
    prior = prior or PriorSpec("none")
    Q = logdet = None
    if prior.enabled:
        Q, logdet = precision_stack(features.adjacency, prior)
    return GraphBatch(
        filtered=features.filtered,
        a_hat=normalized_adjacency(features.adjacency, add_self_loops),
        labels=features.labels.astype(np.float64),
        Q=Q,
        logdet=logdet,
    )
