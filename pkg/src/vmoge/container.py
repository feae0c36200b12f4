"""Binary feature container.

Layout, all little-endian:

    b"VMGE"  u32 version
    u32 subjects, epochs, B, C, d_rbp, T'
    per epoch: u32 subject index, u8 label,
               f8 rbp[B, C], f8 filtered[B, C, T'], f8 adjacency[B, C, C]
    u32 manifest length, manifest JSON (utf-8)

The manifest carries subject ids, fs, epoch indices, covariates and the
featurization settings.
"""
import json
import struct

import numpy as np

from .data import FeatureSet

MAGIC = b"VMGE"
VERSION = 1
_HEAD = struct.Struct("<4sI6I")


class ContainerError(ValueError):
    pass


def _epoch_dtype(B, C, T):
    return np.dtype([
        ("subject", "<u4"), ("label", "u1"),
        ("rbp", "<f8", (B, C)),
        ("filtered", "<f8", (B, C, T)),
        ("adjacency", "<f8", (B, C, C)),
    ])


def to_bytes(fs):
    N, B, C, T = fs.filtered.shape
    dt = _epoch_dtype(B, C, T)
    rec = np.zeros(N, dtype=dt)
    rec["subject"] = fs.subject_index
    rec["label"] = fs.labels
    rec["rbp"] = fs.rbp
    rec["filtered"] = fs.filtered
    rec["adjacency"] = fs.adjacency
    manifest = {
        "subjects": list(fs.subjects),
        "fs": float(fs.fs),
        "epoch_index": fs.epoch_index.tolist(),
        "covariates": fs.covariates,
        "meta": fs.meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    head = _HEAD.pack(MAGIC, VERSION, len(fs.subjects), N, B, C, 1, T)
    return b"".join([head, rec.tobytes(), struct.pack("<I", len(mbytes)), mbytes])


def from_bytes(buf):
    if len(buf) < _HEAD.size:
        raise ContainerError(f"container truncated: {len(buf)} bytes, header needs {_HEAD.size}")
    magic, version, S, N, B, C, d_rbp, T = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (reader handles {VERSION})")
    if d_rbp != 1:
        raise ContainerError(f"rbp feature width {d_rbp} unsupported")
    dt = _epoch_dtype(B, C, T)
    end = _HEAD.size + N * dt.itemsize
    if len(buf) < end + 4:
        raise ContainerError(f"payload length {len(buf)} inconsistent with header counts "
                             f"(epochs={N}, B={B}, C={C}, T'={T})")
    rec = np.frombuffer(buf, dtype=dt, count=N, offset=_HEAD.size)
    (mlen,) = struct.unpack_from("<I", buf, end)
    if len(buf) != end + 4 + mlen:
        raise ContainerError(f"manifest length {mlen} inconsistent with file size {len(buf)}")
    manifest = json.loads(bytes(buf[end + 4:]).decode())
    if len(manifest["subjects"]) != S:
        raise ContainerError(f"manifest lists {len(manifest['subjects'])} subjects, header says {S}")
    sidx = rec["subject"].astype(np.int64)
    if N and sidx.max() >= S:
        raise ContainerError("epoch subject index out of range")
    return FeatureSet(
        rbp=rec["rbp"].astype(np.float64),
        filtered=rec["filtered"].astype(np.float64),
        adjacency=rec["adjacency"].astype(np.float64),
        subject_index=sidx,
        labels=rec["label"].astype(np.int64),
        subjects=manifest["subjects"],
        fs=manifest["fs"],
        epoch_index=np.asarray(manifest["epoch_index"], dtype=np.int64),
        covariates=manifest.get("covariates", {}),
        meta=manifest.get("meta", {}),
    )


def write_container(path, fs):
    with open(path, "wb") as fh:
        fh.write(to_bytes(fs))


def read_container(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
