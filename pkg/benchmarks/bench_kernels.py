"""Compiled vs numpy kernels, plus one full training step under each backend.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow one mini-batch of the acceptance configuration
(16 epochs x 4 bands x 19 channels sequences, 17 tokens, width 8).
"""
import argparse
import subprocess
import sys
import timeit

import numpy as np

from vmoge import _kernels_py

try:
    from vmoge import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng, M=1216, T=256, k=13, D=8, L=17, heads=2):
    x = rng.standard_normal((M, T))
    w = rng.standard_normal((D, k))
    b = rng.standard_normal(D)
    s = 7
    conv = _kernels_py.conv1d_forward(x, w, b, s)
    gconv = rng.standard_normal(conv.shape)
    pooled, idx = _kernels_py.maxpool2_forward(conv)
    gpool = rng.standard_normal(pooled.shape)
    h = rng.standard_normal((M, L, D))
    gain, bias = rng.standard_normal(D), rng.standard_normal(D)
    _, xhat, rstd = _kernels_py.layernorm_forward(h, gain, bias, 1e-5)
    q, kk, v = (rng.standard_normal((M, L, D)) for _ in range(3))
    _, p = _kernels_py.mha_forward(q, kk, v, heads)
    return {
        "conv1d_forward": lambda m: m.conv1d_forward(x, w, b, s),
        "conv1d_backward": lambda m: m.conv1d_backward(gconv, x, w, s, True),
        "maxpool2_forward": lambda m: m.maxpool2_forward(conv),
        "maxpool2_backward": lambda m: m.maxpool2_backward(gpool, idx, conv.shape[1]),
        "layernorm_forward": lambda m: m.layernorm_forward(h, gain, bias, 1e-5),
        "layernorm_backward": lambda m: m.layernorm_backward(h, xhat, rstd, gain),
        "mha_forward": lambda m: m.mha_forward(q, kk, v, heads),
        "mha_backward": lambda m: m.mha_backward(h, q, kk, v, p, heads),
    }


STEP = """
import numpy as np, time, warnings
warnings.simplefilter("ignore")
from vmoge import kernels
from vmoge.synthgen import SynthConfig, generate_dataset
from vmoge.data import featurize_recordings, make_batch
from vmoge.trainer import TrainConfig
from vmoge.model import VMoGE
recs, _ = generate_dataset(SynthConfig(seed=1, subjects_per_class=4))
fs = featurize_recordings(recs, epoch_sec=2.0)
cfg = TrainConfig(granularity="single-coarse", d_token=8, layers=1, d_h=8, d_g=8, d_z=4)
m = VMoGE(cfg.model_config(), fs.fs, 0)
b = make_batch(fs, cfg.prior_spec).take(np.arange(16))
rng = np.random.default_rng(0)
best = 1e9
for _ in range({n}):
    t = time.perf_counter()
    m.store.zero_grad()
    root, _ = m.loss(b, 0.6, rng=rng)
    root.backward()
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def step_time(backend, n):
    out = subprocess.run([sys.executable, "-c", STEP.format(n=n)], capture_output=True, text=True,
                         env={**__import__("os").environ, "VMOGE_KERNELS": backend}, check=True)
    name, t = out.stdout.split()
    return name, float(t)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:22s} {tp:10.2f} {tc:10.2f} {tp / tc:8.2f}")
    print()
    for backend in ("python", "c"):
        name, t = step_time(backend, 5)
        print(f"training step (forward + backward), {name:6s} backend: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
