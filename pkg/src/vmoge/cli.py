"""Command-line entry point: ``python -m vmoge <subcommand>``.

Exit status 0 on success, 1 on invalid input, 2 on numerical failure.
"""
import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import checks
from .config import ConfigError, RunConfig, load_config, parse_value
from .container import ContainerError, read_container, write_container
from .data import featurize_recordings, make_batch
from .mgtnfe import GRANULARITIES
from .model import VMoGE
from .spectral import BAND_NAMES, RawRecording
from .synthgen import SynthConfig, generate_dataset
from .trainer import (
    GatingRecord, accuracy, auc, cross_validate, gating_report, worker_count,
)

log = logging.getLogger("vmoge")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
SWEEP_VALUES = (0.1, 0.2, 0.6, 0.8, 1.0)
PRIOR_CHOICES = ("none", "l-shift", "lnorm-shift", "pure")
KL_TOL = 0.01
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- raw CSV -------------------------------------------------------------


def write_raw_csv(path, rec):
    fields = {"fs": repr(float(rec.fs)), "subject": rec.subject}
    if rec.label is not None:
        fields["label"] = str(int(rec.label))
    for k, v in sorted(rec.covariates.items()):
        fields[k] = repr(float(v))
    header = ",".join(f"{k}={v}" for k, v in fields.items())
    np.savetxt(path, rec.data, delimiter=",", fmt="%.17g", header=header, comments="# ")


def read_raw_csv(path, fs=None):
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    meta = {}
    if first.startswith("#"):
        for item in first[1:].strip().split(","):
            if "=" in item:
                k, v = item.split("=", 1)
                meta[k.strip()] = v.strip()
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    rate = fs if fs is not None else meta.get("fs")
    if rate is None:
        raise ValueError(f"{path}: no fs in header and no --fs given")
    label = int(meta["label"]) if "label" in meta else None
    cov = {k: float(meta[k]) for k in ("age", "score") if k in meta}
    return RawRecording(data, float(rate), meta.get("subject", path.stem), label, cov)


# -- run directory -------------------------------------------------------


def _num(v):
    return "" if v is None else repr(float(v))


def write_gating_csv(path, records):
    with open(path, "w") as fh:
        fh.write("subject,epoch,label," + ",".join(f"pi_{b}" for b in BAND_NAMES)
                 + ",p_hat,age,score\n")
        for r in records:
            pis = ",".join(repr(float(p)) for p in r.pi)
            fh.write(f"{r.subject},{r.epoch},{r.label},{pis},{repr(float(r.p_hat))},"
                     f"{_num(r.age)},{_num(r.score)}\n")


def read_gating_csv(path):
    import csv

    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.append(GatingRecord(
                row["subject"], int(row["epoch"]), int(row["label"]),
                np.array([float(row[f"pi_{b}"]) for b in BAND_NAMES]), float(row["p_hat"]),
                float(row["age"]) if row["age"] else None,
                float(row["score"]) if row["score"] else None,
            ))
    return out


def write_attribution_csv(path, att):
    with open(path, "w") as fh:
        fh.write("band,channel,value\n")
        for k, band in enumerate(BAND_NAMES):
            for c in range(att.shape[1]):
                fh.write(f"{band},{c},{repr(float(att[k, c]))}\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_run(run_dir, cfg, cv):
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.to_text())
    write_json(run / "metrics.json", cv.metrics())
    write_gating_csv(run / "gating.csv", cv.records)
    write_attribution_csv(run / "channel_attribution.csv", cv.attribution())
    with open(run / "trace.jsonl", "w") as fh:
        for f in cv.folds:
            for rec in f.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for k, state in enumerate(cv.states):
        np.savez(run / f"params_fold{k}.npz", **state)


# -- config resolution ---------------------------------------------------

# flag dest -> RunConfig key
_FLAG_KEYS = {
    "prior": "prior", "lambda_kl": "lambda_kl", "lambda_shift": "lambda_shift",
    "granularity": "granularity", "mixture": "mixture", "folds": "folds", "seed": "seed",
    "epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "workers": "workers",
    "gate_warmup": "gate_warmup", "eval_samples": "eval_samples",
}


def _add_train_flags(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--prior", choices=PRIOR_CHOICES)
    p.add_argument("--lambda-kl", type=float)
    p.add_argument("--lambda-shift", type=float)
    p.add_argument("--granularity", choices=sorted(GRANULARITIES))
    p.add_argument("--mixture", choices=("prob", "logit"))
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--gate-warmup", type=int)
    p.add_argument("--eval-samples", type=int)
    p.add_argument("--workers", type=int, help="fold processes (default: VMOGE_THREADS, 0 = auto)")
    p.add_argument("--paper-kl-sign", action="store_true", default=None,
                   help="use +log|Q| in the KL as printed in the original formula")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def resolve_config(args):
    values = {}
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    if getattr(args, "paper_kl_sign", None):
        values["paper_kl_sign"] = True
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().replace("-", "_")
        values[k] = parse_value(k, v)
    base = load_config(args.config) if args.config else RunConfig()
    return base.replace(**values)


def _workers(cfg):
    return cfg.workers if cfg.workers > 0 else worker_count()


# -- subcommands ---------------------------------------------------------


def cmd_synth(args):
    tc = tuple(int(c) for c in args.target_channels.split(",") if c.strip())
    cfg = SynthConfig(subjects_per_class=args.subjects_per_class, fs=args.fs, duration=args.duration,
                      channels=args.channels, target_band=args.target_band, target_channels=tc,
                      effect_size=args.effect_size, noise_amplitude=args.noise, seed=args.seed,
                      covariates=not args.no_covariates)
    recs, manifest = generate_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in recs:
        write_raw_csv(out / f"{r.subject}.csv", r)
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(recs)} recordings to {out}")
    return EXIT_OK


def cmd_featurize(args):
    src = Path(args.input)
    files = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    if not files:
        raise ValueError(f"no CSV recordings under {src}")
    recs = [read_raw_csv(f, args.fs) for f in files]
    if args.fs is not None:
        for r in recs:
            r.fs = float(args.fs)
    fs = featurize_recordings(recs, epoch_sec=args.epoch_sec, density=args.density,
                              graph_scope=args.graph_scope, nperseg=args.nperseg,
                              overlap=args.overlap)
    write_container(args.out, fs)
    print(f"{len(fs)} epochs from {len(fs.subjects)} subjects -> {args.out}")
    return EXIT_OK


def _summary_line(m):
    a = m["aggregate"]
    s = f"subject AUC {a['auc']['mean']:.3f} +/- {a['auc']['std']:.3f}" if a["auc"]["mean"] is not None else "subject AUC n/a"
    g = " ".join(f"{b}={v:.3f}" for b, v in m["gating_mean"].items())
    return f"{s}; epoch AUC {a['epoch_auc']['mean']}; mean gate {g}"


def cmd_train(args):
    cfg = resolve_config(args)
    fs = read_container(args.data)
    t0 = time.perf_counter()
    cv = cross_validate(fs, cfg.train_config(), workers=_workers(cfg))
    write_run(args.run, cfg, cv)
    m = cv.metrics()
    print(_summary_line(m))
    log.info("train finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def load_run(run_dir):
    run = Path(run_dir)
    cfg = load_config(run / "config.txt")
    states = []
    k = 0
    while (run / f"params_fold{k}.npz").exists():
        with np.load(run / f"params_fold{k}.npz") as f:
            states.append({n: f[n] for n in f.files})
        k += 1
    if not states:
        raise ValueError(f"{run} has no params_fold*.npz")
    return cfg, states


def evaluate_run(run_dir, features, samples=None, seed=0):
    """Average the fold models' predictions on ``features``."""
    cfg, states = load_run(run_dir)
    tc = cfg.train_config()
    batch = make_batch(features, tc.prior_spec, tc.add_self_loops)
    p_hat = np.zeros(len(features))
    pi = np.zeros((len(features), 4))
    for k, state in enumerate(states):
        model = VMoGE(tc.model_config(), features.fs, seed=0)
        model.store.load_state_dict(state)
        out, _ = model.predict(batch, samples=samples or tc.eval_samples,
                               rng=np.random.default_rng(np.random.SeedSequence([seed, k])))
        p_hat += out.p_hat / len(states)
        pi += out.pi / len(states)
    y = features.labels
    subj = sorted(set(features.subject_index.tolist()))
    s_score = np.array([p_hat[features.subject_index == s].mean() for s in subj])
    s_label = np.array([y[features.subject_index == s][0] for s in subj])
    return {
        "n_epochs": int(len(features)), "n_subjects": len(subj), "n_models": len(states),
        "auc": auc(s_score, s_label), "acc": accuracy(s_score, s_label),
        "epoch_auc": auc(p_hat, y), "epoch_acc": accuracy(p_hat, y),
        "gating_mean": dict(zip(BAND_NAMES, pi.mean(axis=0).tolist())),
    }


def cmd_eval(args):
    fs = read_container(args.data)
    res = evaluate_run(args.run, fs, args.samples, args.seed)
    out = Path(args.out) if args.out else Path(args.run) / "eval_metrics.json"
    write_json(out, res)
    print(json.dumps(res, sort_keys=True, indent=2))
    return EXIT_OK


def _table(rows, cols):
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines)


def cmd_report(args):
    run = Path(args.run)
    records = read_gating_csv(run / "gating.csv")
    att = None
    if (run / "channel_attribution.csv").exists():
        rows = np.genfromtxt(run / "channel_attribution.csv", delimiter=",", names=True, dtype=None,
                             encoding=None)
        C = int(rows["channel"].max()) + 1
        att = np.zeros((len(BAND_NAMES), C))
        for r in np.atleast_1d(rows):
            att[BAND_NAMES.index(r["band"]), int(r["channel"])] = r["value"]
    rep = gating_report(records, att)
    write_json(run / "report.json", rep)
    print("gating weights by class (quartiles)")
    print(_table(rep["quartiles"], ["label", "band", "mean", "q1", "median", "q3", "iqr"]))
    if rep["class_contrast"]:
        print("\nclass contrast (mean pi, label 1 minus label 0)")
        print("\t".join(f"{b}={v:+.4f}" for b, v in rep["class_contrast"].items()))
    if rep["correlations"]:
        print("\ncorrelation of gating weight with covariates")
        print(_table(rep["correlations"], ["band", "covariate", "r", "p"]))
    if att is not None:
        print("\nchannel attribution pi_k * ||mu_c|| (max-normalized per band)")
        for k, band in enumerate(BAND_NAMES):
            top = np.argsort(-att[k])[: args.top]
            print(f"{band}\t" + " ".join(f"ch{c}:{att[k, c]:.3f}" for c in top))
    return EXIT_OK


def sweep(features, base, values=SWEEP_VALUES, which="kl", workers=1, progress=None):
    """AUC grid over prior variants x lambda values. Returns list of row dicts."""
    key = {"kl": "lambda_kl", "shift": "lambda_shift"}[which]
    rows = []
    for prior in PRIOR_CHOICES:
        cached = None
        for lam in values:
            cfg = base.replace(prior=prior, **{key: lam})
            if prior == "none" and cached is not None:
                agg = cached
            else:
                t0 = time.perf_counter()
                agg = cross_validate(features, cfg.train_config(), workers=workers).aggregate()
                if progress:
                    progress(prior, lam, agg, time.perf_counter() - t0)
                if prior == "none":
                    cached = agg
            rows.append({"prior": prior, "lambda": lam,
                         "auc_mean": agg["auc"]["mean"], "auc_std": agg["auc"]["std"],
                         "epoch_auc_mean": agg["epoch_auc"]["mean"],
                         "epoch_auc_std": agg["epoch_auc"]["std"],
                         "acc_mean": agg["acc"]["mean"]})
    return rows


def sweep_margin(rows, metric="auc_mean"):
    """Largest |GMRF - no prior| gap at equal lambda."""
    base = {r["lambda"]: r[metric] for r in rows if r["prior"] == "none"}
    gaps = [abs(r[metric] - base[r["lambda"]]) for r in rows
            if r["prior"] != "none" and r[metric] is not None and base.get(r["lambda"]) is not None]
    return max(gaps) if gaps else None


def cmd_sweep(args):
    cfg = resolve_config(args)
    fs = read_container(args.data)
    values = tuple(float(v) for v in args.values.split(","))

    def progress(prior, lam, agg, dt):
        print(f"{prior:12s} lambda={lam:<4} AUC {agg['auc']['mean']:.3f} ({dt:.0f} s)", flush=True)

    rows = sweep(fs, cfg, values, args.which, _workers(cfg), progress)
    cols = ["prior", "lambda", "auc_mean", "auc_std", "epoch_auc_mean", "epoch_auc_std", "acc_mean"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_num(r[c]) if c not in ("prior",) else r[c] for c in cols) + "\n")
    summary = {"which": args.which, "values": list(values),
               "margin_auc": sweep_margin(rows, "auc_mean"),
               "margin_epoch_auc": sweep_margin(rows, "epoch_auc_mean")}
    write_json(out.with_suffix(".summary.json"), summary)
    print(f"grid {len(PRIOR_CHOICES)} x {len(values)} -> {out}; no-prior margin "
          f"{summary['margin_auc']} (epoch level {summary['margin_epoch_auc']})")
    return EXIT_OK


def cmd_kl_check(args):
    res = checks.kl_check(args.trials, args.samples, args.seed)
    print(f"max relative error {res['max_err']:.6f} over {args.trials} trials "
          f"(min KL {res['min_kl']:.6g})")
    if res["max_err"] >= KL_TOL or res["min_kl"] < -1e-9:
        print("kl-check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args):
    err = checks.tiny_gradcheck(args.seed, args.eps)
    print(f"max relative error {err:.3e}")
    if not err < GRAD_TOL:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser():
    p = Parser(prog="vmoge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="write synthetic raw CSV recordings")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects-per-class", type=int, default=20)
    s.add_argument("--fs", type=float, default=128.0)
    s.add_argument("--duration", type=float, default=8.0)
    s.add_argument("--channels", type=int, default=19)
    s.add_argument("--target-band", choices=BAND_NAMES, default="alpha")
    s.add_argument("--target-channels", default="0,1,2,3,4,5")
    s.add_argument("--effect-size", type=float, default=2.5)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-covariates", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", help="raw CSVs -> feature container")
    s.add_argument("--input", required=True, help="CSV file or directory of CSVs")
    s.add_argument("--out", required=True)
    s.add_argument("--fs", type=float, help="sampling rate (overrides CSV headers)")
    s.add_argument("--epoch-sec", type=float, default=4.0)
    s.add_argument("--density", type=float, default=0.3)
    s.add_argument("--graph-scope", choices=("epoch", "subject"), default="epoch")
    s.add_argument("--nperseg", type=int)
    s.add_argument("--overlap", type=float, default=0.5)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="cross-validated training into a run directory")
    s.add_argument("--data", required=True)
    s.add_argument("--run", default="run")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a trained run on a container")
    s.add_argument("--run", default="run")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="gating, attribution and correlation tables")
    s.add_argument("--run", default="run")
    s.add_argument("--top", type=int, default=6)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep-lambda", help="AUC grid over prior variants x lambda")
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="sweep.csv")
    s.add_argument("--values", default=",".join(str(v) for v in SWEEP_VALUES))
    s.add_argument("--which", choices=("kl", "shift"), default="kl",
                   help="sweep the KL weight or the precision shift")
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("kl-check", help="closed-form KL vs Monte Carlo")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_kl_check)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ConfigError, ContainerError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
