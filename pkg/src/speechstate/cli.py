"""Command-line pipeline: synth, preprocess, train, evaluate, stream, embed, report.

Every subcommand reads the same flat config (``--config``), applies flag
overrides, and prints ``key=value`` lines on stdout. Logs go to stderr.
Exit status is 0 on success, 1 for invalid input or usage, 2 for failures
while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import (
    MODEL_CHOICES, PipelineConfig, config_hash, load_config, serialize_config, set_value,
)
from .dataio import SynthConfig, generate_synthetic_session, load_session, save_session
from .errors import SpeechStateError, UsageError, ValidationError
from .evaluation import (
    evaluate_model, metrics_csv, metrics_table, read_metrics_csv, stream_replay,
)
from .models import fit_model, load_model, model_input, penultimate_features, save_model
from .preprocess import WindowPipeline, WindowSet, filtered_windows, split
from .tsne import embedding_csv, embedding_svg, perplexity_affinities, subsample, tsne_optimize

log = logging.getLogger("speechstate")

WINDOWS_VERSION = 1


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def emit(key: str, value) -> None:
    if isinstance(value, float):
        value = f"{value:.6g}"
    print(f"{key}={value}", flush=True)


# --- atomic output --------------------------------------------------------------

def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.chmod(tmp, 0o644)
    os.replace(tmp, path)


@contextmanager
def atomic_dir(dest: Path):
    """Build a directory under a temporary name and swap it into place when done."""
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    os.chmod(tmp, 0o755)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if dest.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{dest.name}.old.", dir=dest.parent))
        os.replace(dest, old / "x")
        os.replace(tmp, dest)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, dest)


# --- config plumbing -------------------------------------------------------------

FLAG_KEYS = {
    "mode": "synth.mode", "trials": "synth.trials", "subjects": "synth.subjects",
    "channels": "synth.channels", "snr_db": "synth.snr_db",
    "window_ms": "preprocess.window_ms", "shift_ms": "preprocess.shift_ms",
    "decimation": "preprocess.decimation", "split_level": "split.level", "split_seed": "split.seed",
    "test_fraction": "split.fraction", "scope": "eval.scope", "models": "models",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
    "perplexity": "tsne.perplexity", "iters": "tsne.iters", "max_points": "tsne.max_points",
}


def build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects key=value, got {item!r}")
        set_value(cfg, key.strip(), value)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            set_value(cfg, key, str(value))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "session", None):
        cfg.sessions = tuple(args.session)
    return cfg.validate()


def pipeline_from(cfg: PipelineConfig, fs: float) -> WindowPipeline:
    return WindowPipeline(fs, (cfg.band_low_hz, cfg.band_high_hz), cfg.filter_order, cfg.decimation,
                          cfg.window_ms, cfg.shift_ms)


def session_dirs(cfg: PipelineConfig) -> list[Path]:
    if cfg.sessions:
        return [Path(s) for s in cfg.sessions]
    out = Path(cfg.out)
    found = sorted(p for p in out.glob("subject*") if (p / "manifest.json").is_file())
    if not found:
        raise ValidationError(f"no sessions given and none found under {out}", "paths.sessions")
    return found


# --- windows artifact -------------------------------------------------------------

def save_windows(path: Path, ws: WindowSet, subject: np.ndarray, subjects: list[str], pipe: WindowPipeline,
                 chash: str) -> None:
    with atomic_dir(path) as tmp:
        with open(tmp / "windows.npz", "wb") as fh:
            np.savez(fh, x=ws.x, y=ws.y, groups=ws.groups, onsets_ms=ws.onsets_ms, subject=subject)
        manifest = {"format_version": WINDOWS_VERSION, "config_hash": chash, "pipeline": pipe.to_dict(),
                    "subjects": subjects, "n_windows": len(ws), "n_channels": ws.n_channels,
                    "n_times": ws.n_times, "sampling_rate_hz": ws.sampling_rate_hz,
                    "provenance": ws.provenance}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_windows(path: Path):
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no windows artifact at {path}; run preprocess first", "windows") from exc
    if manifest.get("format_version") != WINDOWS_VERSION:
        raise ValidationError("unsupported windows artifact version", "format_version")
    with np.load(path / "windows.npz") as z:
        ws = WindowSet(z["x"], z["y"], manifest["pipeline"]["window_ms"], manifest["pipeline"]["shift_ms"],
                       manifest["sampling_rate_hz"], z["groups"], z["onsets_ms"], manifest["provenance"])
        subject = z["subject"]
    return ws, subject, manifest


def units(cfg: PipelineConfig, subject: np.ndarray, names: list[str]):
    """(suffix, window indices) per training unit: everything, or one per subject."""
    if cfg.scope == "pooled":
        return [("", np.arange(subject.size))]
    return [(f"@{name}", np.flatnonzero(subject == i)) for i, name in enumerate(names)]


def unit_split(cfg: PipelineConfig, ws: WindowSet, idx: np.ndarray):
    groups = ws.groups[idx] if cfg.split_level == "trial" else None
    sp = split(idx.size, cfg.split_fraction, cfg.split_seed, groups)
    return idx[sp.train_idx], idx[sp.test_idx]


def check_hash(found: str, expected: str, what: str) -> None:
    if found != expected:
        log.warning("%s was written under config hash %s, current config hashes to %s", what, found, expected)


# --- subcommands ---------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, args) -> None:
    out = Path(cfg.out)
    for i in range(cfg.synth_subjects):
        sc = SynthConfig(n_channels=cfg.synth_channels, sampling_rate_hz=cfg.synth_sampling_rate_hz,
                         n_trials_per_class=cfg.synth_trials, mode=cfg.synth_mode, snr_db=cfg.synth_snr_db,
                         seed=cfg.seed + i)
        rec, ev = generate_synthetic_session(sc)
        name = f"subject{i + 1:02d}"
        with atomic_dir(out / name) as tmp:
            save_session(tmp, rec, ev)
        emit(f"session.{name}", out / name)
        emit(f"{name}.n_samples", rec.n_samples)
        emit(f"{name}.n_events", len(ev))
    emit("config_hash", config_hash(cfg))


def cmd_preprocess(cfg: PipelineConfig, args) -> None:
    chash = config_hash(cfg)
    sets, subject, names = [], [], []
    pipe = None
    offset = 0
    for i, d in enumerate(session_dirs(cfg)):
        rec, ev = load_session(d)
        if pipe is None:
            pipe = pipeline_from(cfg, rec.sampling_rate_hz)
        ws = filtered_windows(rec, ev, pipe)
        ws.groups = ws.groups + offset
        offset += len(ev)
        sets.append(ws)
        subject.append(np.full(len(ws), i, dtype=np.int64))
        names.append(d.name)
        emit(f"{d.name}.windows", len(ws))
    first = sets[0]
    if any(s.n_channels != first.n_channels for s in sets):
        raise ValidationError("sessions disagree on channel count", "n_channels")
    ws = WindowSet(np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]), first.window_ms,
                   first.shift_ms, first.sampling_rate_hz, np.concatenate([s.groups for s in sets]),
                   np.concatenate([s.onsets_ms for s in sets]),
                   {**first.provenance, "skipped_intervals": sum(s.provenance["skipped_intervals"] for s in sets)})
    dest = Path(cfg.out) / "windows"
    save_windows(dest, ws, np.concatenate(subject), names, pipe, chash)
    emit("windows", dest)
    emit("n_windows", len(ws))
    emit("n_speech", int(ws.y.sum()))
    emit("n_idle", int(len(ws) - ws.y.sum()))
    emit("config_hash", chash)


def _windows_path(cfg, args) -> Path:
    return Path(args.windows) if getattr(args, "windows", None) else Path(cfg.out) / "windows"


def _history_rows(tag, model):
    if model.history is not None:
        h = model.history
        for e in range(len(h.train_loss)):
            yield [tag, e + 1, repr(h.train_loss[e]), repr(h.train_acc[e]), repr(h.val_acc[e])]
    elif model.kind == "csp-svm":
        for e, obj in enumerate(model.linear.objective_history):
            yield [tag, e + 1, repr(obj), "", ""]


def cmd_train(cfg: PipelineConfig, args) -> None:
    chash = config_hash(cfg)
    ws, subject, manifest = load_windows(_windows_path(cfg, args))
    check_hash(manifest["config_hash"], chash, "windows artifact")
    pipe = WindowPipeline.from_dict(manifest["pipeline"])
    models_dir = Path(cfg.out) / "models"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch", "train_loss", "train_acc", "val_acc"])
    for suffix, idx in units(cfg, subject, manifest["subjects"]):
        tr, te = unit_split(cfg, ws, idx)
        for kind in cfg.models:
            tag = kind + suffix
            model = fit_model(kind, ws.subset(tr), ws.subset(te), pipeline=pipe, weighted=cfg.class_weighting,
                              seed=cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                              m_pairs=cfg.m_pairs, shrinkage=cfg.lda_shrinkage, svm_lambda=cfg.svm_lambda,
                              svm_epochs=cfg.svm_epochs, config_hash=chash)
            model.meta["tag"] = tag
            with atomic_dir(models_dir / tag) as tmp:
                save_model(tmp, model)
            w.writerows(_history_rows(tag, model))
            emit(f"model.{tag}", models_dir / tag)
            if model.history is not None and model.history.train_acc:
                emit(f"{tag}.train_acc", model.history.train_acc[-1])
                emit(f"{tag}.seconds", model.history.seconds)
    write_text(models_dir / "history.csv", f"# config_hash={chash}\n" + buf.getvalue())
    emit("history", models_dir / "history.csv")
    emit("config_hash", chash)


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    chash = config_hash(cfg)
    ws, subject, manifest = load_windows(_windows_path(cfg, args))
    models_dir = Path(args.models_dir) if args.models_dir else Path(cfg.out) / "models"
    reports = []
    for suffix, idx in units(cfg, subject, manifest["subjects"]):
        _, te = unit_split(cfg, ws, idx)
        test = ws.subset(te)
        for kind in cfg.models:
            tag = kind + suffix
            model = load_model(models_dir / tag)
            check_hash(model.config_hash, chash, f"model {tag}")
            rep = evaluate_model(model, test, name=tag, scope=cfg.scope)
            reports.append(rep)
            emit(f"{tag}.accuracy", rep.accuracy)
            emit(f"{tag}.f1", rep.f1)
    out = Path(cfg.out)
    write_text(out / "metrics.csv", metrics_csv(reports, chash, cfg.scope))
    write_text(out / "metrics.txt", metrics_table(reports))
    emit("metrics", out / "metrics.csv")
    emit("table", out / "metrics.txt")
    emit("config_hash", chash)


def _default_model(cfg) -> Path:
    deep = [m for m in cfg.models if m in MODEL_CHOICES[2:]]
    return Path(cfg.out) / "models" / (deep[0] if deep else cfg.models[0])


def cmd_stream(cfg: PipelineConfig, args) -> None:
    model_dir = Path(args.model) if args.model else _default_model(cfg)
    model = load_model(model_dir)
    session = session_dirs(cfg)[0]
    rec, ev = load_session(session)
    tl = stream_replay(model, rec, ev, cfg.window_ms, cfg.shift_ms)
    dest = Path(cfg.out) / "stream" / f"{model_dir.name}.csv"
    write_text(dest, tl.to_csv())
    labelled = tl.true_labels >= 0
    emit("timeline", dest)
    emit("decisions", tl.n_decisions)
    emit("mean_compute_ms", tl.mean_compute_ms)
    emit("real_time_factor", tl.real_time_factor)
    emit("decisions_per_second", tl.decisions_per_second)
    if labelled.any():
        emit("labelled_accuracy", float(np.mean(tl.labels[labelled] == tl.true_labels[labelled])))


def cmd_embed(cfg: PipelineConfig, args) -> None:
    model_dir = Path(args.model) if args.model else Path(cfg.out) / "models" / cfg.tsne_model
    model = load_model(model_dir)
    ws, subject, _ = load_windows(_windows_path(cfg, args))
    _, te = unit_split(cfg, ws, np.arange(len(ws)))
    keep = te[subsample(te.size, cfg.tsne_max_points, cfg.seed)]
    part = ws.subset(keep)
    x_in = model_input(model, part)
    panels = {"input": x_in.reshape(len(part), -1), "features": penultimate_features(model, part)}
    out = Path(cfg.out) / "embed"
    for name, feats in panels.items():
        perp = min(cfg.tsne_perplexity, (len(part) - 1) / 3.0)
        res = tsne_optimize(perplexity_affinities(feats, perp, seed=cfg.seed), iters=cfg.tsne_iters, seed=cfg.seed)
        write_text(out / f"{name}.csv", embedding_csv(res.Y, part.y))
        write_text(out / f"{name}.svg", embedding_svg(res.Y, part.y, f"{model.kind}: {name}"))
        emit(f"{name}.csv", out / f"{name}.csv")
        emit(f"{name}.svg", out / f"{name}.svg")
        emit(f"{name}.kl", res.kl)
    emit("points", len(part))


def cmd_report(cfg: PipelineConfig, args) -> None:
    inputs = [Path(p) for p in args.inputs] if args.inputs else [Path(cfg.out) / "metrics.csv"]
    hashes, scopes, rows = [], [], []
    for p in inputs:
        try:
            header, body = read_metrics_csv(p.read_text())
        except FileNotFoundError as exc:
            raise ValidationError(f"metrics file {p} not found", "inputs") from exc
        hashes.append(header.get("config_hash", ""))
        scopes.append(header.get("scope", "pooled"))
        rows.extend(body)
    if len(set(hashes)) > 1:
        if not args.force:
            raise ValidationError(f"metrics files carry different config hashes {sorted(set(hashes))}; "
                                  "use --force to merge anyway", "config_hash")
        log.warning("merging metrics from different configs: %s", sorted(set(hashes)))
    chash = "+".join(sorted(set(hashes)))
    scope = scopes[0] if len(set(scopes)) == 1 else "pooled"
    rows.sort(key=lambda r: -r["accuracy"])
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n# scope={scope}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", *rows[0].keys()] if rows else ["rank"])
    for i, r in enumerate(rows, start=1):
        w.writerow([i, *(f"{v:.6f}" if isinstance(v, float) else v for v in r.values())])
    out = Path(cfg.out)
    write_text(out / "report.csv", buf.getvalue())
    write_text(out / "report.txt", metrics_table(rows))
    for i, r in enumerate(rows, start=1):
        emit(f"rank.{i}", r["model"])
        emit(f"{r['model']}.accuracy", r["accuracy"])
    emit("report", out / "report.csv")


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
    "stream": cmd_stream, "embed": cmd_embed, "report": cmd_report,
}


def make_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = ArgumentParser(prog="speechstate", description="imagined-speech vs idle EEG pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="write synthetic sessions")
    p.add_argument("--mode", choices=("bandpower", "waveshape"))
    p.add_argument("--trials", type=int, help="trials per class")
    p.add_argument("--subjects", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--snr-db", dest="snr_db", type=float)

    p = sub.add_parser("preprocess", parents=[common], help="filter and window sessions")
    p.add_argument("--session", action="append", help="session directory (repeatable)")
    p.add_argument("--window-ms", dest="window_ms", type=float)
    p.add_argument("--shift-ms", dest="shift_ms", type=float)
    p.add_argument("--decimation", type=int)

    def split_flags(q):
        q.add_argument("--windows", help="windows artifact directory")
        q.add_argument("--split-level", dest="split_level", choices=("window", "trial"))
        q.add_argument("--split-seed", dest="split_seed", type=int)
        q.add_argument("--test-fraction", dest="test_fraction", type=float)
        q.add_argument("--scope", choices=("pooled", "per-subject"))
        q.add_argument("--models", help="comma-separated subset of " + ",".join(MODEL_CHOICES))

    p = sub.add_parser("train", parents=[common], help="fit the configured models")
    split_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="score models on the test split")
    split_flags(p)
    p.add_argument("--models-dir", dest="models_dir")

    p = sub.add_parser("stream", parents=[common], help="replay a session hop by hop")
    p.add_argument("--model", help="model artifact directory")
    p.add_argument("--session", action="append")

    p = sub.add_parser("embed", parents=[common], help="t-SNE of inputs and penultimate features")
    split_flags(p)
    p.add_argument("--model", help="deep model artifact directory")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--max-points", dest="max_points", type=int)

    p = sub.add_parser("report", parents=[common], help="merge metrics files into one ranking")
    p.add_argument("--inputs", nargs="+", help="metrics CSV files")
    p.add_argument("--force", action="store_true", help="merge even if config hashes differ")
    return parser


def run_command(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("speechstate").setLevel(level)
    try:
        cfg = build_config(args)
        log.info("config:\n%s", serialize_config(cfg))
        COMMANDS[args.command](cfg, args)
    except SpeechStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, (ValueError, TypeError)) else 2
    except Exception as exc:  # anything else is a runtime failure
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
