"""Command-line entry point: ``sstg <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Every command writes a ``<output>.manifest.json`` run manifest next to its
primary output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("sstg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unreadable / malformed inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def file_digest(path) -> str | None:
    path = Path(path)
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for child in sorted(p.rglob("*")):
                if child.is_file() and not child.name.endswith(".manifest.json"):
                    out[str(child)] = file_digest(child)
        elif p.is_file():
            out[str(p)] = file_digest(p)
            side = p.with_name(p.name + ".json")
            if side.is_file():
                out[str(side)] = file_digest(side)
    return out


def write_manifest(target, command, argv, config, seeds, inputs, outputs, started):
    """RunManifest: command, resolved config, seeds, input/output digests, version, wall time."""
    target = Path(target)
    manifest_path = (target / "manifest.json") if target.is_dir() else target.with_name(target.name + ".manifest.json")
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _require_file(path, what="input"):
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")


def _ablations(text):
    from .network import ABLATIONS
    flags = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [f for f in flags if f not in ABLATIONS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown ablation {unknown}; choose from {', '.join(ABLATIONS)}")
    return flags


def _override(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sstg", description="Vibrotactile perceptual-importance graph network toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("preprocess", help="raw VTRX recording -> VTXF wavelet-packet tensors")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cutoff-hz", type=float, default=10.0)
    s.add_argument("--wavelet", default="db4")
    s.add_argument("--depth", type=int, default=4)

    s = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    s.add_argument("--nodes", type=int, default=24)
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.add_argument("--layout", help="node layout CSV (id,x,y); defaults to the bundled hand layout")
    s.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="synth.KEY=VALUE", help="override a synthetic-data config value")

    s = sub.add_parser("train", help="train a model on a labelled VTXF dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--ablate", type=_ablations)
    s.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="SECTION.KEY=VALUE", help="override any config value")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a labelled dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--threshold", type=float)

    s = sub.add_parser("export-embeddings", help="write per-node embeddings as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args, argv, started):
    from .preprocess import preprocess_recording, read_vtrx, write_vtxf

    _require_file(args.input)
    rec = read_vtrx(args.input)
    coeffs, scales, degenerate = preprocess_recording(rec, args.cutoff_hz, args.wavelet, args.depth)
    meta = {
        "wavelet": args.wavelet,
        "depth": args.depth,
        "cutoff_hz": args.cutoff_hz,
        "sample_rate_hz": rec.sample_rate_hz,
        "band_order": "natural",
        "normalization_scales": [float(s) for s in scales],
        "degenerate_segments": [int(i) for i in np.flatnonzero(degenerate)],
    }
    write_vtxf(args.out, coeffs, meta=meta)
    print(f"wrote {coeffs.shape[0]} segments of shape {coeffs.shape[1:]} to {args.out}")
    config = {k: meta[k] for k in ("wavelet", "depth", "cutoff_hz")}
    write_manifest(args.out, "preprocess", argv, config, {}, [args.input], [args.out], started)


def cmd_synth(args, argv, started):
    from dataclasses import asdict

    from .config import RunConfig, apply_overrides
    from .graph import build_graph, default_graph, load_layout
    from .synthdata import generate_dataset, save_dataset

    cfg = RunConfig()
    cfg.synth.node_count, cfg.synth.sample_count, cfg.synth.seed = args.nodes, args.samples, args.seed
    bad = [k for k, _ in args.overrides if not k.startswith("synth.")]
    if bad:
        raise UsageError(f"synth only accepts synth.* overrides, got {bad}")
    apply_overrides(cfg, args.overrides)
    if args.layout:
        _require_file(args.layout, "layout")
        g = build_graph(load_layout(args.layout), "knn", 4)
    else:
        g = default_graph(cfg.synth.node_count)
    ds, report = generate_dataset(cfg.synth, g)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples, positive rate {report['positive_rate']:.4f}, to {args.out}")
    inputs = [args.layout] if args.layout else []
    write_manifest(args.out, "synth", argv, asdict(cfg.synth), {"synth": cfg.synth.seed},
                   inputs, [args.out], started)


def _resolve_train_config(args):
    from .config import RunConfig, apply_overrides, load_config

    if args.config:
        _require_file(args.config, "config")
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.ablate is not None:
        cfg.train.ablate = args.ablate
    return cfg.validate()


def cmd_train(args, argv, started):
    from .config import dump_config
    from .synthdata import load_dataset
    from .training import train

    _require_file(args.data, "data")
    cfg = _resolve_train_config(args)
    ds = load_dataset(args.data)
    m = cfg.model
    if ds.x.shape[1:] != (m.n_nodes, m.n_bands, m.n_steps):
        raise UsageError(f"data shape {ds.x.shape[1:]} does not match model "
                         f"({m.n_nodes}, {m.n_bands}, {m.n_steps})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    result = train(ds, cfg, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs; best val_acc {result.best_val_acc:.4f} "
          f"at epoch {result.best_epoch}; last val_acc {last.get('val_acc', float('nan')):.4f}")
    if result.test_report is not None:
        r = result.test_report
        print(f"test accuracy {r.accuracy:.4f} auc {r.auc:.4f} f1 {r.f1:.4f}")
    write_manifest(out, "train", argv, dump_config(cfg), {"train": cfg.train.seed},
                   [args.data] + ([args.config] if args.config else []), [out], started)


def _load_model_and_data(args):
    from .synthdata import load_dataset
    from .training import load_checkpoint

    _require_file(args.model, "model")
    _require_file(args.data, "data")
    state = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    m = state.config.model
    if ds.x.shape[1:] != (m.n_nodes, m.n_bands, m.n_steps):
        raise UsageError(f"data shape {ds.x.shape[1:]} does not match checkpoint "
                         f"({m.n_nodes}, {m.n_bands}, {m.n_steps})")
    return state, ds


def cmd_eval(args, argv, started):
    from .config import dump_config
    from .evalkit import write_confusion_csv, write_roc_csv
    from .training import evaluate

    state, ds = _load_model_and_data(args)
    threshold = state.config.train.threshold if args.threshold is None else args.threshold
    report = evaluate(state.model, ds.x, ds.y, threshold, state.config.train.eval_batch_size)
    rpath = Path(args.report)
    rpath.parent.mkdir(parents=True, exist_ok=True)
    rpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    roc = rpath.with_name(rpath.stem + "_roc.csv")
    conf = rpath.with_name(rpath.stem + "_confusion.csv")
    write_roc_csv(roc, report.roc_points)
    write_confusion_csv(conf, report.confusion)
    auc = f"{report.auc:.4f}" if report.auc_defined else "undefined"
    print(f"accuracy {report.accuracy:.4f} auc {auc} f1 {report.f1:.4f}")
    write_manifest(rpath, "eval", argv, dump_config(state.config), {"train": state.config.train.seed},
                   [args.model, args.data], [rpath, roc, conf], started)


def cmd_export(args, argv, started):
    from .config import dump_config
    from .evalkit import export_embeddings

    state, ds = _load_model_and_data(args)
    out = export_embeddings(state.model, ds.x, ds.y, args.out)
    print(f"wrote embeddings for {len(ds)} samples to {out}")
    write_manifest(out, "export-embeddings", argv, dump_config(state.config),
                   {"train": state.config.train.seed}, [args.model, args.data], [out], started)


def cmd_selftest(args, argv, started):
    from .selftest import run_selftest

    failures = run_selftest(seed=args.seed, stream=sys.stdout)
    if failures:
        raise RuntimeError(f"{failures} self-test check(s) failed")


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-embeddings": cmd_export,
    "selftest": cmd_selftest,
}


def _set_threads():
    raw = os.environ.get("SSTG_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise UsageError(f"SSTG_THREADS must be a positive integer, got {raw!r}") from exc
    import torch
    torch.set_num_threads(n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help()
        return EXIT_INVALID

    from .config import ConfigError
    from .graph import GraphError
    from .preprocess import PreprocessError

    started = time.perf_counter()
    try:
        _set_threads()
        COMMANDS[args.command](args, argv, started)
    except (UsageError, ConfigError, GraphError, PreprocessError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("command failed", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
