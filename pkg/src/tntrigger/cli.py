"""Command-line interface: ``tntrigger <subcommand> [options]``.

Every subcommand accepts ``--seed`` and ``--config FILE``; the JSON config
supplies defaults for any long option (dashes or underscores), and flags
given on the command line win.  Exit status: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .contraction import count_macs, execute_batch, plan_model
from .dataio import (BACKGROUND, SyntheticConfig, generate_synthetic, load_dataset,
                     save_dataset)
from .embedding import compute_qmi, embed_batch, spectral_order, validate_ordering
from .errors import ConfigError, DataError, NumericError, TnError
from .evaluation import TRIGGER_FPR, ResolutionWarning, metrics_from_scores
from .model import ARCHITECTURES, canonical_tag, load_model, new_model, param_count, save_model
from .quantization import (DEFAULT_LADDER, FixedPointFormat, QuantConfig, fixed_norms,
                           quantization_scan, write_scan)
from .training import (LossParams, ScoreCalibration, TrainConfig, anomaly_score, calibrate,
                       split_indices, train)

log = logging.getLogger("tntrigger")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_ordering(path) -> tuple[int, ...]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ordering {path}: {exc}") from None
    order = payload["ordering"] if isinstance(payload, dict) else payload
    return validate_ordering(order)


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    signals = {args.signal_name: (args.signal_kind, args.n_signal)} if args.n_signal else {}
    base = dict(args.synthetic or {})
    base.setdefault("n_background", args.n_background)
    base.setdefault("signals", signals)
    cfg = SyntheticConfig.from_dict(base)
    ds = generate_synthetic(cfg, args.seed)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} events to {args.out}")
    return 0


def cmd_order(args) -> int:
    ds = load_dataset(args.data, args.format)
    particles = ds.background().particles if ds.labels is not None else ds.particles
    if args.max_events and len(particles) > args.max_events:
        idx = np.random.default_rng(args.seed).choice(len(particles), args.max_events, replace=False)
        particles = particles[np.sort(idx)]
    qmi = compute_qmi(particles)
    result = spectral_order(qmi)
    payload = {
        "ordering": list(result.ordering),
        "degenerate": result.degenerate,
        "fiedler": list(result.fiedler),
        "qmi": qmi.values.tolist(),
        "events": int(len(particles)),
    }
    _write_json(args.out, payload)
    note = " (degenerate spectrum, tie-broken order)" if result.degenerate else ""
    print(f"ordering {list(result.ordering)}{note}")
    return 0


def cmd_train(args) -> int:
    tag = canonical_tag(args.arch)
    ds = load_dataset(args.data, args.format)
    bkg = ds.background() if ds.labels is not None else ds
    lr = args.lr if args.lr is not None else (4e-3 if tag == "19-1" else 1e-2)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=lr,
                      max_epochs=args.epochs, patience=args.patience,
                      min_delta=args.min_delta, seed=args.seed,
                      splits=tuple(args.splits))
    tr, va, te = split_indices(len(bkg), cfg.splits, cfg.seed)
    if len(tr) == 0 or len(va) == 0:
        raise DataError(f"{len(bkg)} background events are too few to split {cfg.splits}")
    ordering = _read_ordering(args.ordering) if args.ordering else None
    sites = embed_batch(bkg.particles, ordering)
    model = new_model(tag, bond=args.bond, bond2=args.bond2, seed=args.seed, ordering=ordering)
    default = LossParams.default_for(model)
    params = LossParams(args.mu if args.mu is not None else default.mu,
                        args.delta if args.delta is not None else default.delta)

    def progress(epoch, tl, vl):
        if args.verbose:
            print(f"epoch {epoch:4d}  train {tl:.4f}  valid {vl:.4f}", flush=True)

    best, hist = train(model, sites[tr], sites[va], cfg, params, progress)
    cal_idx = te if len(te) else va
    plan = plan_model(best)
    cal = calibrate(execute_batch(plan, best, sites[cal_idx]))
    extra = {"calibration": {"median_bkg": cal.median_bkg, "events": int(len(cal_idx))},
             "loss": {"mu": params.mu, "delta": params.delta},
             "train_config": cfg.to_dict()}
    save_model(best, args.out, extra)
    history = hist.to_dict() | {"loss": extra["loss"], "calibration": extra["calibration"],
                                "params": param_count(best)}
    _write_json(args.history or f"{args.out}.history.json", history)
    print(f"{tag}: {param_count(best)} params, best epoch {hist.best_epoch}, "
          f"stopped at {hist.stopped_epoch} ({hist.stop_reason}), median {cal.median_bkg:.6g}")
    if hist.stop_reason == "numeric_error":
        print(f"training aborted: {hist.diagnostic}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def _norms(model, sites, fmt: str | None, requant: str):
    if fmt is None:
        return execute_batch(plan_model(model), model, sites)
    qc = QuantConfig.for_compute(FixedPointFormat.parse(fmt), requant)
    return fixed_norms(model, sites, qc)


def cmd_score(args) -> int:
    model, header = load_model(args.model)
    ds = load_dataset(args.data, args.format)
    sites = embed_batch(ds.particles, model.ordering)
    norms = _norms(model, sites, args.fixed, args.requant)
    labels = ds.label_array()
    # the stored median is a float-model statistic; fixed-point norms carry
    # their own rounding bias, so recalibrate whenever background is at hand
    recal = args.recalibrate or "calibration" not in header or (
        args.fixed is not None and np.any(labels == BACKGROUND))
    if recal:
        if not np.any(labels == BACKGROUND):
            raise DataError("recalibration needs background events in the data")
        cal = calibrate(norms[labels == BACKGROUND])
    else:
        cal = ScoreCalibration(float(header["calibration"]["median_bkg"]))
    scores = anomaly_score(norms, cal)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "norm_sq", "score", "label"])
        for i, (n, s) in enumerate(zip(norms, scores)):
            w.writerow([i, repr(float(n)), repr(float(s)),
                        ds.labels[i] if ds.labels is not None else ""])
    meta = {"median_bkg": cal.median_bkg, "format": args.fixed or "float", "events": len(ds)}
    _write_json(f"{args.out}.meta.json", meta)
    print(f"scored {len(ds)} events (median {cal.median_bkg:.6g}) -> {args.out}")
    return 0


def _read_scores(path):
    scores, labels = [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"score", "label"} <= set(reader.fieldnames):
                raise DataError(f"{path}: needs 'score' and 'label' columns")
            for row in reader:
                scores.append(float(row["score"]))
                labels.append(row["label"])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return np.array(scores), np.array(labels)


def cmd_evaluate(args) -> int:
    scores, labels = _read_scores(args.scores)
    if np.any(labels == ""):
        raise DataError("evaluation needs labeled events")
    meta_path = Path(f"{args.scores}.meta.json")
    cal = None
    if meta_path.exists():
        cal = ScoreCalibration(json.loads(meta_path.read_text())["median_bkg"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        rep = metrics_from_scores(scores, labels, args.target_fpr, BACKGROUND, cal)
    _write_json(args.out, rep.to_dict())
    for name, m in rep.signals.items():
        flag = "" if m.fpr_resolved else "  (too few background events to resolve this FPR)"
        print(f"{name:<12} AUC {m.auc:.4f}  TPR@{args.target_fpr:g} {m.tpr:.4g}{flag}")
    return 0


def cmd_mac_report(args) -> int:
    tag = canonical_tag(args.arch)
    model = new_model(tag, bond=args.bond, bond2=args.bond2, seed=args.seed)
    rep = count_macs(plan_model(model))
    print(rep.table())
    print(f"parameters: {param_count(model)}")
    if args.json:
        _write_json(args.json, rep.to_dict() | {"params": param_count(model)})
    return 0


def cmd_quantize_scan(args) -> int:
    model, _ = load_model(args.model)
    ds = load_dataset(args.data, args.format)
    if ds.labels is None:
        raise DataError("quantization scan needs labeled data")
    sites = embed_batch(ds.particles, model.ordering)
    rows = quantization_scan(model, sites, ds.label_array(), args.formats or DEFAULT_LADDER,
                             target_fpr=args.target_fpr, requant=args.requant)
    write_scan(rows, args.out, args.json or f"{Path(args.out).with_suffix('')}.json")
    for r in rows:
        print(f"{r.format:<22} median {r.median:10.4f}  AUC {r.auc:.4f} ({r.d_auc_pct:+.2f}%)  "
              f"TPR {r.tpr:.4g} ({r.d_tpr_pct:+.2f}%)")
    return 0


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", metavar="FILE", help="JSON file of option defaults")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress")


def _data(p, required=True) -> None:
    p.add_argument("--data", required=required, help="dataset file (.csv or rawbin)")
    p.add_argument("--format", choices=("csv", "rawbin"),
                   help="dataset format (default: from the file extension)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tntrigger", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    archs = ", ".join(ARCHITECTURES)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--format", choices=("csv", "rawbin"), help="output format")
    p.add_argument("--n-background", type=int, default=10000)
    p.add_argument("--n-signal", type=int, default=1000)
    p.add_argument("--signal-name", default="A4l")
    p.add_argument("--signal-kind", choices=("four_lepton", "high_met"), default="four_lepton")
    p.add_argument("--synthetic", type=json.loads, metavar="JSON",
                   help="extra generator settings as a JSON object")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("order", help="compute QMI and the spectral site ordering")
    _common(p)
    _data(p)
    p.add_argument("--out", required=True, help="ordering JSON output")
    p.add_argument("--max-events", type=int, default=50000,
                   help="subsample this many background events (0 = all)")
    p.set_defaults(func=cmd_order)

    p = sub.add_parser("train", help="train a model on background events")
    _common(p)
    _data(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--arch", default="19-1", help=f"architecture: {archs}")
    p.add_argument("--bond", type=int, default=4, help="bond dimension (layer 1)")
    p.add_argument("--bond2", type=int, default=2, help="layer-2 bond dimension for cascades")
    p.add_argument("--mu", type=float, help="loss target norm (default 50)")
    p.add_argument("--delta", type=float, help="pseudo-Huber width (default 25, cascades 15)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=2048)
    p.add_argument("--lr", type=float, help="learning rate (default 4e-3, cascades 1e-2)")
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--splits", type=float, nargs=3, default=(0.70, 0.05, 0.25),
                   metavar=("TRAIN", "VALID", "TEST"))
    p.add_argument("--ordering", help="ordering JSON from 'order'")
    p.add_argument("--history", help="history JSON path (default MODEL.history.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="compute squared norms and anomaly scores")
    _common(p)
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="scores CSV")
    p.add_argument("--fixed", metavar="FMT", help='fixed-point format, e.g. "16,6,TRN,WRAP"')
    p.add_argument("--requant", choices=("per_step", "per_mac"), default="per_step")
    p.add_argument("--recalibrate", action="store_true",
                   help="take the median from the background events in --data "
                        "(implied by --fixed when background is present)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="ROC metrics from a scores CSV")
    _common(p)
    p.add_argument("--scores", required=True, help="scores CSV from 'score'")
    p.add_argument("--out", required=True, help="metrics report JSON")
    p.add_argument("--target-fpr", type=float, default=TRIGGER_FPR)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mac-report", help="MAC counts of an architecture")
    _common(p)
    p.add_argument("--arch", required=True, help=f"architecture: {archs}")
    p.add_argument("--bond", type=int, default=None, help="layer-1 bond (default per architecture)")
    p.add_argument("--bond2", type=int, default=2)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_mac_report)

    p = sub.add_parser("quantize-scan", help="AUC/TPR across fixed-point widths")
    _common(p)
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="scan CSV")
    p.add_argument("--json", help="scan JSON (default: next to the CSV)")
    p.add_argument("--formats", nargs="+", metavar="FMT",
                   help=f"formats to scan (default: {' '.join(DEFAULT_LADDER)})")
    p.add_argument("--target-fpr", type=float, default=TRIGGER_FPR)
    p.add_argument("--requant", choices=("per_step", "per_mac"), default="per_step")
    p.set_defaults(func=cmd_quantize_scan)
    return parser


def _peek_config(parser, argv) -> tuple[str | None, str | None]:
    """Subcommand name and ``--config`` path, read before full parsing."""
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    command, path = _peek_config(parser, argv)
    if command is None or path is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[command]
    dests = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("config", "help"):
            raise ConfigError(f"config key {key!r} is not an option of '{command}'")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # options marked required must still be satisfied by the config
    for action in sub._actions:
        if action.required and action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "bond", 0) is None:
            args.bond = 4 if canonical_tag(args.arch) == "19-1" else 2
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
