"""Command line pipeline: ingest, synth, train, evaluate, predict, export-embeddings."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import data, evaluation, io, synth
from .model import ComponentMask, Hyperparams, MASKS, NumericalError, derive_seed, fit_mpe
from .predict import Query, predict_batch

log = logging.getLogger("mpe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# VPR-style: daytime window, 30 minute slots; taxi-style: whole day, 15 minute slots
FORMAT_DEFAULTS = {
    "triple-csv": {"slot_minutes": 30, "window": (7 * 60, 17 * 60), "max_gap": math.inf},
    "gps-csv": {"slot_minutes": 15, "window": (0, 1440), "max_gap": 300.0},
    "porto-csv": {"slot_minutes": 15, "window": (0, 1440), "max_gap": 300.0},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_window(text: str) -> tuple[int, int]:
    """``07:00-17:00`` or ``420-1020`` (minutes after midnight)."""
    def minutes(part):
        if ":" in part:
            h, m = part.split(":")
            return int(h) * 60 + int(m)
        return int(part)
    try:
        start, end = text.split("-")
        return minutes(start), minutes(end)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window {text!r}; use HH:MM-HH:MM") from None


def parse_gap(text: str) -> float:
    return math.inf if text.lower() in ("inf", "none", "unlimited") else float(text)


def _hyper_flags(p):
    d = Hyperparams()
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--negatives", type=int, default=d.negatives)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--reg", type=float, default=d.reg)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--early-stop", type=float, default=0.0, help="relative objective change; 0 disables")
    p.add_argument("--exclude", choices=("context", "true"), default="context",
                   help="negatives exclude all next locations of the context, or only the true one")
    p.add_argument("--split", default="8:1:1")
    p.add_argument("--seed", type=int, default=0)


def _hyper(args, seed=None) -> Hyperparams:
    return Hyperparams(dim=args.dim, negatives=args.negatives, lr=args.lr, reg=args.reg, epochs=args.epochs,
                       seed=args.seed if seed is None else seed, early_stop_rel_tol=args.early_stop)


def _slotting(args, fmt: str) -> data.TimeSlotting:
    d = FORMAT_DEFAULTS[fmt]
    start, end = args.window or d["window"]
    return data.TimeSlotting(args.slot_minutes or d["slot_minutes"], start, end)


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _read_sidecar(path: Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        return {}


# --------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    slotting = _slotting(args, args.format)
    max_gap = FORMAT_DEFAULTS[args.format]["max_gap"] if args.max_gap is None else args.max_gap
    if args.format != "triple-csv" and args.grid is None:
        raise UsageError(f"--grid is required for {args.format} input")
    with open(args.input, encoding="utf-8") as f:
        if args.format == "porto-csv":
            parsed = list(data.read_porto_trips(f))
        else:
            parsed = data.parse_records(f, args.format)
    if args.format == "triple-csv":
        records = parsed
    else:
        records = data.gps_to_records(parsed, data.GridSpec.parse(args.grid))
    tz = args.tz_offset or 0
    quads = data.build_quadruples(records, slotting, max_gap, tz, args.drop_self_loops, args.collapse_repeats)
    quads = data.filter_by_transition_frequency(quads, args.threshold)

    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as f:
        data.write_quadruples(quads, f)
    _write_json(io.sidecar_path(out), {
        "command": "ingest", "input": str(args.input), "format": args.format,
        "slotting": asdict(slotting), "tz_offset_minutes": tz, "max_gap_seconds": None if math.isinf(max_gap) else max_gap,
        "threshold": args.threshold, "drop_self_loops": args.drop_self_loops,
        "collapse_repeats": args.collapse_repeats, "grid": args.grid,
    })
    print(f"records: {len(records)}  quadruples: {len(quads)}  objects: {len({q[0] for q in quads})}  "
          f"locations: {len({q[2] for q in quads} | {q[3] for q in quads})}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = synth.SynthConfig(
        n_locations=args.n_locations, out_degree=args.out_degree, n_objects=args.objects, n_slots=args.slots,
        records_per_object=args.records_per_object, seed=args.seed, object_signal=args.object_signal,
        time_signal=args.time_signal, slot_minutes=args.slot_minutes, window_start_minute=args.window_start)
    graph = synth.generate_graph(config)
    out = Path(args.out)
    n = 0
    with open(out, "w", encoding="utf-8") as f:
        for rec in synth.generate_trajectories(graph, config):
            f.write(f"{rec.object_id},{rec.timestamp},{rec.location_id}\n")
            n += 1
    with open(io.sidecar_path(out), "w") as f:
        synth.write_sidecar(graph, config, f)
    print(f"records: {n}  edges: {graph.n_edges}  slot window: {config.slotting}")
    return EXIT_OK


def _load_quads(path) -> list:
    with open(path, encoding="utf-8") as f:
        return data.read_quadruples(f)


def cmd_train(args) -> int:
    quads = _load_quads(args.input)
    train_q, _, _ = data.split(quads, data.parse_split(args.split), derive_seed(args.seed, "split"))
    hyper = _hyper(args)
    out = Path(args.out)
    log_path = Path(str(out) + ".log.tsv")
    started = time.perf_counter()
    with open(log_path, "w") as log_file:
        log_file.write("epoch\tobjective\twall_seconds\n")

        def on_epoch(epoch, ell):
            log_file.write(f"{epoch}\t{ell!r}\t{time.perf_counter() - started:.3f}\n")
            log_file.flush()

        model = fit_mpe(train_q, hyper, ComponentMask.named(args.mask), tie_locations=args.tie_locations,
                        exclude=args.exclude, epoch_callback=on_epoch)
    with open(out, "wb") as f:
        io.save_model(model, f)
    ingest_meta = _read_sidecar(io.sidecar_path(args.input))
    with open(io.sidecar_path(out), "w") as f:
        io.write_params(model, f, {"command": "train", "input": str(args.input), "split": args.split,
                                   "split_seed": derive_seed(args.seed, "split"), "exclude": args.exclude,
                                   "n_train": len(train_q), "ingest": ingest_meta})
    print(f"trained {args.mask} model on {len(train_q)} quadruples; "
          f"final objective {model.history[-1][1]:.6g}; wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    quads = _load_quads(args.input)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    config = evaluation.ExperimentConfig(
        models=models, runs=args.runs, base_seed=args.seed, split_ratios=data.parse_split(args.split),
        hyper=_hyper(args), alpha=args.alpha, ks=tuple(range(1, args.k + 1)), full_vocab=args.full_vocab,
        exclude=args.exclude)
    reports = evaluation.run_experiment(quads, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.tsv", "w") as f:
        evaluation.write_report_tsv(reports, f)
    _write_json(out / "config.json", {"command": "evaluate", "input": str(args.input), **asdict(config),
                                      "split_seed": derive_seed(args.seed, "split")})
    print(evaluation.format_table(reports))
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    with open(args.model, "rb") as f:
        model = io.load_model(f)
    meta = _read_sidecar(io.sidecar_path(args.model)).get("ingest", {})
    if args.slot_minutes or args.window or "slotting" not in meta:
        slotting = _slotting(args, "triple-csv")
    else:
        slotting = data.TimeSlotting(**meta["slotting"])
    tz = args.tz_offset if args.tz_offset is not None else meta.get("tz_offset_minutes", 0)

    with open(args.input, encoding="utf-8") as f:
        rows = data.parse_records(f, "triple-csv")
    queries = []
    for r in rows:
        slot = int(r.timestamp) if args.slot_index else data.discretize_time(r.timestamp, slotting, tz)
        queries.append(Query(r.object_id, -1 if slot is None else slot, r.location_id))
    preds = predict_batch(model, None, queries, args.k, full_vocab=args.full_vocab)

    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("query_line\trank\ttoken\tscore\tbackoff\n")
        for line, pred in enumerate(preds, start=1):
            for rank, (tok, s) in enumerate(pred.items, start=1):
                out.write(f"{line}\t{rank}\t{tok}\t{s!r}\t{pred.backoff.value}\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_export(args) -> int:
    with open(args.model, "rb") as f:
        model = io.load_model(f)
    kinds = io.KINDS if args.kind == "all" else (args.kind,)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        io.export_embeddings(model, out, kinds)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def slot_flags(sp):
        sp.add_argument("--slot-minutes", type=int, default=None,
                        help="default 30 for triple-csv, 15 for gps-csv")
        sp.add_argument("--window", type=parse_window, default=None,
                        help="HH:MM-HH:MM; default 07:00-17:00 for triple-csv, whole day for gps-csv")
        sp.add_argument("--tz-offset", type=int, default=None, help="minutes added to UTC before slotting")

    s = sub.add_parser("ingest", help="raw records -> quadruple file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=tuple(FORMAT_DEFAULTS), default="triple-csv")
    slot_flags(s)
    s.add_argument("--grid", help="min_lat,max_lat,min_lon,max_lon,cell_deg (gps-csv, porto-csv)")
    s.add_argument("--max-gap", type=parse_gap, default=None, help="seconds; default inf (triple), 300 (gps)")
    s.add_argument("--threshold", type=int, default=30, help="minimum count of a (current, next) pair")
    s.add_argument("--drop-self-loops", action="store_true")
    s.add_argument("--collapse-repeats", action="store_true",
                   help="merge consecutive records of an object at the same location")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate synthetic triple-csv trajectories")
    d = synth.SynthConfig()
    s.add_argument("--n-locations", type=int, default=d.n_locations)
    s.add_argument("--out-degree", type=int, default=d.out_degree)
    s.add_argument("--objects", type=int, default=d.n_objects)
    s.add_argument("--slots", type=int, default=d.n_slots)
    s.add_argument("--records-per-object", type=int, default=d.records_per_object)
    s.add_argument("--object-signal", type=float, default=d.object_signal)
    s.add_argument("--time-signal", type=float, default=d.time_signal)
    s.add_argument("--slot-minutes", type=int, default=d.slot_minutes)
    s.add_argument("--window-start", type=int, default=d.window_start_minute, help="minutes after midnight")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one MPE variant on the training split")
    s.add_argument("--input", required=True, help="quadruple file")
    _hyper_flags(s)
    s.add_argument("--mask", choices=tuple(MASKS), default="full")
    s.add_argument("--tie-locations", action="store_true", help="share current/next location embeddings")
    s.add_argument("--out", required=True, help="model file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="multi-run comparison report")
    s.add_argument("--input", required=True, help="quadruple file")
    _hyper_flags(s)
    s.add_argument("--models", default="mpe,mm,bayes", help=f"comma separated from {','.join(evaluation.MODEL_NAMES)}")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--k", type=int, default=3, help="report metrics at 1..k")
    s.add_argument("--alpha", type=float, default=1.0, help="additive smoothing for mm/bayes")
    s.add_argument("--full-vocab", action="store_true", help="rank all next locations, not just candidates")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="top-k next locations for queries")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help="object,timestamp,current_location rows")
    slot_flags(s)
    s.add_argument("--slot-index", action="store_true", help="second column is a slot index, not a timestamp")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--full-vocab", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("export-embeddings", help="embedding matrices as TSV")
    s.add_argument("--model", required=True)
    s.add_argument("--kind", choices=("all", *io.KINDS), default="all")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mpe {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mpe {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"mpe {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
