"""Command-line entry points.

    debiaskt simulate   --out corpus.csv --sidecar truth.json
    debiaskt preprocess --data raw.csv --out clean.csv --manifest folds.json
    debiaskt train      --data raw.csv --fold 0 --out ck.zip --log train.jsonl
    debiaskt evaluate   --checkpoint ck.zip --dump dump.csv --report report.json
    debiaskt bias-split --data raw.csv --out-dir bins/
    debiaskt explain    --checkpoint ck.zip --student s1 --position 12
    debiaskt gradcheck
    debiaskt audit      --dump external.csv --difficulty diff.json

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import data as dataio
from .metrics import PredictionDump, report
from .model import ABLATIONS
from .predictor import explain
from .training import (
    TrainConfig,
    encode,
    fit,
    gradient_check,
    load_checkpoint,
    predict_dump,
    save_checkpoint,
)

log = logging.getLogger("debiaskt")

# published settings for each option; keys without one are implementation defaults
REPORTED_DEFAULTS = {
    "batch_size": "reported: 512",
    "learning_rate": "reported: 0.001",
    "dropout": "reported: 0.05",
    "dim": "reported: 64",
    "window": "reported: last 100 interactions",
    "patience": "reported: 10 epochs on validation AUC",
    "num_heads": "reported: e.g. 2",
    "beta": "reported: e.g. 0.1",
    "gamma": "reported: e.g. 0.2",
    "cl_weight": "reported: unit weight",
    "k": "reported: 5-fold student split",
    "val_frac": "reported: 10%% of training students",
    "min_len": "reported: drop students with < 5 interactions",
}

_BOOL_LIKE = {"ablations", "dtype"}


def _help(key: str, default) -> str:
    note = REPORTED_DEFAULTS.get(key)
    return f"default {default!r}" + (f" ({note})" if note else "")


def _add_train_config(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (flags override --config file)")
    g.add_argument("--config", type=Path, help="flat JSON object whose keys are the options below")
    for f in fields(TrainConfig):
        if f.name in _BOOL_LIKE:
            continue
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default),
                       default=None, help=_help(f.name, f.default))
    g.add_argument("--dtype", choices=("float32", "float64"), default=None, help=_help("dtype", "float32"))
    g.add_argument("--ablation", dest="ablations", action="append", choices=ABLATIONS, default=None,
                   help="ablation flag, repeatable: " + ", ".join(ABLATIONS))


def _train_config(args) -> TrainConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return TrainConfig.from_json(base)


def _add_split(p, with_seed=True):
    p.add_argument("--window", type=int, default=100, help=_help("window", 100))
    p.add_argument("--min-len", type=int, default=5, help=_help("min_len", 5))
    p.add_argument("--k", type=int, default=5, help=_help("k", 5))
    p.add_argument("--val-frac", type=float, default=0.10, help=_help("val_frac", 0.10))
    if with_seed:
        p.add_argument("--split-seed", type=int, default=0, help="seed for the fold assignment")


def _load(path, window=100, min_len=5) -> dataio.Dataset:
    return dataio.preprocess(dataio.parse_csv(path), window=window, min_len=min_len)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    data, truth = dataio.simulate(
        args.students, args.questions, args.concepts, guess=args.guess, slip=args.slip,
        difficulty_skew=args.skew, seed=args.seed, length=args.length,
        concept_spread=args.concept_spread,
    )
    dataio.write_csv(data, args.out)
    if args.sidecar:
        truth.save(args.sidecar)
    log.info("wrote %d students to %s", len(data), args.out)


def cmd_preprocess(args):
    data = _load(args.data, args.window, args.min_len)
    dataio.write_csv(data, args.out)
    if args.manifest:
        split = dataio.kfold_split(data, args.k, args.val_frac, args.split_seed)
        _write_json(split.to_json(), args.manifest)
    log.info("%d students, %d questions, %d concepts", len(data), data.num_questions, data.num_concepts)


def cmd_bias_split(args):
    data = _load(args.data, args.window, args.min_len)
    part = dataio.bias_partition(data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in dataio.BIN_NAMES:
        dataio.write_csv(part[name], out / f"{name}.csv")
    _write_json(part.assignments(), out / "bins.json")
    log.info("bins: %s", {n: len(part[n]) for n in dataio.BIN_NAMES})


def cmd_train(args):
    config = _train_config(args)
    data = _load(args.data, config.window, args.min_len)
    split = dataio.kfold_split(data, args.k, args.val_frac, args.split_seed)
    train, val, _ = split.split(data, args.fold)
    log_fh = open(args.log, "w") if args.log else None

    def on_epoch(rec):
        line = json.dumps(rec, sort_keys=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        log.info(line)

    try:
        state = fit(train, val, config, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    meta = {
        "data": str(args.data),
        "fold": args.fold,
        "k": args.k,
        "val_frac": args.val_frac,
        "split_seed": args.split_seed,
        "min_len": args.min_len,
        "best_epoch": state.best_epoch,
        "best_val_auc": state.best_auc,
        "epochs_run": state.epoch,
        "difficulty": state.difficulty.to_json(),
        "history": state.history,
    }
    save_checkpoint(args.out, state.model, config, meta)
    log.info("best val AUC %.4f at epoch %d -> %s", state.best_auc, state.best_epoch, args.out)


def _eval_data(args, meta, config):
    path = args.data or meta.get("data")
    if path is None:
        raise ValueError("no --data given and checkpoint does not record one")
    data = _load(path, config.window, meta.get("min_len", 5))
    if args.split == "all":
        return data
    split = dataio.kfold_split(data, meta.get("k", 5), meta.get("val_frac", 0.10), meta.get("split_seed", 0))
    fold = meta.get("fold", 0) if args.fold is None else args.fold
    train, val, test = split.split(data, fold)
    return {"train": train, "val": val, "test": test}[args.split]


def cmd_evaluate(args):
    model, config, meta = load_checkpoint(args.checkpoint)
    data = _eval_data(args, meta, config)
    dump, cvs = predict_dump(model, data, config.batch_size, config.window, keep_cv=True)
    diff = dataio.DifficultyTable.from_json(meta["difficulty"])
    rep = report(dump, diff, literal_ekl=args.literal_ekl, all_rows=args.all_rows)
    if args.dump:
        dump.write_csv(args.dump)
    if args.dump_cv:
        _write_json(cvs, args.dump_cv)
    if args.difficulty_out:
        diff.save(args.difficulty_out)
    _write_json(rep.to_json(), args.report)


def cmd_explain(args):
    model, config, meta = load_checkpoint(args.checkpoint)
    args.split = "all"
    data = _eval_data(args, meta, config)
    seqs = data.by_student()
    if args.student not in seqs:
        raise KeyError(f"student {args.student!r} not in data")
    enc = encode(dataio.Dataset((seqs[args.student],), data.num_questions, data.num_concepts), config.window)
    with torch.no_grad():
        trace = model(enc.q, enc.c, enc.r, enc.valid)
    n = int(enc.valid.sum())
    positions = [args.position] if args.position else range(1, n + 1)
    out = [explain(trace, p).to_json() for p in positions]
    _write_json(out[0] if args.position else out, args.out)


def cmd_gradcheck(args):
    rep = gradient_check(seed=args.seed)
    _write_json(rep.to_json(), args.out)
    if not rep.passed:
        raise RuntimeError(f"gradient check failed for: {', '.join(rep.failures) or 'frozen rows'}")


def cmd_audit(args):
    dump = PredictionDump.read_csv(args.dump)
    diff = dataio.DifficultyTable.load(args.difficulty)
    rep = report(dump, diff, literal_ekl=args.literal_ekl, all_rows=args.all_rows)
    _write_json(rep.to_json(), args.out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debiaskt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus and its ground truth")
    p.add_argument("--students", type=int, default=500)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--guess", type=float, default=0.1)
    p.add_argument("--slip", type=float, default=0.1)
    p.add_argument("--skew", type=float, default=0.0, help="shape of the concept-difficulty skew-normal")
    p.add_argument("--concept-spread", type=float, default=1.5)
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sidecar", type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="clean a raw log and write the fold manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    _add_split(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("bias-split", help="split students into low/medium/high correct-rate bins")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--window", type=int, default=100, help=_help("window", 100))
    p.add_argument("--min-len", type=int, default=5, help=_help("min_len", 5))
    p.set_defaults(func=cmd_bias_split)

    p = sub.add_parser("train", help="train on one fold, early-stopping on validation AUC")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("checkpoint.zip"))
    p.add_argument("--log", type=Path, help="JSON-lines epoch log")
    p.add_argument("--min-len", type=int, default=5, help=_help("min_len", 5))
    p.add_argument("--k", type=int, default=5, help=_help("k", 5))
    p.add_argument("--val-frac", type=float, default=0.10, help=_help("val_frac", 0.10))
    p.add_argument("--split-seed", type=int, default=0)
    _add_train_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="prediction dump and bias report for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="override the data file recorded in the checkpoint")
    p.add_argument("--fold", type=int)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--dump", type=Path)
    p.add_argument("--report", type=Path)
    p.add_argument("--dump-cv", type=Path, help="write per-student contradiction flags as JSON")
    p.add_argument("--difficulty-out", type=Path, help="write the training difficulty table as JSON")
    p.add_argument("--literal-ekl", action="store_true")
    p.add_argument("--all-rows", action="store_true", help="contradiction rates over all rows")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="per-position interpretable prediction breakdown")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--student", required=True)
    p.add_argument("--position", type=int, help="1-based; omit for every position")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_explain, fold=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit", help="bias report for an external model's prediction dump")
    p.add_argument("--dump", type=Path, required=True)
    p.add_argument("--difficulty", type=Path, required=True)
    p.add_argument("--literal-ekl", action="store_true")
    p.add_argument("--all-rows", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 1
        print(f"debiaskt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
