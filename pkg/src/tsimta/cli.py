"""Command-line entry point: ``tsimta {synth,train,eval,compare,attn-dump}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

from . import autodiff as ad
from .cohort import MODALITIES, DatasetError, apply_preprocessor, eligibility_filter, read_dataset
from .synthgen import SynthConfig, generate_cohort
from .training import (
    NumericalError,
    RunConfig,
    RunMismatchError,
    attention_dump,
    compare_reports,
    evaluate_run,
    load_run,
    report_json,
    save_run,
    train_cv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tsimta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


def _merge(fields, flags, overrides):
    """Flag values that were set, then config-file values on top."""
    known = {f.name for f in dataclasses.fields(fields)}
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {k: v for k, v in flags.items() if k in known and v is not None}
    merged.update(overrides)
    return merged


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    flags = {
        "n_patients": args.n,
        "seed": args.seed,
        "beta": args.beta,
        "base_hazard_per_day": args.base_hazard,
        "p_missing_imaging": args.p_missing_imaging,
    }
    signal = {"blood": args.signal_blood, "imaging": args.signal_imaging, "medication": args.signal_medication}
    if any(v is not None for v in signal.values()):
        base = SynthConfig().modality_signal
        flags["modality_signal"] = {m: base[m] if v is None else v for m, v in signal.items()}
    try:
        config = SynthConfig(**_merge(SynthConfig, flags, _load_config_file(args.config)))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if config.n_patients == 0:
        log.warning("n_patients is 0; writing an empty cohort")
    records, _ = generate_cohort(config, args.out, args.truth)
    included, excluded = eligibility_filter(records)
    reasons = {}
    for _, reason in excluded:
        reasons[reason] = reasons.get(reason, 0) + 1
    events = {m: sum(1 for r in records for e in r.events if e.modality == m) for m in MODALITIES}
    summary = {"patients": len(records), "eligible": len(included), "excluded": dict(sorted(reasons.items())),
               "events": events}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_config(args):
    flags = {k: v for k, v in vars(args).items()}
    if args.train_cutoff is not None:
        flags["train_cutoff"] = tuple(args.train_cutoff)
    if args.eval_cutoffs is not None:
        flags["eval_cutoffs"] = tuple(args.eval_cutoffs)
    try:
        return RunConfig(**_merge(RunConfig, flags, _load_config_file(args.config)))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args):
    cfg = _run_config(args)
    if not cfg.dataset or not cfg.out_dir:
        raise UsageError("train needs --dataset and --out")
    records = read_dataset(cfg.dataset)
    run = train_cv(records, cfg, workers=args.workers)
    save_run(run, cfg.out_dir)
    for fa in run.folds:
        for name, curve in fa.curves.items():
            last = curve["epochs"][-1] if curve["epochs"] else curve["initial_loss"]
            log.info("fold %d %s: loss %.4f -> %.4f", fa.fold, name, curve["initial_loss"], last)
    print(json.dumps({"out_dir": cfg.out_dir, "fold_checksum": run.split.checksum,
                      "excluded": run.split.exclusion_counts(), "eligible": len(run.split.included)},
                     sort_keys=True))
    return EXIT_OK


def _load_for_eval(args):
    run = load_run(args.run)
    dataset = args.dataset or run.config.dataset
    if not dataset:
        raise UsageError("no dataset given and none recorded in the run")
    return run, read_dataset(dataset)


def cmd_eval(args):
    run, records = _load_for_eval(args)
    cutoffs = [args.cutoff] if args.cutoff is not None else list(run.config.eval_cutoffs)
    for cutoff in cutoffs:
        report = evaluate_run(run, records, cutoff)
        out = args.out
        if out is None:
            out = os.path.join(args.run, f"report_cutoff{cutoff:g}.json")
        elif len(cutoffs) > 1:
            root, ext = os.path.splitext(out)
            out = f"{root}_cutoff{cutoff:g}{ext}"
        _write_text(out, report_json(report))
        if args.attn_out:
            root, ext = os.path.splitext(args.attn_out)
            path = args.attn_out if len(cutoffs) == 1 else f"{root}_cutoff{cutoff:g}{ext}"
            _dump_attention(run, records, cutoff, args.fold, args.limit, path)
        rows = " ".join(
            f"{t['task']}={'undefined' if t['mean_auc'] is None else format(t['mean_auc'], '.3f')}"
            for t in report["tasks"])
        print(f"{report['label']} cutoff={cutoff:g}: {rows} -> {out}")
    return EXIT_OK


def _dump_attention(run, records, cutoff, fold, limit, path):
    if not 0 <= fold < len(run.folds):
        raise UsageError(f"fold {fold} out of range")
    fa = run.folds[fold]
    by_id = {r.patient_id: r for r in records}
    ids = fa.test_ids[:limit] if limit else fa.test_ids
    missing = [pid for pid in ids if pid not in by_id]
    if missing:
        raise DatasetError(f"patients missing from dataset: {missing[:3]}")
    patients = [apply_preprocessor(by_id[pid], fa.stats) for pid in ids]
    rows = attention_dump(fa.model, patients, cutoff)
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def cmd_attn_dump(args):
    run, records = _load_for_eval(args)
    _dump_attention(run, records, args.cutoff, args.fold, args.limit, args.out)
    return EXIT_OK


def cmd_compare(args):
    reports = []
    for path in (args.report_a, args.report_b):
        try:
            with open(path, encoding="utf-8") as fh:
                reports.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read report {path}: {exc}") from exc
    result = compare_reports(*reports)
    _write_text(args.out, json.dumps(result, indent=1, sort_keys=True) + "\n")
    if args.out not in (None, "-"):
        for t in result["tasks"]:
            p = "n/a" if t["fisher_p"] is None else f"{t['fisher_p']:.4g}"
            verdict = "significant" if t["significant"] else "not significant"
            print(f"{t['task']}: Fisher p={p} ({verdict}{', degenerate' if t['degenerate'] else ''})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p):
    d = RunConfig()
    p.add_argument("--dataset")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--config", help="JSON file whose keys override the flags")
    p.add_argument("--family", choices=("SimTA", "TSimTA"))
    p.add_argument("--variant", help="Unimodal:<modality>, Concat, ConcatSA or LateMean")
    p.add_argument("--n-blocks", type=int, help=f"default {d.n_blocks}")
    p.add_argument("--n-inner", type=int, help=f"default {d.n_inner}")
    p.add_argument("--d-model", type=int, help=f"default {d.d_model}")
    p.add_argument("--sa-heads", type=int, help=f"default {d.sa_heads}")
    p.add_argument("--use-positional-encoding", action="store_const", const=True)
    p.add_argument("--mlp-hidden", type=int, help=f"default {d.mlp_hidden}")
    p.add_argument("--epochs", type=int, help=f"default {d.epochs}")
    p.add_argument("--batch-size", type=int, help=f"default {d.batch_size}")
    p.add_argument("--lr", type=float, help=f"default {d.lr}")
    p.add_argument("--p-modality-drop", type=float, help=f"default {d.p_modality_drop}")
    p.add_argument("--k-folds", type=int, help=f"default {d.k_folds}")
    p.add_argument("--train-cutoff", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--eval-cutoffs", type=float, nargs="+")
    p.add_argument("--fixed-cutoffs", dest="resample_cutoffs", action="store_const", const=False,
                   help="draw training cutoffs once instead of every epoch")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1, help="folds trained in parallel processes")


def build_parser():
    parser = _Parser(prog="tsimta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth sidecar path (default <out>.truth.jsonl)")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--base-hazard", type=float)
    p.add_argument("--signal-blood", type=float)
    p.add_argument("--signal-imaging", type=float)
    p.add_argument("--signal-medication", type=float)
    p.add_argument("--p-missing-imaging", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training of one variant")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fixed-cutoff evaluation of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset")
    p.add_argument("--cutoff", type=float, help="default: the run's eval cutoffs")
    p.add_argument("--out")
    p.add_argument("--attn-out", help="also write an attention dump (JSONL)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="DeLong + Fisher comparison of two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("attn-dump", help="SimTA attention weights of held-out patients")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset")
    p.add_argument("--cutoff", type=float, default=90.0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="first N held-out patients (0 = all)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tsimta: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, RunMismatchError, FileNotFoundError) as exc:
        print(f"tsimta: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ad.NonFiniteError) as exc:
        print(f"tsimta: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
