"""Command-line pipeline driver.

Subcommands: train, calibrate, reorder, quantize, finetune, merge, bench,
eval, ablate. Batch-only; every run is reproducible from its flags plus the
seed (QEFT_SEED overrides the default seed, an explicit --seed flag wins over
both). Reports are CSV on disk with an optional aligned-text stdout view.

Exit codes: 0 ok, 2 usage, 3 missing file, 4 bad checkpoint container,
5 config/checkpoint mismatch, 6 validation failure, 7 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass

from . import data as shipped_data
from .calibration import (
    collect_calibration, read_report, select_global, write_report,
)
from .container import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError, ContainerError, DivergenceError, MergeMismatchError,
    QeftError,
)
from .kernels import PATH_REFERENCE, bench_generate, native_path
from .merging import WeakDelta, apply_to_dense, apply_to_quantized
from .model import (
    DenseModel, ModelConfig, TrainConfig, encode_bytes, eval_perplexity,
    init_model, split_corpus, train_dense,
)
from .qmodel import QuantizedModel, quantize_model, quantized_perplexity
from .reorder import apply_ogr, build_plan
from .tuning import TuneConfig, finetune

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_BAD_CHECKPOINT = 4
EXIT_MISMATCH = 5
EXIT_INVALID = 6
EXIT_DIVERGED = 7


@dataclass
class RunConfig:
    """Validated flag set for one subcommand invocation."""
    command: str
    seed: int
    report_format: str
    args: argparse.Namespace

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        seed = args.seed
        if seed is None:
            env = os.environ.get("QEFT_SEED")
            seed = int(env) if env else 0
        fmt = getattr(args, "report_format", "text")
        if fmt not in ("text", "csv"):
            raise ConfigError(f"report format {fmt!r} not in (text, csv)")
        for name in ("model", "corpus", "target", "delta", "calibration"):
            path = getattr(args, name, None)
            if path and not os.path.exists(path):
                raise FileNotFoundError(f"{name} file not found: {path}")
        return cls(command=args.command, seed=seed, report_format=fmt,
                   args=args)


def _corpus_ids(path: str | None):
    if path is None:
        return encode_bytes(shipped_data.load_text("tiny_corpus.txt"))
    with open(path, "rb") as fh:
        return encode_bytes(fh.read())


def _load_dense(path) -> DenseModel:
    obj = load_checkpoint(path)
    if not isinstance(obj, DenseModel):
        raise ConfigError(f"{path} is not a dense checkpoint")
    return obj


def _load_quant(path) -> QuantizedModel:
    obj = load_checkpoint(path)
    if not isinstance(obj, QuantizedModel):
        raise ConfigError(f"{path} is not a quantized checkpoint")
    return obj


def _emit_report(rows: list[dict], rc: RunConfig, out_path: str | None):
    """Write rows as CSV to out_path; print per the chosen stdout format."""
    if not rows:
        return
    cols = list(rows[0])
    if out_path:
        with open(out_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            wr.writerows(rows)
    if rc.report_format == "csv":
        wr = csv.DictWriter(sys.stdout, fieldnames=cols)
        wr.writeheader()
        wr.writerows(rows)
    else:
        widths = {c: max(len(c), *(len(str(r[c])) for r in rows))
                  for c in cols}
        print("  ".join(c.ljust(widths[c]) for c in cols))
        for r in rows:
            print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))


def _fmt(x: float, nd: int = 4) -> str:
    return f"{x:.{nd}f}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(rc: RunConfig) -> int:
    a = rc.args
    model = init_model(ModelConfig(seed=rc.seed))
    ids = _corpus_ids(a.corpus)
    train_ids, eval_ids = split_corpus(ids)
    loss0, ppl0 = eval_perplexity(model, eval_ids)
    tc = TrainConfig(steps=a.steps, lr=a.lr, seed=rc.seed)
    model = train_dense(model, train_ids, config=tc)
    loss1, ppl1 = eval_perplexity(model, eval_ids)
    save_checkpoint(a.out, model)
    print(f"trained {a.steps} steps: eval loss {_fmt(loss0)} -> {_fmt(loss1)}"
          f" (ppl {_fmt(ppl0, 2)} -> {_fmt(ppl1, 2)}); wrote {a.out}")
    return EXIT_OK


def cmd_calibrate(rc: RunConfig) -> int:
    a = rc.args
    model = _load_dense(a.model)
    ids = _corpus_ids(a.corpus)
    train_ids, _ = split_corpus(ids)
    hess = collect_calibration(model, train_ids, n_seq=a.n_seq,
                               seq_len=a.seq_len, seed=rc.seed)
    gwc = select_global(hess.diag(), a.k, n_blocks=model.config.n_blocks)
    write_report(a.out, hess.diag(), gwc)
    print(f"calibrated on {a.n_seq} x {a.seq_len} tokens; global weak"
          f" columns {gwc.resid_indices.tolist()}; wrote {a.out}")
    return EXIT_OK


def cmd_reorder(rc: RunConfig) -> int:
    a = rc.args
    model = _load_dense(a.model)
    ids = _corpus_ids(a.corpus)
    train_ids, _ = split_corpus(ids)
    hess = collect_calibration(model, train_ids, seed=rc.seed)
    gwc = select_global(hess.diag(), a.k, n_blocks=model.config.n_blocks)
    plan = build_plan(gwc, model.config)
    reordered = apply_ogr(model, plan)
    save_checkpoint(a.out, reordered)
    if a.plan_out:
        with open(a.plan_out, "w") as fh:
            json.dump({
                "p_resid": plan.p_resid.perm.tolist(),
                "p_ffn": [p.perm.tolist() for p in plan.p_ffn],
                "wo_irregular": [i.tolist() for i in plan.wo_irregular],
            }, fh, sort_keys=True, indent=1)
    print(f"reordered model written to {a.out}"
          + (f", plan to {a.plan_out}" if a.plan_out else ""))
    return EXIT_OK


def cmd_quantize(rc: RunConfig) -> int:
    a = rc.args
    model = _load_dense(a.model)
    ids = _corpus_ids(a.corpus)
    train_ids, _ = split_corpus(ids)
    hess = collect_calibration(model, train_ids, seed=rc.seed)
    gwc = None
    if a.calibration:
        _, gwc = read_report(a.calibration)
        if gwc.k != a.k:
            raise ConfigError(
                f"calibration report k={gwc.k} but --k {a.k}")
    g = None if a.group_size == 0 else a.group_size
    qm = quantize_model(model, hess, k=a.k, bits=a.bits, g=g, mode=a.mode,
                        reorder=a.reorder, grid_steps=a.grid_steps, gwc=gwc,
                        meta={"seed": rc.seed})
    save_checkpoint(a.out, qm)
    print(f"quantized ({a.bits}-bit, k={a.k}, g={a.group_size or 'row'},"
          f" {a.mode}, reorder={a.reorder}); wrote {a.out}")
    return EXIT_OK


def cmd_finetune(rc: RunConfig) -> int:
    a = rc.args
    qm = _load_quant(a.model)
    if a.k is not None and a.k != qm.k:
        raise ConfigError(f"--k {a.k} does not match checkpoint k={qm.k}")
    ids = _corpus_ids(a.corpus)
    train_ids, eval_ids = split_corpus(ids)
    tc = TuneConfig(steps=a.steps, lr=a.lr, batch=a.batch,
                    grad_accum=a.grad_accum, max_grad_norm=a.max_grad_norm,
                    seed=rc.seed)
    loss0, ppl0 = quantized_perplexity(qm, eval_ids)
    try:
        tuned, log = finetune(qm, train_ids, tc)
    except DivergenceError as e:
        if e.last_good is not None:
            save_checkpoint(a.out + ".last-good", e.last_good)
            print(f"diverged at step {e.step}; last good state written to"
                  f" {a.out}.last-good", file=sys.stderr)
        raise
    loss1, ppl1 = quantized_perplexity(tuned, eval_ids)
    save_checkpoint(a.out, tuned)
    if a.log:
        with open(a.log, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"tuned {a.steps} steps: eval loss {_fmt(loss0)} -> {_fmt(loss1)}"
          f" (ppl {_fmt(ppl0, 2)} -> {_fmt(ppl1, 2)}); wrote {a.out}")
    return EXIT_OK


def cmd_merge(rc: RunConfig) -> int:
    a = rc.args
    delta = load_checkpoint(a.delta)
    if not isinstance(delta, WeakDelta):
        raise ConfigError(f"{a.delta} is not a weak-delta checkpoint")
    if a.target_kind == "dense":
        merged = apply_to_dense(_load_dense(a.target), delta)
    else:
        merged = apply_to_quantized(_load_quant(a.target), delta)
    save_checkpoint(a.out, merged)
    print(f"merged {a.delta} into {a.target} ({a.target_kind});"
          f" wrote {a.out}")
    return EXIT_OK


def cmd_bench(rc: RunConfig) -> int:
    a = rc.args
    qm = _load_quant(a.model)
    ids = _corpus_ids(a.corpus)
    prompt = ids[:a.prompt_len]
    native = native_path(qm.blocks[0].layers["wq"])
    wanted = [a.path] if a.path != "all" else [native.replace("_reorder", ""),
                                               "reference"]
    rows = []
    for path in wanted:
        canon = "online_reorder" if path == "online" else path
        if canon != PATH_REFERENCE and canon != native:
            raise ConfigError(
                f"checkpoint uses the {native} arrangement; path {path!r}"
                " is incompatible")
        res = bench_generate(qm, prompt, a.tokens,
                             reference=(canon == PATH_REFERENCE),
                             repeats=a.repeats)
        total = sum(s.bytes_read for s in res.stats.values())
        fma = sum(s.fma for s in res.stats.values())
        rows.append({"path": path, "tokens": a.tokens,
                     "tokens_per_s": _fmt(res.tokens_per_s, 2),
                     "bytes_read": total, "fma": fma})
    _emit_report(rows, rc, a.report)
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    a = rc.args
    model = _load_dense(a.model)
    ids = _corpus_ids(a.corpus)
    train_ids, eval_ids = split_corpus(ids)
    hess = collect_calibration(model, train_ids, seed=rc.seed)
    g = None if a.group_size == 0 else a.group_size
    variants = {
        "dense": lambda: eval_perplexity(model, eval_ids),
        "rtn": lambda: quantized_perplexity(
            quantize_model(model, hess, k=a.k, bits=a.bits, g=g, mode="rtn",
                           reorder="ogr"), eval_ids),
        "qeft": lambda: quantized_perplexity(
            quantize_model(model, hess, k=a.k, bits=a.bits, g=g, mode="optq",
                           reorder="ogr", grid_steps=a.grid_steps), eval_ids),
    }
    rows = []
    for name, fn in variants.items():
        loss, ppl = fn()
        rows.append({"variant": name, "loss": _fmt(loss, 6),
                     "ppl": _fmt(ppl, 6)})
    _emit_report(rows, rc, a.report)
    return EXIT_OK


def cmd_ablate(rc: RunConfig) -> int:
    """Reorder-technique x group-wise grid: held-out ppl and tokens/s.

    Benchmark passes are interleaved across the six variants (one sweep per
    repeat) so slow host drift hits every variant equally; each cell reports
    its median sweep.
    """
    a = rc.args
    model = _load_dense(a.model)
    ids = _corpus_ids(a.corpus)
    train_ids, eval_ids = split_corpus(ids)
    hess = collect_calibration(model, train_ids, seed=rc.seed)
    gwc = None
    if a.calibration:
        _, gwc = read_report(a.calibration)
        if gwc.k != a.k:
            raise ConfigError(f"calibration report k={gwc.k} but --k {a.k}")
    prompt = ids[:a.prompt_len]

    grid = [(reorder, grouped)
            for reorder in ("none", "online", "ogr")
            for grouped in (False, True)]
    variants = []
    for reorder, grouped in grid:
        qm = quantize_model(model, hess, k=a.k, bits=a.bits,
                            g=(a.group_size if grouped else None),
                            mode=a.mode, reorder=reorder,
                            gwc=gwc if reorder == "ogr" else None)
        loss, ppl = quantized_perplexity(qm, eval_ids)
        variants.append((reorder, grouped, qm, ppl, []))
    for _ in range(max(1, a.repeats)):
        for reorder, grouped, qm, ppl, tps in variants:
            res = bench_generate(qm, prompt, a.tokens, repeats=1)
            tps.append(res.tokens_per_s)
    rows = []
    for reorder, grouped, qm, ppl, tps in variants:
        rows.append({
            "reorder": reorder,
            "groupwise": "yes" if grouped else "no",
            "ppl": _fmt(ppl, 4),
            "tokens_per_s": _fmt(sorted(tps)[len(tps) // 2], 2),
        })
    _emit_report(rows, rc, a.report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    """Returns (parser, {command: subparser}) so config-file defaults can
    be applied to the right subcommand."""
    p = argparse.ArgumentParser(
        prog="qeft",
        description="desk-scale mixed-precision quantization pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    registry = {}

    def add_parser(name, **kw):
        sp = sub.add_parser(name, **kw)
        registry[name] = sp
        return sp

    def common(sp, corpus=True, report=False):
        sp.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: QEFT_SEED env or 0)")
        sp.add_argument("--config", default=None,
                        help="JSON file of default flag values"
                             " (explicit flags win)")
        if corpus:
            sp.add_argument("--corpus", default=None,
                            help="plain-text corpus (default: shipped toy corpus)")
        if report:
            sp.add_argument("--report", default=None,
                            help="write CSV report to this path")
            sp.add_argument("--report-format", default="text",
                            choices=("text", "csv"))

    sp = add_parser("train", help="train the dense toy model")
    common(sp)
    sp.add_argument("--steps", type=int, default=TrainConfig.steps)
    sp.add_argument("--lr", type=float, default=TrainConfig.lr)
    sp.add_argument("--out", required=True)

    sp = add_parser("calibrate", help="export lambda report + selection")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--n-seq", type=int, default=8)
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--out", required=True)

    sp = add_parser("reorder", help="apply offline global reordering")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plan-out", default=None)

    sp = add_parser("quantize", help="quantize a dense checkpoint")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration", default=None,
                    help="reuse selection from a calibration report")
    sp.add_argument("--bits", type=int, default=4, choices=(3, 4))
    sp.add_argument("--group-size", type=int, default=32,
                    help="0 means one group per output channel")
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--mode", default="optq", choices=("optq", "rtn"))
    sp.add_argument("--grid-steps", type=int, default=100)
    sp.add_argument("--reorder", default="ogr",
                    choices=("ogr", "online", "none"))
    sp.add_argument("--out", required=True)

    sp = add_parser("finetune", help="weak-column fine-tuning")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--lr", type=float, default=TuneConfig.lr)
    sp.add_argument("--steps", type=int, default=TuneConfig.steps)
    sp.add_argument("--batch", type=int, default=TuneConfig.batch)
    sp.add_argument("--grad-accum", type=int, default=TuneConfig.grad_accum)
    sp.add_argument("--max-grad-norm", type=float,
                    default=TuneConfig.max_grad_norm)
    sp.add_argument("--k", type=int, default=None,
                    help="must match the checkpoint's k")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", default=None, help="JSONL training log path")

    sp = add_parser("merge", help="apply a weak-column delta")
    common(sp, corpus=False)
    sp.add_argument("--delta", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--target-kind", required=True,
                    choices=("dense", "quantized"))
    sp.add_argument("--out", required=True)

    sp = add_parser("bench", help="generation throughput benchmark")
    common(sp, report=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--path", default="all",
                    choices=("structured", "irregular", "online",
                             "reference", "all"))
    sp.add_argument("--tokens", type=int, default=32)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--prompt-len", type=int, default=8)

    sp = add_parser("eval", help="held-out perplexity: dense/rtn/qeft")
    common(sp, report=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--bits", type=int, default=4, choices=(3, 4))
    sp.add_argument("--group-size", type=int, default=32)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--grid-steps", type=int, default=100)

    sp = add_parser("ablate", help="reorder x group-wise ablation grid")
    common(sp, report=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration", default=None,
                    help="reuse global selection from a calibration report")
    sp.add_argument("--bits", type=int, default=4, choices=(3, 4))
    sp.add_argument("--group-size", type=int, default=32)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--mode", default="optq", choices=("optq", "rtn"))
    sp.add_argument("--tokens", type=int, default=24)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--prompt-len", type=int, default=8)
    return p, registry


COMMANDS = {
    "train": cmd_train, "calibrate": cmd_calibrate, "reorder": cmd_reorder,
    "quantize": cmd_quantize, "finetune": cmd_finetune, "merge": cmd_merge,
    "bench": cmd_bench, "eval": cmd_eval, "ablate": cmd_ablate,
}


def _apply_config_file(registry, argv):
    """Precedence: explicit flag > config-file value > built-in default.

    A config file is a flat JSON object of long flag names (dashes or
    underscores) to values; it only adjusts the subcommand parser's
    defaults, so anything passed on the command line still wins. Required
    path flags (--model, --out, ...) must stay on the command line.
    """
    argv = list(argv)
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = argv[i + 1]
    del argv[i:i + 2]
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        loaded = json.load(fh)
    command = next((a for a in argv if not a.startswith("-")), None)
    if command in registry:
        registry[command].set_defaults(**{k.replace("-", "_"): v
                                          for k, v in loaded.items()})
    return argv


def main(argv=None) -> int:
    parser, registry = build_parser()
    try:
        argv = _apply_config_file(registry,
                                  sys.argv[1:] if argv is None else argv)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    args = parser.parse_args(argv)
    try:
        rc = RunConfig.from_args(args)
        shown = {k: v for k, v in vars(args).items() if k != "command"}
        print(f"# qeft {rc.command} seed={rc.seed} {shown}", file=sys.stderr)
        return COMMANDS[rc.command](rc)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ContainerError as e:
        print(f"error: bad checkpoint: {e}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT
    except (MergeMismatchError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except DivergenceError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except QeftError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
