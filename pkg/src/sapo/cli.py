"""Command-line front door: ``sapo {gen-data,pretrain,train,eval,ablate-n}``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
Relative output paths resolve under ``$SAPO_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import dump_config, load_config
from .errors import ConfigError, ContractError, NumericError
from .model import load_params, save_params
from .tasks import KINDS, make_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "SAPO_OUTPUT_ROOT"

log = logging.getLogger("sapo")


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _load_any_params(path):
    """Accepts a params file or a training checkpoint."""
    from .trainer import load_checkpoint

    import numpy as np

    with np.load(path, allow_pickle=False) as data:
        fmt = json.loads(str(data["__header__"])).get("format")
    if fmt == "sapo-train-ckpt-v1":
        params, _, _, header = load_checkpoint(path)
        return params, header
    return load_params(path)


def cmd_gen_data(args) -> int:
    header, insts = make_dataset(args.task, args.count, args.seed, test_count=args.test_count)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, header, insts)
    print(f"wrote {len(insts)} {args.task} instances to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .trainer import build_datasets, pretrain

    config = load_config(args.config, _overrides(args.set))
    train_set, _ = build_datasets(config)
    history = []
    params = pretrain(config, train_set, history=history)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, params, config.pretrain_seed, extra={"config": config.to_dict()})
    for rec in history:
        log.info("step %d heldout_ce %.4f", rec.step, rec.heldout_ce or float("nan"))
    print(f"wrote pretrained params to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run_training

    overrides = _overrides(args.set)
    overrides["algo"] = args.algo
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = load_config(args.config, overrides)
    out = _out_path(args.out or f"runs/{config.task}-{config.algo}-seed{config.seed}")
    init = None
    if args.init:
        init = load_params(args.init)[0].astype(config.torch_dtype)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "config.txt").exists():
        (out / "config.txt").write_text(dump_config(config))
    state = run_training(config, out, init=init, resume=args.resume, cache_dir=args.cache_dir,
                         progress=lambda r: log.info("step %d acc %.3f r_proc %.3f", r.step, r.acc_reward,
                                                     r.r_proc_mean))
    print(f"finished {state.step} outer steps; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import alignment_ratio, evaluate, greedy_traces, intermediate_accuracy_sweep

    params, _ = _load_any_params(args.checkpoint)
    _, tasks = read_dataset(args.dataset, split=args.split)
    if not tasks:
        raise ContractError("dataset split is empty")
    gen_lens = _int_list(args.gen_lens)
    probes = _int_list(args.probe_steps) if args.probe_steps else []
    out = _out_path(args.out)
    rows = evaluate(params, tasks, gen_lens, args.T)
    _write_csv(out / "accuracy.csv", ["task[kind]", "gen_len[tokens]", "accuracy[frac]", "n[count]"],
               [[r["task"], r["gen_len"], _fmt(r["accuracy"]), r["n"]] for r in rows])
    inter_rows, align_rows = [], []
    for gl in gen_lens:
        traces = greedy_traces(params, tasks, gl, args.T)
        if probes:
            sweep = intermediate_accuracy_sweep(params, tasks, probes, args.T, gl, traces=traces)
            for s, acc in sweep["probe"].items():
                inter_rows.append([gl, s, _fmt(acc), _fmt(sweep["full"])])
        if tasks[0].kind != "sudoku4":
            ar = alignment_ratio(tasks, [tr.response for tr in traces])
            align_rows.append([gl, ar["n_correct"], ar["n_aligned"], _fmt(ar["ratio"])])
    _write_csv(out / "intermediate.csv", ["gen_len[tokens]", "probe_step[step]", "accuracy[frac]",
                                          "full_accuracy[frac]"], inter_rows)
    _write_csv(out / "alignment.csv", ["gen_len[tokens]", "n_correct[count]", "n_aligned[count]",
                                       "alignment_ratio[frac]"], align_rows)
    print(f"wrote evaluation reports to {out}")
    return EXIT_OK


def cmd_ablate_n(args) -> int:
    from .trainer import ablate_n

    config = load_config(args.config, _overrides(args.set))
    params, _ = _load_any_params(args.checkpoint)
    if args.dataset:
        _, tasks = read_dataset(args.dataset, split=args.split)
    else:
        from .trainer import build_datasets

        tasks = build_datasets(config)[1]
    rows = ablate_n(params, tasks, config, _int_list(args.n_values), args.trials, args.states, args.seed)
    out = _out_path(args.out)
    _write_csv(out, ["N[continuations]", "std[acc_diff]", "mean[acc_diff]", "trials[count]", "states[count]"],
               [[r["N"], _fmt(r["std"]), _fmt(r["mean"]), r["trials"], r["states"]] for r in rows])
    print(f"wrote variance report to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sapo", description="Step-aware RL for tiny masked diffusion models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a task dataset as JSONL")
    p.add_argument("--task", choices=KINDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="mask-prediction warm start")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="RL training, outcome-only GRPO or SAPO")
    p.add_argument("--config")
    p.add_argument("--algo", choices=("grpo", "sapo"), default="sapo")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--init", help="pretrained params file; pretrains from scratch when omitted")
    p.add_argument("--cache-dir", help="reuse pretrained params keyed by config hash")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, intermediate-probe and alignment reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--gen-lens", default="32")
    p.add_argument("--probe-steps", default="")
    p.add_argument("--T", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-n", help="process-reward spread versus continuation count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--dataset")
    p.add_argument("--split", default=None)
    p.add_argument("--n-values", default="1,3,6,9")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--states", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_n)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
