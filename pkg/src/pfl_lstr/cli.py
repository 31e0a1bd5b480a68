"""Command line: gen-data | train | eval | compare | grad-check.

Exit codes: 0 success, 1 usage, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .experiments import (PRESETS, VARIANTS, ConfigError, ExperimentConfig, benchmark_clients,
                          compare, dump_config, load_config, render_report, report_row)
from .federation import (load_run, make_client, run_fedavg_baseline, run_local_baseline,
                         run_training, save_run, write_log, read_log)
from .gradcheck import check_gradients
from .metrics import evaluate
from .synth import (ablate_rear_view, benchmark_styles, generate_client_dataset, load_dataset,
                    random_style, save_dataset, split_train_test)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file overriding preset values")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base settings (default: desk)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output path (file or directory, per subcommand)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pfl-lstr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic client datasets")
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--sequences", type=int, help="sequences per client (default from config)")
    p.add_argument("--out-dir", type=Path, help="directory for client_<id>.txt (default --out)")
    p.add_argument("--fp-rates", type=_csv_list(float), help="comma list, one per client")

    p = sub.add_parser("train", parents=[common], help="train one variant, write log and checkpoints")
    p.add_argument("--variant", choices=VARIANTS, default="pfl-lstr")
    p.add_argument("--data-dir", type=Path, help="load client_*.txt instead of generating")
    p.add_argument("--resume", type=Path, help="run directory to resume (pfl variants)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained run on test splits")
    p.add_argument("--run", type=Path, required=True, help="directory written by train")
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("compare", parents=[common], help="train and evaluate variants over seeds")
    p.add_argument("--variants", type=_csv_list(str), default=list(VARIANTS))
    p.add_argument("--seeds", type=_csv_list(int), help="comma list (default: --seed)")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("grad-check", parents=[common], help="autodiff vs finite differences")
    p.add_argument("--instances", type=int, default=1, help="random models, seeds from --seed")
    return parser


# ------------------------------------------------------------------ helpers

def _config(args) -> ExperimentConfig:
    base = PRESETS[args.preset]()
    cfg = load_config(args.config, base) if args.config else base
    return cfg.with_seed(args.seed)


def _load_datasets(directory: Path, cfg: ExperimentConfig):
    files = sorted(directory.glob("client_*.txt"))
    if not files:
        raise ConfigError(f"no client_*.txt files in {directory}")
    datasets = [load_dataset(f) for f in files]
    for d in datasets:
        if d.feature_dim != cfg.model.feature_dim:
            raise ConfigError(f"client {d.client_id}: feature_dim {d.feature_dim} != model "
                              f"feature_dim {cfg.model.feature_dim}")
    return datasets


def _datasets(args, cfg):
    if getattr(args, "data_dir", None):
        return _load_datasets(args.data_dir, cfg)
    return benchmark_clients(cfg, cfg.federation.seed)


def _emit(text: str, out):
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out_dir = args.out_dir or Path(args.out or "data")
    if args.clients < 1:
        raise ConfigError("--clients must be >= 1")
    if args.fp_rates is not None and len(args.fp_rates) != args.clients:
        raise ConfigError(f"--fp-rates needs {args.clients} values, got {len(args.fp_rates)}")
    n = args.sequences or cfg.data.sequences
    standard = benchmark_styles(cfg.data.noise)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.clients):
        style = standard[i] if i < len(standard) else random_style(i, args.seed, cfg.data.noise)
        if args.fp_rates is not None:
            style = replace(style, false_positive_rate=args.fp_rates[i])
        ds = generate_client_dataset(style, n, args.seed, cfg.model.feature_dim,
                                     cfg.sequence_length, cfg.memory.fps)
        ds = split_train_test(ds, cfg.data.train_ratio, args.seed)
        path = out_dir / f"client_{i}.txt"
        save_dataset(ds, path)
        print(f"{path}\t{len(ds)} sequences\tfingerprint {ds.fingerprint()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    datasets = _datasets(args, cfg)
    if args.variant == "pfl-lstr-2cams":
        datasets = [ablate_rear_view(d) for d in datasets]
    clients = [make_client(d, cfg.memory) for d in datasets]
    fed, model, mem = cfg.federation, cfg.model, cfg.memory
    (out / "config.ini").write_text(dump_config(cfg))
    (out / "run.json").write_text(json.dumps({"variant": args.variant, "seed": args.seed}) + "\n")

    if args.variant in ("pfl-lstr", "pfl-lstr-2cams"):
        server, previous = None, []
        if args.resume:
            server, _, _, _ = load_run(args.resume, clients)
            if (args.resume / "log.jsonl").exists():
                previous = [r for r in read_log(args.resume / "log.jsonl")
                            if r["round"] <= server.round]

        def checkpoint_round(srv, cls):
            save_run(out, srv, cls, fed, model)

        res = run_training(fed, model, clients, mem, server=server, on_round=checkpoint_round)
        save_run(out, res.server, clients, fed, model)
        records = previous + res.log
    elif args.variant == "fedavg":
        res = run_fedavg_baseline(fed, model, clients, mem)
        checkpoint.save(res.encoder.merge(res.decoders[clients[0].client_id]), out / "global.pfll")
        records = res.log
    else:
        results = run_local_baseline(fed, model, clients, mem)
        records = []
        for cid, (params, recs) in results.items():
            checkpoint.save(params, out / f"local_{cid}.pfll")
            records += recs
    write_log(records, out / "log.jsonl")
    print(f"wrote {out / 'log.jsonl'} ({len(records)} records)")
    return EXIT_OK


def _run_models(run: Path, client_ids):
    meta = json.loads((run / "run.json").read_text())
    variant = meta["variant"]
    if variant in ("pfl-lstr", "pfl-lstr-2cams"):
        server, decoders, _, _ = load_run(run)
        return variant, meta, {cid: server.encoder.merge(decoders[cid]) for cid in client_ids}
    if variant == "fedavg":
        params = checkpoint.load(run / "global.pfll")
        return variant, meta, {cid: params for cid in client_ids}
    return variant, meta, {cid: checkpoint.load(run / f"local_{cid}.pfll") for cid in client_ids}


def cmd_eval(args) -> int:
    run = args.run
    if not (run / "run.json").exists():
        raise ConfigError(f"{run} is not a run directory (missing run.json)")
    base = load_config(run / "config.ini", PRESETS[args.preset]())
    cfg = load_config(args.config, base) if args.config else base
    meta = json.loads((run / "run.json").read_text())
    cfg = cfg.with_seed(meta["seed"])
    datasets = (_load_datasets(args.data_dir, cfg) if args.data_dir
                else benchmark_clients(cfg, meta["seed"]))
    variant, meta, models = _run_models(run, [d.client_id for d in datasets])
    if variant == "pfl-lstr-2cams":
        datasets = [ablate_rear_view(d) for d in datasets]
    rows = [report_row(evaluate(models[d.client_id], d, cfg.memory, cfg.model), variant,
                       d.client_id, meta["seed"]) for d in datasets]
    _emit(render_report(rows, args.format), args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    seeds = args.seeds or [args.seed]
    table = compare(cfg, args.variants, seeds)
    _emit(render_report(table, args.format), args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    worst = 0.0
    for k in range(args.instances):
        res = check_gradients(args.seed + k)
        worst = max(worst, res["max_rel_error"])
        print(f"seed {args.seed + k}: max relative gradient error {res['max_rel_error']:.3e} "
              f"({res['checked']} coordinates, {res['params']} parameters)")
    print(f"max relative gradient error: {worst:.3e}")
    return EXIT_OK if worst <= GRAD_TOLERANCE else EXIT_RUNTIME


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
