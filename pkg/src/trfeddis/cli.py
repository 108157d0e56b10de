"""Command-line entry point.

    trfeddis train --config cfg.json [--seed N] [--out DIR]
    trfeddis eval --checkpoint client0.ckpt --config cfg.json
    trfeddis ablate --config cfg.json --variants backbone,dis,dis+un,full
    trfeddis ood --checkpoint client0.ckpt --sigma 1.5
    trfeddis dump-embeddings --checkpoint client0.ckpt [--out emb.csv]

Exit status: 0 on success, 1 for configuration or usage errors, 2 for
anything that goes wrong at run time.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import corrupt_gaussian
from .federation import VARIANTS, load_datasets, run_experiment, strategy_of
from .metrics import dump_embeddings, evaluate, ood_separation
from .persist import checkpoint_read, write_csv
from .specfun import RngStream

log = logging.getLogger("trfeddis")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trfeddis", description="Federated training with disentangled heads and evidential fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run every configured seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="run this seed only")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.add_argument("--workers", type=int)

    e = sub.add_parser("eval", help="score a client checkpoint on its test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)

    a = sub.add_parser("ablate", help="train each ablation variant")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="backbone,dis,dis+un,full")
    a.add_argument("--out")
    a.add_argument("--workers", type=int)

    o = sub.add_parser("ood", help="uncertainty on clean vs Gaussian-corrupted test inputs")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--sigma", type=float, default=1.5)
    o.add_argument("--config", help="override the config stored in the checkpoint")
    o.add_argument("--out", help="CSV of per-sample uncertainties (default: next to the checkpoint)")

    d = sub.add_parser("dump-embeddings", help="write hidden features of the client's test split")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config")
    d.add_argument("--out")
    return p


def _client_test(checkpoint, config_path=None):
    model, meta = checkpoint_read(checkpoint)
    if config_path:
        cfg = load_config(config_path)
    elif "config" in meta:
        cfg = ExperimentConfig.from_dict(meta["config"])
    else:
        raise ConfigError(f"{checkpoint}: no config recorded; pass --config")
    seed, cid = int(meta.get("seed", cfg.seeds[0])), int(meta.get("client_id", 0))
    datasets = load_datasets(cfg, seed)
    if cid >= len(datasets):
        raise ConfigError(f"checkpoint client {cid} not present in config ({len(datasets)} clients)")
    return model, meta, cfg, datasets[cid].test, seed, cid


def _print_result(prefix, res):
    print(f"{prefix} acc_fused={res.acc_fused:.4f} acc_global={res.acc_global:.4f} acc_local={res.acc_local:.4f} mean_u={res.mean_u:.4f}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    out = args.out or cfg.output_dir
    res = run_experiment(cfg, seeds=seeds, out_dir=out, workers=args.workers, progress=_progress)
    for key, (m, s) in res.summary["mean_std"].items():
        print(f"{key} mean={m:.4f} std={s:.4f}")
    print(f"wrote {out}")
    return 0


def _progress(seed, rep):
    acc = np.mean([r["test"]["acc_fused"] for r in rep.clients])
    log.info("seed %d round %d acc %.4f", seed, rep.round, acc)


def cmd_eval(args) -> int:
    model, _, cfg, test, _, cid = _client_test(args.checkpoint, args.config)
    res = evaluate(model, test, strategy_of(cfg).decision, cfg.eval_batch_size)
    _print_result(f"client={cid}", res)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown or not names:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    out = Path(args.out or cfg.output_dir)
    rows = []
    for name in names:
        vcfg = variant_config(cfg, name)
        res = run_experiment(vcfg, out_dir=out / name.replace("+", "_"), workers=args.workers, progress=_progress)
        m, s = res.summary["mean_std"]["acc_fused"]
        rows.append({"variant": name, "acc_mean": m, "acc_std": s, "mean_u": res.summary["mean_std"]["mean_u"][0]})
        print(f"{name} acc={m:.4f} std={s:.4f}")
    write_csv(out / "ablation_summary.csv", ("variant", "acc_mean", "acc_std", "mean_u"), rows)
    print(f"wrote {out / 'ablation_summary.csv'}")
    return 0


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    st = VARIANTS[name]
    return cfg.replace(
        strategy=st.name,
        ablation={"enable_dis": st.enable_dis, "enable_un": st.enable_un, "enable_ce": st.enable_ce},
    )


def cmd_ood(args) -> int:
    model, _, cfg, test, seed, cid = _client_test(args.checkpoint, args.config)
    decision = strategy_of(cfg).decision
    clean = evaluate(model, test, decision, cfg.eval_batch_size)
    noisy_in = corrupt_gaussian(test.inputs, args.sigma, RngStream.keyed(seed, "ood", cid))
    noisy = evaluate(model, test.with_inputs(noisy_in), decision, cfg.eval_batch_size)
    auc = ood_separation(clean.u, noisy.u)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".ood.csv")
    rows = [("clean", float(u)) for u in clean.u] + [("noisy", float(u)) for u in noisy.u]
    write_csv(out, ("split", "u"), rows)
    print(f"client={cid} sigma={args.sigma} auroc={auc:.4f} mean_u_clean={clean.mean_u:.4f} mean_u_noisy={noisy.mean_u:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_dump(args) -> int:
    model, _, _, test, _, cid = _client_test(args.checkpoint, args.config)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".emb.csv")
    dump_embeddings(model, test, out, client_id=cid)
    print(f"wrote {out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "ood": cmd_ood, "dump-embeddings": cmd_dump}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a run-time failure
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
