"""Command-line driver tying the modules into runnable experiments.

Subcommands: train | eval | attack | theory | cost | reduce. Every command
is deterministic given (config, seed, dataset bytes); all run state derives
from named rng streams of the seed. CSV output uses '.' decimals via
repr(), never locale formatting.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

from .analysis import (
    adversarial_curve,
    analog_cost_model,
    cost_model_from_layers,
    filter_similarity,
    write_adversarial_csv,
    write_similarity_csv,
)
from .checkpoint import load_checkpoint, network_init_rng, save_checkpoint
from .config import RunConfig, parse_config
from .network import Network, NetworkConfig, count_parameters, reduce_to_single
from .numcore import SeededRng
from .theory import decomposition_check, random_instance, regularizer_taylor
from .training import evaluate, load_cifar10, lr_at_epoch, train_epoch

__all__ = ["main"]

METRICS_HEADER = ["epoch", "lr", "train_err_pct", "test_err_pct", "similarity_layer1"]


def _load_splits(cfg: RunConfig):
    if not cfg.data:
        raise ValueError("no dataset directory; set --data or 'data' in the config")
    train, test = load_cifar10(cfg.data)
    return train.subset(cfg.subset), test.subset(cfg.test_subset)


def _layer1_similarity(net: Network) -> float:
    if net.banks[0].n_t < 2:
        return math.nan
    return filter_similarity(net.banks[0]).s


def cmd_train(cfg: RunConfig) -> int:
    train, test = _load_splits(cfg)
    tc = cfg.train_config()
    net = Network(cfg.network_config(), network_init_rng(cfg.seed))
    rng = SeededRng(cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    metrics_path = os.path.join(cfg.out, "metrics.csv")
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        f.flush()
        for epoch in range(tc.epochs):
            stats = train_epoch(net, train, tc, rng.derive("train"), epoch, workers=cfg.workers or None)
            test_err = evaluate(
                net, test, rng.derive("eval", epoch), votes=1, workers=cfg.workers or None
            )
            sim = _layer1_similarity(net)
            writer.writerow(
                [epoch, repr(stats["lr"]), repr(stats["train_err_pct"]), repr(test_err), repr(sim)]
            )
            f.flush()
            print(
                f"epoch {epoch:3d}  lr {stats['lr']:.5g}  "
                f"train err {stats['train_err_pct']:6.2f}%  "
                f"test err {test_err:6.2f}%  loss {stats['mean_loss']:.4f}"
            )
            if epoch + 1 < tc.epochs and lr_at_epoch(tc, epoch + 1) != lr_at_epoch(tc, epoch):
                save_checkpoint(
                    os.path.join(cfg.out, f"checkpoint_ep{epoch + 1:04d}.rapa"),
                    net,
                    seed=cfg.seed,
                    epoch=epoch + 1,
                )
    save_checkpoint(os.path.join(cfg.out, "checkpoint.rapa"), net, seed=cfg.seed, epoch=tc.epochs)
    print(f"wrote {metrics_path} and {os.path.join(cfg.out, 'checkpoint.rapa')}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    net, seed, epoch = load_checkpoint(cfg.checkpoint or os.path.join(cfg.out, "checkpoint.rapa"))
    _, test = _load_splits(cfg)
    rng = SeededRng(cfg.seed)
    single = evaluate(net, test, rng.derive("eval"), votes=1, workers=cfg.workers or None)
    voted = evaluate(net, test, rng.derive("eval"), votes=cfg.votes, workers=cfg.workers or None)
    print(f"checkpoint epoch: {epoch} (trained with seed {seed})")
    print(f"single test error: {single:.4f}%")
    print(f"vote({cfg.votes}) test error: {voted:.4f}%")
    reports = {
        i: filter_similarity(bank)
        for i, bank in enumerate(net.banks)
        if bank.n_t >= 2
    }
    if reports:
        os.makedirs(cfg.out, exist_ok=True)
        path = os.path.join(cfg.out, "similarity.csv")
        write_similarity_csv(reports, path)
        for i, rep in sorted(reports.items()):
            print(f"layer {i + 1} similarity S = {rep.s:.4f}")
        print(f"wrote {path}")
    return 0


def cmd_attack(cfg: RunConfig) -> int:
    net, _, _ = load_checkpoint(cfg.checkpoint or os.path.join(cfg.out, "checkpoint.rapa"))
    _, test = _load_splits(cfg)
    votes = cfg.votes if "votes" in cfg.explicit else 1
    curve = adversarial_curve(
        net,
        test,
        cfg.eps_grid,
        SeededRng(cfg.seed).derive("attack"),
        votes=votes,
        workers=cfg.workers or 1,
    )
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "adversarial.csv")
    write_adversarial_csv(curve, path)
    print(f"attacked {curve.n_correct} correctly classified images (votes={votes})")
    for eps, snr, acc in curve.points:
        print(f"eps {eps:6.2f}  snr {snr:8.2f} dB  accuracy {acc:6.2f}%")
    print(f"wrote {path}")
    return 0


def cmd_theory(cfg: RunConfig) -> int:
    rng = SeededRng(cfg.seed).derive("theory")
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "theory.csv")
    worst_gap = 0.0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["instance", "lhs", "rhs", "gap", "r_exact", "r_taylor"])
        for i in range(cfg.theory_instances):
            model, data = random_instance(rng.derive(i))
            chk = decomposition_check(model, data)
            taylor = regularizer_taylor(model, data)
            writer.writerow(
                [i, repr(chk["lhs"]), repr(chk["rhs"]), repr(chk["gap"]),
                 repr(chk["r_exact"]), repr(taylor)]
            )
            worst_gap = max(worst_gap, chk["gap"])
    print(f"{cfg.theory_instances} instances, max decomposition gap {worst_gap:.3e}")
    print(f"wrote {path}")
    return 0


def cmd_cost(cfg: RunConfig) -> int:
    if cfg.cost_layers:
        report = cost_model_from_layers(list(cfg.cost_layers))
    else:
        report = analog_cost_model(cfg.network_config())
    head = f"{'layer':<7}{'n_p':>7}{'k':>7}{'c_out':>7}{'n_t':>5}{'MACs':>12}{'t_untiled':>11}{'t_tiled':>9}{'speedup':>9}"
    print(head)
    for lc in report.layers:
        print(
            f"{lc.name:<7}{lc.n_p:>7}{lc.k:>7}{lc.c_out:>7}{lc.n_t:>5}"
            f"{lc.macs:>12}{lc.time_untiled:>11}{lc.time_tiled:>9}{lc.speedup:>9.3g}"
        )
    print(
        f"{'total':<7}{'':>7}{'':>7}{'':>7}{'':>5}{report.total_macs:>12}"
        f"{report.total_time_untiled:>11}{report.total_time_tiled:>9}"
    )
    print(f"perfect load balance: {'yes' if report.load_balanced else 'no'}")
    return 0


def cmd_reduce(cfg: RunConfig) -> int:
    net, seed, epoch = load_checkpoint(cfg.checkpoint or os.path.join(cfg.out, "checkpoint.rapa"))
    reduced_cfg = NetworkConfig.from_dict(
        {**net.cfg.to_dict(), "scheme": "none", "tiles": (1, 1, 1)}
    )
    reduced = Network(reduced_cfg, network_init_rng(seed))
    state = reduced.parameters()
    for i, bank in enumerate(net.banks):
        kernel = reduce_to_single(bank)
        state[f"conv{i}.tile0.weight"][...] = kernel.weights
        state[f"conv{i}.tile0.bias"][...] = kernel.bias
    for name, arr in net.parameters().items():
        if name.startswith("fc.") or name.startswith("pool"):
            state[name][...] = arr
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "checkpoint_reduced.rapa")
    save_checkpoint(path, reduced, seed=seed, epoch=epoch)
    print(
        f"reduced conv parameters {count_parameters(net.cfg)} -> "
        f"{count_parameters(reduced_cfg)} (max-norm filter selection)"
    )
    if cfg.data:
        _, test = _load_splits(cfg)
        err = evaluate(reduced, test, SeededRng(cfg.seed).derive("eval"), votes=1,
                       workers=cfg.workers or None)
        print(f"reduced single test error: {err:.4f}%")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "theory": cmd_theory,
    "cost": cmd_cost,
    "reduce": cmd_reduce,
}

_FLAGS = (
    # (flag, config key, help)
    ("--config", None, "key = value config file"),
    ("--seed", "seed", "master seed"),
    ("--data", "data", "dataset directory (CIFAR-10 binary batches)"),
    ("--out", "out", "output directory"),
    ("--workers", "workers", "worker cap (0 = automatic)"),
    ("--subset", "subset", "train-split subset size (0 = full)"),
    ("--test-subset", "test_subset", "test-split subset size (0 = full)"),
    ("--tiles", "tiles", "tiles per conv layer, e.g. 16,4,1"),
    ("--scheme", "scheme", "tiling scheme name"),
    ("--pooling", "pooling", "pooling kind for the first two pools"),
    ("--votes", "votes", "majority-vote count"),
    ("--channels", "channels", "conv output channels, e.g. 32,32,64"),
    ("--classes", "classes", "number of classes"),
    ("--lr", "lr", "base learning rate"),
    ("--lr-gamma", "lr_gamma", "anneal factor per 25 epochs"),
    ("--warmup", "warmup", "warm-up epochs at lr/50"),
    ("--epochs", "epochs", "training epochs"),
    ("--batch", "batch", "mini-batch size"),
    ("--checkpoint", "checkpoint", "checkpoint path (eval/attack/reduce)"),
    ("--eps-grid", "eps_grid", "attack strengths on the 0-255 scale, e.g. 0,2,8,33"),
    ("--instances", "theory_instances", "number of random theory instances"),
    ("--cost-layers", "cost_layers", "explicit 'n_p,k,c_out,n_t;...' layer list"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rapa",
        description="Replicated-array (RAPA) convolution simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        for flag, key, help_text in _FLAGS:
            p.add_argument(flag, dest=key or "config", type=str, default=None, help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key)
        for _, key, _ in _FLAGS
        if key is not None and getattr(args, key) is not None
    }
    try:
        cfg = parse_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
