"""Command-line entry point: ``localdrop {train,eval,bound,mask-stats}``.

Exit codes: 0 success, 2 invalid configuration, 3 training diverged,
4 data or I/O failure.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .bound import network_bound, reg_value
from .config import DEFAULT_SUBSET, build_model, load_config
from .data import DataFormatError, load_cifar10_binary, load_csv, load_idx, preprocess
from .drop import DropBlockParams, cover_counts, exact_keep_prob_matrix, keep_prob_matrix, sample_dropblock_mask
from .io import ContainerError, MetricsWriter, load_weights, save_weights, write_manifest
from .net import loss, onehot, forward_expected
from .optim import ConfigError, TrainingDivergedError, error_pct, input_bound, train_two_stage

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# flag -> config key
FLAG_KEYS = {
    "dataset_kind": "dataset_kind", "train_images": "train_images", "train_labels": "train_labels",
    "test_images": "test_images", "test_labels": "test_labels", "model": "model",
    "subset_size": "subset_size", "test_subset_size": "test_subset_size", "out": "output_dir",
    "gcn": "gcn", "zca": "zca", "zca_eps": "zca_eps", "block_size": "block_size", "keep_init": "keep_init",
    "lam": "lambda", "m": "m", "h": "h", "k1": "k1", "lr0": "lr0", "lr_halving_period": "lr_halving_period",
    "epochs": "epochs", "batch_size": "batch_size", "theta_lr": "theta_lr", "theta_batch": "theta_batch",
    "seed": "seed", "drops": "drops", "d_init": "d_init", "drop_rate_max": "drop_rate_max",
    "conv_h": "conv_h", "delta": "delta", "record_wall_time": "record_wall_time", "backend": "backend",
}


def _add_data_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset-kind", choices=("idx", "cifar10-binary", "csv"))
    p.add_argument("--train-images")
    p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--subset-size", type=int)
    p.add_argument("--test-subset-size", type=int)
    p.add_argument("--gcn", choices=("true", "false"))
    p.add_argument("--zca", choices=("true", "false"))
    p.add_argument("--zca-eps", type=float)
    p.add_argument("--backend", choices=("python", "cython"))


def _add_train_flags(p):
    p.add_argument("--model", help="fcn-small, zhai-cnn or a JSON network spec")
    p.add_argument("--out", help="output directory")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--m", type=int, help="projection period in epochs")
    p.add_argument("--h", type=int, help="number of leading singular values left untouched")
    p.add_argument("--k1", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-halving-period", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--theta-lr", type=float)
    p.add_argument("--theta-batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--drops", choices=("true", "false"))
    p.add_argument("--d-init", type=float)
    p.add_argument("--drop-rate-max", type=float)
    p.add_argument("--block-size", type=int)
    p.add_argument("--keep-init", type=float)
    p.add_argument("--conv-h", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--record-wall-time", choices=("true", "false"))


def build_parser():
    parser = argparse.ArgumentParser(prog="localdrop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"localdrop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics.csv, weights and a manifest")
    _add_data_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="test error and loss of a saved weight file")
    p.add_argument("weights")
    _add_data_flags(p)

    p = sub.add_parser("bound", help="evaluate the complexity bound for a saved weight file")
    p.add_argument("weights")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--n", type=int, help="sample count (default: training set size)")
    p.add_argument("--B", type=float, help="input norm bound (default: max over training inputs)")
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--no-drop", action="store_true", help="fix every keep norm at 1")
    _add_data_flags(p)

    p = sub.add_parser("mask-stats", help="Monte Carlo check of DropBlock keep probabilities")
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--block-size", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=("python", "cython"))
    return parser


def _overrides(args):
    out = {}
    for attr, key in FLAG_KEYS.items():
        if hasattr(args, attr) and getattr(args, attr) is not None:
            out[key] = getattr(args, attr)
    return out


def _load_split(run, which):
    images = getattr(run, f"{which}_images")
    labels = getattr(run, f"{which}_labels")
    if images is None:
        return None
    if run.dataset_kind == "idx":
        if labels is None:
            raise ConfigError(f"{which}_labels is required for idx datasets")
        return load_idx(images, labels)
    if run.dataset_kind == "cifar10-binary":
        return load_cifar10_binary(images)
    return load_csv(images)


def load_data(run, input_shape=None):
    train = _load_split(run, "train")
    train = train.subset(run.subset_size if run.subset_size else min(DEFAULT_SUBSET, len(train)))
    test = _load_split(run, "test")
    if test is not None and run.test_subset_size:
        test = test.subset(min(run.test_subset_size, len(test)))
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if run.gcn or run.zca:
        train, test = preprocess(train, test, gcn_on=run.gcn, zca_on=run.zca, zca_eps=run.zca_eps)
    if input_shape is not None:
        train = train.reshaped(input_shape)
        test = None if test is None else test.reshaped(input_shape)
    return train, test


def _state_summary(net, states):
    out = {}
    for idx in net.drop_sites:
        s = states[idx] if states is not None else None
        if s is None:
            continue
        if isinstance(s, DropBlockParams):
            out[str(idx)] = {"d": s.d, "gamma": s.gamma}
        else:
            out[str(idx)] = {"theta_mean": float(np.mean(s.theta)), "theta_min": float(np.min(s.theta))}
    return out


def cmd_train(args):
    run = load_config(args.config, _overrides(args)).validate()
    _backend.get_kernels(run.backend)
    train, test = load_data(run)
    net = build_model(run, train.x.shape[1:], train.num_classes)
    if not run.train.drops:
        net = net.without_drops()
    train = train.reshaped(net.input_shape)
    test = None if test is None else test.reshaped(net.input_shape)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": run.to_dict(),
        "seed": run.train.seed,
        "backend": run.backend or _backend.BACKEND,
        "network": net.to_dict(),
        "n_train": len(train),
        "n_test": 0 if test is None else len(test),
        "status": "running",
    }
    write_manifest(out / "manifest.json", manifest)
    with MetricsWriter(out / "metrics.csv") as writer:
        def log(row, state):
            writer.write(row)
            print(f"epoch {row.epoch:4d}  loss {row.train_loss:.5f}  train {row.train_error_pct:6.2f}%  "
                  f"test {row.test_error_pct:6.2f}%  reg {row.reg_value:.4g}  bound {row.bound_total:.4g}", flush=True)

        try:
            state = train_two_stage(run.train, net, train, test, callback=log, backend=run.backend)
        except TrainingDivergedError as exc:
            manifest.update(status="diverged", diverged_epoch=exc.epoch)
            write_manifest(out / "manifest.json", manifest)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    save_weights(out / "weights.ldw", net, state.weights, state.keep_states,
                 extra={"epoch": state.epoch, "seed": run.train.seed})
    manifest.update(status="completed", epochs=state.epoch, projections=state.projections,
                    keep_states=_state_summary(net, state.keep_states))
    write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


def _eval_data(args, net):
    run = load_config(args.config, _overrides(args))
    if run.train_images is None and run.test_images is None:
        raise ConfigError("pass --train-images or --test-images (or a config naming them)")
    if run.test_images is None:
        run.test_images, run.test_labels = run.train_images, run.train_labels
    if run.train_images is None:
        run.train_images, run.train_labels = run.test_images, run.test_labels
    return load_data(run, net.input_shape)


def cmd_eval(args):
    net, weights, states, _ = load_weights(args.weights)
    _, test = _eval_data(args, net)
    out, _ = forward_expected(net, weights, states, test.x)
    report = {
        "n": len(test),
        "loss": loss(out, onehot(test.y, net.num_classes)),
        "error_pct": error_pct(net, weights, states, test.x, test.y),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_bound(args):
    net, weights, states, _ = load_weights(args.weights)
    n, B = args.n, args.B
    if n is None or B is None:
        train, _ = _eval_data(args, net)
        n = len(train) if n is None else n
        B = input_bound(train.x) if B is None else B
    drop = not args.no_drop
    rep = network_bound(net, weights, states, args.h, n, B, delta=[args.delta] * net.depth, drop=drop)
    reg, terms = reg_value(net, weights, states, args.h, drop=drop)
    out = {
        "total": rep.total, "term_const": rep.term_const, "term_product": rep.term_product,
        "term_sum": rep.term_sum, "factors": [float(f) for f in rep.factors],
        "reg_value": reg, "reg_terms": terms, "n": n, "B": B, "h": args.h,
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_mask_stats(args):
    params = DropBlockParams(args.d, args.block_size, args.t)
    rng = np.random.default_rng(args.seed)
    masks = sample_dropblock_mask(params, args.samples, rng, backend=args.backend)
    freq = masks.mean(axis=0)
    exact = exact_keep_prob_matrix(params)
    se = np.sqrt(exact * (1 - exact) / args.samples)
    z = np.where(se > 0, np.abs(freq - exact) / np.where(se > 0, se, 1), 0.0)
    out = {
        "d": params.d, "b": params.b, "t": list(params.t), "gamma": params.gamma, "samples": args.samples,
        "drop_fraction": float(1 - freq.mean()),
        "max_abs_z_vs_exact": float(z.max()),
        "frac_within_3se": float(np.mean(z <= 3)),
        "max_gap_additive_vs_exact": float(np.max(np.abs(keep_prob_matrix(params, warn=False) - exact))),
        "cover_count_min": int(cover_counts(params.b, params.t).min()),
        "cover_count_max": int(cover_counts(params.b, params.t).max()),
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bound": cmd_bound, "mask-stats": cmd_mask_stats}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if isinstance(exc, (DataFormatError, ContainerError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
