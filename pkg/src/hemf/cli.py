"""Command-line experiment runner.

Subcommands: ``synth``, ``split``, ``fit``, ``stream``, ``predict``,
``eval``.  Options may also come from a ``key=value`` config file
(``--config``); explicit flags win over file values.

``--mode`` bundles the update-formula switches:

- ``recomputed`` (default): printed component updates, streaming globals
  recomputed from running statistics
- ``printed``: printed component updates and printed streaming recurrences
- ``conjugate``: standard normal-inverse-Wishart component updates,
  recomputed streaming globals

Exit codes: 0 success, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .baselines import SgdModel, fit_sgd, sgd_process_chunk
from .batch import FitConfig, fit_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (RunLogger, SplitSpec, chunk_stream, parse_ratings, rmse,
                   split_dataset)
from .errors import (CheckpointError, DataFormatError, DegenerateSplitError,
                     DivergenceError, HemfError, NonFiniteError,
                     NotPositiveDefiniteError)
from .model import (Hyperparameters, SparseRatings, predict_pairs,
                    sample_from_model)
from .online import OnlineConfig, stream_fit

logger = logging.getLogger(__name__)

DATA_ERRORS = (DataFormatError, DegenerateSplitError, CheckpointError,
               FileNotFoundError, IsADirectoryError)
NUMERICAL_ERRORS = (NotPositiveDefiniteError, NonFiniteError, DivergenceError)

_DEFAULTS = {
    "format": "csv", "seed": 0, "latent_dim": 8, "d_init": 1, "k_init": 1,
    "mode": "recomputed", "max_sweeps": 200, "tol": 1e-6, "chunk_size": 30,
    "sigma": 0.5, "density": 0.1, "d_true": 3, "k_true": 2,
    "users": 300, "items": 200, "fraction": 0.9, "folds": 5, "fold": 0,
    "split_mode": "holdout", "algorithm": "ovb", "sgd_epochs": 10,
    "propagation": 0, "evb_every": 10,
}


def _resolve(args, file_config):
    """Effective option values: explicit flag > config file > default."""
    out = {}
    for key, default in _DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_config:
            out[key] = type(default)(file_config[key])
        else:
            out[key] = default
    return out


def _read_config_file(path):
    if path is None:
        return {}
    config = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(
                    f"config line {line_no}: expected key=value, got {raw!r}",
                    line_number=line_no)
            key, value = line.split("=", 1)
            config[key.strip().replace("-", "_")] = value.strip()
    return config


def _mode_switches(mode):
    if mode == "recomputed":
        return "printed", "recomputed"
    if mode == "printed":
        return "printed", "printed"
    if mode == "conjugate":
        return "conjugate", "recomputed"
    raise ValueError(f"unknown --mode {mode!r} (printed|recomputed|conjugate)")


def _parse_clamp(text):
    if text is None:
        return None
    lo, hi = (float(tok) for tok in text.split(","))
    return lo, hi


def _write_ratings_csv(ratings, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, v in zip(ratings.users, ratings.items, ratings.values):
            lu = ratings.user_labels[u] if ratings.user_labels else u
            li = ratings.item_labels[i] if ratings.item_labels else i
            fh.write(f"{lu},{li},{v:.17g}\n")


def _joint_parse(train_path, test_path, fmt):
    """Parse train and optional test with one shared label mapping."""
    train_raw = parse_ratings(train_path, fmt)
    if test_path is None:
        return train_raw, None
    test_raw = parse_ratings(test_path, fmt)
    users = {label: idx for idx, label in enumerate(train_raw.user_labels)}
    items = {label: idx for idx, label in enumerate(train_raw.item_labels)}
    for label in test_raw.user_labels:
        users.setdefault(label, len(users))
    for label in test_raw.item_labels:
        items.setdefault(label, len(items))
    n_users, n_items = len(users), len(items)
    user_labels = list(users)
    item_labels = list(items)

    def remap(raw):
        uu = np.array([users[raw.user_labels[u]] for u in raw.users], dtype=np.int64)
        ii = np.array([items[raw.item_labels[i]] for i in raw.items], dtype=np.int64)
        return SparseRatings(n_users, n_items, uu, ii, raw.values,
                             user_labels=user_labels, item_labels=item_labels)

    return remap(train_raw), remap(test_raw)


def _log_rmses(state, logval, train, test, clamp):
    tr = rmse(predict_pairs(state, train.users, train.items, clamp), train) \
        if len(train) else None
    te = rmse(predict_pairs(state, test.users, test.items, clamp), test) \
        if test is not None and len(test) else None
    logval["train_rmse"] = tr
    logval["test_rmse"] = te
    return tr, te


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, opts):
    hyper = Hyperparameters.default(opts["latent_dim"],
                                    sigma2=opts["sigma"] ** 2,
                                    lambda0=args.spread)
    ratings, truth = sample_from_model(
        hyper, opts["d_true"], opts["k_true"], opts["users"], opts["items"],
        opts["density"], opts["seed"])
    _write_ratings_csv(ratings, args.out)
    if args.labels_out:
        payload = {"user_labels": truth.user_labels.tolist(),
                   "item_labels": truth.item_labels.tolist(),
                   "user_weights": truth.user_weights.tolist(),
                   "item_weights": truth.item_weights.tolist()}
        with open(args.labels_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
    print(f"wrote {len(ratings)} ratings "
          f"({opts['users']}x{opts['items']}) to {args.out}")
    return 0


def cmd_split(args, opts):
    ratings = parse_ratings(args.input, opts["format"])
    spec = SplitSpec(mode=opts["split_mode"], fraction=opts["fraction"],
                     n_folds=opts["folds"], fold=opts["fold"],
                     seed=opts["seed"])
    train, test = split_dataset(ratings, spec)
    _write_ratings_csv(train, args.train_out)
    _write_ratings_csv(test, args.test_out)
    print(f"split {len(ratings)} entries into {len(train)} train / "
          f"{len(test)} test")
    return 0


def cmd_fit(args, opts):
    community_update, _ = _mode_switches(opts["mode"])
    train, test = _joint_parse(args.train, args.test, opts["format"])
    hyper = Hyperparameters.default(opts["latent_dim"])
    clamp = _parse_clamp(args.clamp)
    run_log = RunLogger(timing=not args.no_timing)

    def on_sweep(state, sweep):
        row = {}
        _log_rmses(state, row, train, test, clamp)
        run_log.log("fit", sweep, elbo=state.elbo_trace[-1],
                    train_rmse=row["train_rmse"], test_rmse=row["test_rmse"],
                    D=state.users.n_components, K=state.items.n_components)

    config = FitConfig(d_init=opts["d_init"], k_init=opts["k_init"],
                       seed=opts["seed"], max_sweeps=opts["max_sweeps"],
                       tol=opts["tol"], community_update=community_update,
                       evb=args.evb, on_sweep=on_sweep)
    state = fit_batch(train, hyper, config)
    if args.metrics_out:
        run_log.write_csv(args.metrics_out)
    if args.summary_out:
        run_log.write_summary(args.summary_out, converged=state.converged,
                              seed=opts["seed"], mode=opts["mode"])
    if args.checkpoint_out:
        save_checkpoint(state, args.checkpoint_out)
    if args.mapping_out:
        with open(args.mapping_out, "w", encoding="utf-8") as fh:
            json.dump({"user_labels": train.user_labels,
                       "item_labels": train.item_labels}, fh)
    final = {}
    _log_rmses(state, final, train, test, clamp)
    print(f"fit: {len(state.elbo_trace) - 1} recorded bounds, "
          f"converged={state.converged}, elbo={state.elbo_trace[-1]:.6g}, "
          f"train_rmse={final['train_rmse']}, test_rmse={final['test_rmse']}")
    return 0


def cmd_stream(args, opts):
    community_update, online_globals = _mode_switches(opts["mode"])
    train, test = _joint_parse(args.train, args.test, opts["format"])
    clamp = _parse_clamp(args.clamp)
    chunks = chunk_stream(train, opts["chunk_size"], opts["seed"])
    run_log = RunLogger(timing=not args.no_timing)

    if opts["algorithm"] == "sgd":
        model = SgdModel.init(train.n_users, train.n_items,
                              opts["latent_dim"], seed=opts["seed"])
        for idx, chunk in enumerate(chunks):
            model = sgd_process_chunk(chunk, model)
            te = rmse(model.predict(test.users, test.items, clamp), test) \
                if test is not None and len(test) else None
            run_log.log("sgd", idx, test_rmse=te)
        if args.metrics_out:
            run_log.write_csv(args.metrics_out)
        if args.summary_out:
            run_log.write_summary(args.summary_out, algorithm="sgd",
                                  seed=opts["seed"])
        last = run_log.rows[-1]["test_rmse"] if run_log.rows else None
        print(f"sgd stream: {len(chunks)} chunks, test_rmse={last}")
        return 0

    from .model import init_state
    hyper = Hyperparameters.default(opts["latent_dim"])
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        state = init_state(train, hyper, opts["d_init"], opts["k_init"],
                           opts["seed"], community_update=community_update)
    config = OnlineConfig(online_globals=online_globals,
                          spawn=not args.no_spawn, merge=not args.no_merge,
                          propagation_sweeps=opts["propagation"],
                          evb=args.evb, evb_every=opts["evb_every"])

    def on_chunk(state, idx, history):
        row = {}
        _log_rmses(state, row, train, test, clamp)
        run_log.log("stream", idx, train_rmse=row["train_rmse"],
                    test_rmse=row["test_rmse"],
                    D=state.users.n_components, K=state.items.n_components)

    state, _ = stream_fit(chunks, state, config=config, on_chunk=on_chunk)
    if args.metrics_out:
        run_log.write_csv(args.metrics_out)
    if args.summary_out:
        run_log.write_summary(args.summary_out, algorithm="ovb",
                              seed=opts["seed"], mode=opts["mode"])
    if args.checkpoint_out:
        save_checkpoint(state, args.checkpoint_out)
    final = {}
    _log_rmses(state, final, train, test, clamp)
    print(f"ovb stream: {len(chunks)} chunks, D={state.users.n_components}, "
          f"K={state.items.n_components}, test_rmse={final['test_rmse']}")
    return 0


def _load_mapping(path):
    if path is None:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return ({label: idx for idx, label in enumerate(payload["user_labels"])},
            {label: idx for idx, label in enumerate(payload["item_labels"])})


def cmd_predict(args, opts):
    state = load_checkpoint(args.checkpoint)
    mapping = _load_mapping(args.mapping)
    clamp = _parse_clamp(args.clamp)
    pairs = []
    with open(args.pairs, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataFormatError(f"line {line_no}: expected 'user,item'",
                                      line_number=line_no)
            if mapping:
                pairs.append((mapping[0][parts[0]], mapping[1][parts[1]]))
            else:
                pairs.append((int(parts[0]), int(parts[1])))
    users = np.array([p[0] for p in pairs], dtype=np.int64)
    items = np.array([p[1] for p in pairs], dtype=np.int64)
    preds = predict_pairs(state, users, items, clamp)
    out = sys.stdout if args.out is None else open(args.out, "w", encoding="utf-8")
    try:
        for (u, i), p in zip(pairs, preds):
            out.write(f"{u},{i},{p:.6f}\n")
    finally:
        if args.out is not None:
            out.close()
    return 0


def cmd_eval(args, opts):
    state = load_checkpoint(args.checkpoint)
    mapping = _load_mapping(args.mapping)
    test = parse_ratings(args.test, opts["format"])
    clamp = _parse_clamp(args.clamp)
    if mapping:
        users = np.array([mapping[0][test.user_labels[u]] for u in test.users])
        items = np.array([mapping[1][test.item_labels[i]] for i in test.items])
    else:
        users = np.array([int(test.user_labels[u]) for u in test.users])
        items = np.array([int(test.item_labels[i]) for i in test.items])
    preds = predict_pairs(state, users, items, clamp)
    score = rmse(preds, test)
    print(f"test_rmse={score:.6f} over {len(test)} entries")
    if args.summary_out:
        with open(args.summary_out, "w", encoding="utf-8") as fh:
            json.dump({"test_rmse": score, "n_test": len(test)}, fh)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--format", choices=("csv", "double_colon", "per_item_files"))
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="hemf", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic rating matrix")
    _add_common(p)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--d-true", dest="d_true", type=int)
    p.add_argument("--k-true", dest="k_true", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--spread", type=float, default=25.0,
                   help="scale of the component-mean prior used for sampling")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out", dest="labels_out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="train/test split of a rating file")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--split-mode", dest="split_mode",
                   choices=("holdout", "weak_generalization", "kfold"))
    p.add_argument("--fraction", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--train-out", dest="train_out", required=True)
    p.add_argument("--test-out", dest="test_out", required=True)
    p.set_defaults(func=cmd_split)

    def add_fit_options(p, streaming):
        _add_common(p)
        p.add_argument("--train", required=True)
        p.add_argument("--test")
        p.add_argument("--latent-dim", dest="latent_dim", type=int)
        p.add_argument("--d-init", dest="d_init", type=int)
        p.add_argument("--k-init", dest="k_init", type=int)
        p.add_argument("--mode", choices=("printed", "recomputed", "conjugate"))
        p.add_argument("--evb", action="store_true",
                       help="interleave hyperparameter updates")
        p.add_argument("--clamp", help="lo,hi rating range for predictions")
        p.add_argument("--metrics-out", dest="metrics_out")
        p.add_argument("--summary-out", dest="summary_out")
        p.add_argument("--checkpoint-out", dest="checkpoint_out")
        p.add_argument("--no-timing", dest="no_timing", action="store_true",
                       help="write wall_ms as 0 for byte-reproducible metrics")
        if streaming:
            p.add_argument("--chunk-size", dest="chunk_size", type=int)
            p.add_argument("--algorithm", choices=("ovb", "sgd"))
            p.add_argument("--sgd-epochs", dest="sgd_epochs", type=int)
            p.add_argument("--propagation", type=int)
            p.add_argument("--evb-every", dest="evb_every", type=int)
            p.add_argument("--no-spawn", dest="no_spawn", action="store_true")
            p.add_argument("--no-merge", dest="no_merge", action="store_true")
            p.add_argument("--resume", help="checkpoint to continue from")
        else:
            p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
            p.add_argument("--tol", type=float)
            p.add_argument("--mapping-out", dest="mapping_out")

    p = sub.add_parser("fit", help="batch variational fit")
    add_fit_options(p, streaming=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("stream", help="streaming fit (ovb or sgd)")
    add_fit_options(p, streaming=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("predict", help="predict user,item pairs from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--mapping")
    p.add_argument("--clamp")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="RMSE of a checkpoint on a test file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mapping")
    p.add_argument("--clamp")
    p.add_argument("--summary-out", dest="summary_out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False)
                        else logging.WARNING)
    try:
        file_config = _read_config_file(getattr(args, "config", None))
        opts = _resolve(args, file_config)
        return args.func(args, opts)
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
