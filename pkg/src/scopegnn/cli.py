"""Command-line entry point.

Commands: train, eval, sweep, verify-theory, convert-dataset,
export-embeddings. Config precedence: flags override config-file values
override built-in defaults. Exit codes: 0 success, 2 usage, 3 validation,
4 numeric abort, 5 theorem-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .distributions import StickBreakingPrior
from .graph import GraphValidationError, load_graph
from .metrics import calibration_report
from .model import forward_model, load_checkpoint, predict, save_checkpoint
from .theory import verify_theorems
from .training import NumericAbort, TrainConfig, sweep, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4
EXIT_THEOREM = 5

# config-file / flag name -> TrainConfig field
_CONFIG_KEYS = {
    "epochs": "epochs",
    "patience": "patience",
    "lr": "lr",
    "dropout": "dropout",
    "dropedge": "dropedge",
    "samples": "n_samples",
    "alpha": "prior_alpha",
    "beta": "prior_beta",
    "truncation": "truncation",
    "tau": "tau",
    "width": "hidden_width",
    "seed": "seed",
    "backbone": "backbone",
    "eval_policy": "eval_mask_policy",
    "eval_samples": "eval_samples",
    "kl_scale": "kl_scale",
    "kl_z_method": "kl_z_method",
}
_DATASET_KEYS = ("edges", "features", "labels", "masks")


class UsageError(ValueError):
    pass


def parse_config_file(path, section):
    """Flat ``key = value`` lines, optional ``[section]`` headers.

    Keys before any header apply to all commands; a ``[name]`` header scopes
    the following keys to that command.
    """
    values = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        if current is None or current == section:
            values[key.strip()] = val.strip()
    return values


def _coerce(field_name, raw, config_fields):
    typ = config_fields[field_name]
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def build_train_config(args, section="train"):
    """Defaults, then config file, then explicit flags."""
    file_values = parse_config_file(args.config, section) if args.config else {}
    config_fields = {
        f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)
    }

    overrides = {}
    dataset = {}
    for key, raw in file_values.items():
        if key in _DATASET_KEYS or key == "out":
            dataset[key] = raw
        elif key in _CONFIG_KEYS:
            overrides[_CONFIG_KEYS[key]] = _coerce(_CONFIG_KEYS[key], raw, config_fields)
        else:
            raise UsageError(f"unknown config key {key!r}")
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[_CONFIG_KEYS[key]] = flag
    for key in _DATASET_KEYS + ("out",):
        flag = getattr(args, key, None)
        if flag is not None:
            dataset[key] = flag
    try:
        config = replace(TrainConfig(), **overrides)
    except ValueError as exc:
        raise UsageError(str(exc))
    return config, dataset


def _load_dataset(dataset):
    missing = [k for k in _DATASET_KEYS if k not in dataset]
    if missing:
        raise UsageError(f"missing dataset paths: {', '.join(missing)}")
    return load_graph(dataset["edges"], dataset["features"], dataset["labels"], dataset["masks"])


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x):
    return repr(float(x))


def write_kv(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs:
            fh.write(f"{key} {_fmt(value) if isinstance(value, float) else value}\n")


def write_manifest(out_dir, filenames):
    lines = []
    for name in sorted(filenames):
        digest = hashlib.sha256((Path(out_dir) / name).read_bytes()).hexdigest()
        lines.append(f"{name} {digest}")
    (Path(out_dir) / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_history(path, history, truncation):
    with open(path, "w", encoding="utf-8") as fh:
        pi_cols = ",".join(f"pi_{l + 1}" for l in range(truncation))
        fh.write(f"epoch,train_loss,val_acc,val_loss,{pi_cols},lns_mode\n")
        for r in history.records:
            pi = ",".join(_fmt(v) for v in r.mean_pi)
            fh.write(
                f"{r.epoch},{_fmt(r.train_loss)},{_fmt(r.val_acc)},{_fmt(r.val_loss)},"
                f"{pi},{r.scope_mode}\n"
            )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    config, dataset = build_train_config(args, "train")
    graph = _load_dataset(dataset)
    out_dir = Path(dataset.get("out", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    params, posterior, history = train(graph, config)
    eval_rng = np.random.default_rng(np.random.SeedSequence(config.seed + 77))
    probs = predict(
        graph, params, posterior, config.eval_samples, eval_rng,
        mode=config.backbone, eval_mask_policy=config.eval_mask_policy,
    )
    report = calibration_report(probs, graph.labels, graph.test_mask)

    save_checkpoint(
        out_dir / "checkpoint.bin", params, posterior,
        {k: getattr(config, v) for k, v in _CONFIG_KEYS.items()},
    )
    write_history(out_dir / "history.csv", history, config.truncation)
    last_pi = history.records[-1].mean_pi
    write_kv(
        out_dir / "metrics.kv",
        [
            ("test_accuracy", float(report.accuracy)),
            ("test_ece", float(report.ece)),
            ("best_val_accuracy", float(history.best_val_acc)),
            ("best_epoch", history.best_epoch),
            ("epochs_run", len(history.records)),
            ("final_scope_mode", history.records[-1].scope_mode),
            ("final_mean_pi", float(np.mean(last_pi))),
        ],
    )
    write_manifest(out_dir, ["checkpoint.bin", "history.csv", "metrics.kv"])
    print(f"test_accuracy {report.accuracy:.4f}")
    print(f"scope_mode {history.records[-1].scope_mode}")
    return EXIT_OK


def cmd_eval(args):
    params, posterior, config = load_checkpoint(args.checkpoint)
    graph = _load_dataset({k: getattr(args, k) for k in _DATASET_KEYS if getattr(args, k, None)})
    if graph.n_features != params.w_in.value.shape[0]:
        raise GraphValidationError(
            f"checkpoint expects {params.w_in.value.shape[0]} features, "
            f"dataset has {graph.n_features}"
        )
    n_samples = args.S if args.S is not None else int(config.get("eval_samples", 5))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    eval_rng = np.random.default_rng(np.random.SeedSequence(seed + 77))
    probs = predict(
        graph, params, posterior, n_samples, eval_rng,
        mode=config.get("backbone", "bna"),
        eval_mask_policy=config.get("eval_policy", "sample"),
    )
    report = calibration_report(probs, graph.labels, graph.test_mask)

    write_kv(
        out_dir / "metrics.kv",
        [("accuracy", float(report.accuracy)), ("ece", float(report.ece)),
         ("mean_entropy", float(np.mean(report.entropy)))],
    )
    with open(out_dir / "bins.csv", "w", encoding="utf-8") as fh:
        fh.write("bin,count,accuracy,confidence\n")
        for i in range(report.bin_counts.size):
            fh.write(
                f"{i},{int(report.bin_counts[i])},{_fmt(report.bin_accuracy[i])},"
                f"{_fmt(report.bin_confidence[i])}\n"
            )
    with open(out_dir / "pavspu_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("threshold,pavspu\n")
        for t, v in zip(report.pavspu_thresholds, report.pavspu_values):
            fh.write(f"{_fmt(t)},{_fmt(v)}\n")
    with open(out_dir / "entropy.csv", "w", encoding="utf-8") as fh:
        fh.write("node,entropy\n")
        for node, h in zip(graph.test_mask, report.entropy):
            fh.write(f"{node},{_fmt(h)}\n")
    write_manifest(out_dir, ["metrics.kv", "bins.csv", "pavspu_curve.csv", "entropy.csv"])
    print(f"accuracy {report.accuracy:.4f} ece {report.ece:.4f}")
    return EXIT_OK


def _parse_grid(spec):
    """'alpha=2,5,10 beta=2,4 samples=1,5' -> list of override dicts (product)."""
    axes = []
    for tok in spec.split():
        key, _, vals = tok.partition("=")
        if key not in _CONFIG_KEYS or not vals:
            raise UsageError(f"bad grid token {tok!r}")
        field_name = _CONFIG_KEYS[key]
        typ = type(getattr(TrainConfig(), field_name))
        try:
            axes.append((field_name, [typ(v) for v in vals.split(",")]))
        except ValueError:
            raise UsageError(f"bad grid values in {tok!r}")
    if not axes:
        raise UsageError("empty sweep grid")
    grid = [{}]
    for name, vals in axes:
        grid = [{**g, name: v} for g in grid for v in vals]
    return grid


def cmd_sweep(args):
    config, dataset = build_train_config(args, "sweep")
    graph = _load_dataset(dataset)
    grid = _parse_grid(args.grid)
    out_dir = Path(dataset.get("out", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    results = sweep(graph, config, grid)
    keys = sorted({k for r in results for k in r.settings})
    with open(out_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + ",val_acc,test_acc,error\n")
        for r in results:
            row = [str(r.settings.get(k, "")) for k in keys]
            fh.write(
                ",".join(row) + f",{_fmt(r.val_acc)},{_fmt(r.test_acc)},{r.error}\n"
            )
    best = results[0]
    print(f"best {best.settings} val_acc {best.val_acc:.4f} test_acc {best.test_acc:.4f}")
    return EXIT_OK


def cmd_verify_theory(args):
    if args.trials < 1:
        raise UsageError("trials must be >= 1")
    report = verify_theorems(
        n_trials=args.trials,
        n_nodes=args.nodes,
        edge_prob=args.p,
        depth=args.depth,
        prior=StickBreakingPrior(args.alpha, args.beta),
        seed=args.seed if args.seed is not None else 0,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "theory_report.csv", "w", encoding="utf-8") as fh:
        fh.write("trial,check,passed,margin\n")
        for i, trial in enumerate(report.trials):
            for c in trial:
                fh.write(f"{i},{c.name},{int(c.passed)},{_fmt(c.margin)}\n")
    write_kv(
        out_dir / "theory_summary.kv",
        [("trials", len(report.trials)), ("pass_rate", float(report.pass_rate)),
         ("all_passed", int(report.all_passed))],
    )
    if args.export_curves:
        with open(out_dir / "theory_curves.csv", "w", encoding="utf-8") as fh:
            fh.write("trial,depth,variant,d_m,p_norm,theta\n")
            for trial, depth, variant, d_m, p_norm, theta in report.curves:
                fh.write(f"{trial},{depth},{variant},{_fmt(d_m)},{_fmt(p_norm)},{_fmt(theta)}\n")
    print(f"pass_rate {report.pass_rate:.4f}")
    return EXIT_OK if report.all_passed else EXIT_THEOREM


def cmd_export_embeddings(args):
    params, posterior, config = load_checkpoint(args.checkpoint)
    graph = _load_dataset({k: getattr(args, k) for k in _DATASET_KEYS if getattr(args, k, None)})
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    rng = np.random.default_rng(np.random.SeedSequence(seed + 177))
    mode = config.get("backbone", "bna")
    if mode == "bna":
        from .distributions import draw_mask_sample

        sample = draw_mask_sample(posterior, params.width, rng)
        trace = forward_model(graph, params, mask_sample=sample, mode="bna")
    else:
        trace = forward_model(graph, params, mode=mode)
    h = trace.hidden[-1].value
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("node," + ",".join(f"h_{j}" for j in range(h.shape[1])) + ",label\n")
        for i in range(h.shape[0]):
            fh.write(f"{i}," + ",".join(_fmt(v) for v in h[i]) + f",{graph.labels[i]}\n")
    print(f"wrote {h.shape[0]} embeddings of width {h.shape[1]}")
    return EXIT_OK


_CONVERT_RECIPE = """\
Converts a citation-network dump in the common content/cites layout into the
four input files. Expected inputs:
  <name>.content  lines: <paper_id> <feat_0> ... <feat_{F-1}> <class_name>
  <name>.cites    lines: <cited_paper_id> <citing_paper_id>
Paper ids are remapped to dense 0-based node ids in first-seen content order;
class names to indices in first-seen order. The split takes the first
--train-per-class nodes of each class for training (content order), then the
next --val-count nodes overall for validation and the following --test-count
for testing, mirroring the common fixed-split convention for these dumps.
"""


def cmd_convert_dataset(args):
    content = Path(args.content)
    cites = Path(args.cites)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    node_ids, feats, label_names = {}, [], []
    labels = []
    for line in content.read_text(encoding="utf-8").splitlines():
        toks = line.split()
        if not toks:
            continue
        paper, values, cls = toks[0], toks[1:-1], toks[-1]
        node_ids[paper] = len(node_ids)
        feats.append([float(v) for v in values])
        if cls not in label_names:
            label_names.append(cls)
        labels.append(label_names.index(cls))

    edges = []
    skipped = 0
    for line in cites.read_text(encoding="utf-8").splitlines():
        toks = line.split()
        if len(toks) != 2:
            continue
        if toks[0] in node_ids and toks[1] in node_ids:
            edges.append((node_ids[toks[0]], node_ids[toks[1]]))
        else:
            skipped += 1

    n = len(node_ids)
    with open(out_dir / "edges.tsv", "w", encoding="utf-8") as fh:
        fh.write("# converted citation edges\n")
        for u, v in edges:
            fh.write(f"{u}\t{v}\n")
    with open(out_dir / "features.csv", "w", encoding="utf-8") as fh:
        for row in feats:
            fh.write(",".join(repr(v) for v in row) + "\n")
    with open(out_dir / "labels.csv", "w", encoding="utf-8") as fh:
        for i, cls in enumerate(labels):
            fh.write(f"{i},{cls}\n")

    n_classes = len(label_names)
    per_class = {c: [] for c in range(n_classes)}
    for i, cls in enumerate(labels):
        per_class[cls].append(i)
    train = sorted(i for c in range(n_classes) for i in per_class[c][: args.train_per_class])
    rest = [i for i in range(n) if i not in set(train)]
    val = rest[: args.val_count]
    test = rest[args.val_count : args.val_count + args.test_count]
    with open(out_dir / "masks.txt", "w", encoding="utf-8") as fh:
        fh.write("train: " + " ".join(map(str, train)) + "\n")
        fh.write("val: " + " ".join(map(str, val)) + "\n")
        fh.write("test: " + " ".join(map(str, test)) + "\n")
    print(f"converted {n} nodes, {len(edges)} edge lines ({skipped} dangling skipped), "
          f"{n_classes} classes")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config")
    for key in _DATASET_KEYS + ("out",):
        p.add_argument(f"--{key}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--dropedge", type=float)
    p.add_argument("--samples", type=int, help="Monte-Carlo structure samples per step")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--truncation", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", choices=("bna", "gcn", "resgcn"))
    p.add_argument("--eval-policy", dest="eval_policy", choices=("sample", "hard", "expected"))
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.add_argument("--kl-scale", dest="kl_scale", choices=("train", "one"))
    p.add_argument("--kl-z-method", dest="kl_z_method", choices=("analytic", "mc"))


def build_parser():
    parser = argparse.ArgumentParser(prog="scopegnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="variational training run")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    for key in _DATASET_KEYS:
        p.add_argument(f"--{key}", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--S", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over hyperparameters")
    _add_train_flags(p)
    p.add_argument("--grid", required=True, help='e.g. "alpha=2,5,10 beta=2 samples=1,5"')
    p.add_argument("--jobs", type=int, default=1, help="accepted for interface parity; runs serially")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory", help="run the propagation inequality checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.add_argument("--export-curves", action="store_true")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser(
        "convert-dataset",
        help="convert a content/cites citation dump to the input formats",
        description=_CONVERT_RECIPE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--content", required=True)
    p.add_argument("--cites", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--val-count", type=int, default=500)
    p.add_argument("--test-count", type=int, default=1000)
    p.set_defaults(func=cmd_convert_dataset)

    p = sub.add_parser("export-embeddings", help="dump final-layer embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    for key in _DATASET_KEYS:
        p.add_argument(f"--{key}", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphValidationError, FileNotFoundError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
