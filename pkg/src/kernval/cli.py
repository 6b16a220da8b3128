"""``kernval``: seeded, manifest-logged valuation pipelines.

Subcommands: valuate, robustness, removal, select, mislabel, corr,
synth-kernel, kernel-info.  Configuration precedence is flags > JSON config
file (``--config``) > built-in defaults; the ``KERNVAL_OUT_DIR`` environment
variable overrides the default output directory.  Every file-producing run
writes a ``*_manifest.json`` next to its outputs (no timestamps, so reruns
are byte-identical).

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .applications import correlate, mislabel_detection, removal_curve, selection_curve
from .datasets import (
    DistributionSpec,
    LabeledDataset,
    default_distribution,
    load_dataset,
    sample_dataset,
    synth_kernel,
    write_labels_csv,
)
from .errors import DataError, KernvalError, SingularKernelError
from .kernelstore import read_kernel, write_kernel
from .regression import EmptyModelPolicy, JitterPolicy
from .shapley import (
    DEFAULT_ITERS,
    DEFAULT_TOLERANCE,
    ENUMERATION_CAP,
    ScoreTable,
    TARGET_ALL,
    ValuationContext,
    exact_shapley,
    loo,
    tmc_freeshap,
)
from .robustness import remark_diagnostics, robustness_protocol, sample_pool

OUT_DIR_ENV = "KERNVAL_OUT_DIR"

METHODS = ("exact", "freeshap", "tmc", "loo")


class UsageError(DataError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract wants usage + exit 1.
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, name: str, payload: dict) -> Path:
    path = out_dir / f"{name}_manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > --config JSON > defaults."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            merged[key] = val
    return merged


def _out_dir(opts: dict) -> Path:
    out = opts.get("out") or os.environ.get(OUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _empty_policy(opts: dict) -> EmptyModelPolicy:
    return EmptyModelPolicy(opts["empty-policy"], int(opts["empty-class"]))


def _load_dist(spec: str | None) -> DistributionSpec:
    if not spec or spec == "default":
        return default_distribution()
    with open(spec, encoding="utf-8") as fh:
        return DistributionSpec.from_dict(json.load(fh))


def _load_context(opts: dict) -> tuple[ValuationContext, dict]:
    store = read_kernel(opts["kernel"])
    train = load_dataset(opts["train-labels"], n_classes=store.n_classes)
    test = load_dataset(opts["test-labels"], n_classes=store.n_classes)
    ctx = ValuationContext(train, test, store, _empty_policy(opts), JitterPolicy())
    meta = {
        "kernel": str(opts["kernel"]),
        "kernel_sha256": _sha256(opts["kernel"]),
        "train_labels": str(opts["train-labels"]),
        "test_labels": str(opts["test-labels"]),
        "empty_policy": ctx.empty_policy.describe(),
        "version": __version__,
    }
    return ctx, meta


_COMMON_DEFAULTS = {"out": None, "empty-policy": "constant", "empty-class": 0}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file (flags win over it)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--empty-policy", choices=("constant", "uniform"))
    parser.add_argument("--empty-class", type=int)


# ---------------------------------------------------------------------------
# valuate


def _cmd_valuate(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        kernel=None,
        **{"train-labels": None, "test-labels": None},
        method=None,
        iters=DEFAULT_ITERS,
        tolerance=DEFAULT_TOLERANCE,
        seed=0,
        target=TARGET_ALL,
        workers=1,
        cap=ENUMERATION_CAP,
    )
    opts = _resolve(args, defaults)
    for key in ("kernel", "train-labels", "test-labels", "method"):
        if not opts[key]:
            raise UsageError(f"--{key} is required")
    if opts["method"] not in METHODS:
        raise UsageError(f"--method must be one of {METHODS}")
    ctx, meta = _load_context(opts)
    out_dir = _out_dir(opts)
    target = opts["target"]
    seed = int(opts["seed"])
    workers = int(opts["workers"])

    if opts["method"] == "exact":
        table = exact_shapley(ctx, target, cap=int(opts["cap"]))
    elif opts["method"] == "loo":
        table = loo(ctx, target)
    else:
        tolerance = 0.0 if opts["method"] == "freeshap" else float(opts["tolerance"])
        table, _ = tmc_freeshap(
            ctx, target, iters=int(opts["iters"]), tolerance=tolerance, seed=seed, workers=workers
        )
    scores_path = out_dir / f"scores_{opts['method']}.csv"
    table.write_csv(scores_path)
    _write_manifest(
        out_dir,
        f"valuate_{opts['method']}",
        dict(
            meta,
            command="valuate",
            method=opts["method"],
            method_tag=table.method,
            iters=table.iters,
            tolerance=None if opts["method"] in ("exact", "loo") else (
                0.0 if opts["method"] == "freeshap" else float(opts["tolerance"])
            ),
            seed=table.seed,
            target=target,
            workers=workers,
            outputs=[scores_path.name],
        ),
    )
    print(f"wrote {scores_path}")
    return 0


# ---------------------------------------------------------------------------
# robustness


def _cmd_robustness(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        **{"dist-config": "default", "n-others": 199, "test-size": 300},
        resamples=5,
        pool=50,
        method="both",
        iters=DEFAULT_ITERS,
        tolerance=DEFAULT_TOLERANCE,
        seed=0,
        workers=1,
    )
    opts = _resolve(args, defaults)
    dist = _load_dist(opts["dist-config"])
    out_dir = _out_dir(opts)
    seed = int(opts["seed"])
    pool = sample_pool(dist, int(opts["pool"]), seed)
    methods = ("shapley", "loo") if opts["method"] == "both" else (opts["method"],)
    policy = _empty_policy(opts)

    results = {}
    outputs = []
    for method in methods:
        result = robustness_protocol(
            dist,
            pool,
            resamples=int(opts["resamples"]),
            n_others=int(opts["n-others"]),
            method=method,
            seed=seed,
            test_size=int(opts["test-size"]),
            iters=int(opts["iters"]),
            tolerance=float(opts["tolerance"]),
            empty_policy=policy,
            workers=int(opts["workers"]),
        )
        results[method] = result
        csv_path = out_dir / f"robustness_{method}.csv"
        json_path = out_dir / f"robustness_{method}.json"
        result.write_csv(csv_path)
        result.write_json(json_path)
        outputs += [csv_path.name, json_path.name]
        print(f"{method}: non-robust rate {result.rate:.4f}")

    if len(results) == 2:
        report = remark_diagnostics(results)
        diag_path = out_dir / "remark_diagnostics.json"
        report.write_json(diag_path)
        outputs.append(diag_path.name)

    _write_manifest(
        out_dir,
        "robustness",
        {
            "command": "robustness",
            "dist": dist.to_dict(),
            "resamples": int(opts["resamples"]),
            "pool": int(opts["pool"]),
            "n_others": int(opts["n-others"]),
            "test_size": int(opts["test-size"]),
            "methods": list(methods),
            "iters": int(opts["iters"]),
            "tolerance": float(opts["tolerance"]),
            "seed": seed,
            "empty_policy": policy.describe(),
            "version": __version__,
            "outputs": outputs,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# removal / select / mislabel


def _cmd_removal(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        kernel=None,
        **{"train-labels": None, "test-labels": None},
        scores=None,
        direction="both",
        step=0.10,
        target=TARGET_ALL,
    )
    opts = _resolve(args, defaults)
    for key in ("kernel", "train-labels", "test-labels", "scores"):
        if not opts[key]:
            raise UsageError(f"--{key} is required")
    ctx, meta = _load_context(opts)
    table = ScoreTable.read_csv(opts["scores"])
    out_dir = _out_dir(opts)
    directions = (
        ("high-first", "low-first") if opts["direction"] == "both" else (opts["direction"],)
    )
    outputs = []
    for direction in directions:
        curve = removal_curve(table, direction, float(opts["step"]), ctx, opts["target"])
        path = out_dir / f"removal_{direction}.csv"
        curve.write_csv(path)
        outputs.append(path.name)
        print(f"{direction}: AUC {curve.auc():.4f}")
    _write_manifest(
        out_dir,
        "removal",
        dict(
            meta,
            command="removal",
            scores=str(opts["scores"]),
            step=float(opts["step"]),
            target=opts["target"],
            method=table.method,
            iters=table.iters,
            seed=table.seed,
            outputs=outputs,
        ),
    )
    return 0


def _cmd_select(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        kernel=None,
        **{"train-labels": None, "test-labels": None, "heldout-labels": None},
        scores=None,
        steps="0.02,0.04,0.06,0.08,0.10",
    )
    opts = _resolve(args, defaults)
    for key in ("kernel", "train-labels", "test-labels", "heldout-labels", "scores"):
        if not opts[key]:
            raise UsageError(f"--{key} is required")
    ctx, meta = _load_context(opts)
    heldout = load_dataset(opts["heldout-labels"], n_classes=ctx.store.n_classes)
    table = ScoreTable.read_csv(opts["scores"])
    steps = [float(s) for s in str(opts["steps"]).split(",") if s]
    out_dir = _out_dir(opts)
    curve = selection_curve(table, heldout, steps, ctx)
    path = out_dir / "selection.csv"
    curve.write_csv(path)
    _write_manifest(
        out_dir,
        "select",
        dict(
            meta,
            command="select",
            scores=str(opts["scores"]),
            heldout_labels=str(opts["heldout-labels"]),
            steps=steps,
            method=table.method,
            iters=table.iters,
            seed=table.seed,
            outputs=[path.name],
        ),
    )
    print(f"wrote {path}")
    return 0


def _cmd_mislabel(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        kernel=None,
        **{"train-labels": None, "test-labels": None},
        flip=0.10,
        method="freeshap",
        iters=DEFAULT_ITERS,
        tolerance=DEFAULT_TOLERANCE,
        seed=0,
        target=TARGET_ALL,
        workers=1,
    )
    opts = _resolve(args, defaults)
    for key in ("kernel", "train-labels", "test-labels"):
        if not opts[key]:
            raise UsageError(f"--{key} is required")
    if opts["method"] not in METHODS:
        raise UsageError(f"--method must be one of {METHODS}")
    ctx, meta = _load_context(opts)
    out_dir = _out_dir(opts)
    seed = int(opts["seed"])

    def scorer(dataset: LabeledDataset, store) -> ScoreTable:
        sub_ctx = ValuationContext(dataset, ctx.test, store, ctx.empty_policy, ctx.jitter)
        if opts["method"] == "exact":
            return exact_shapley(sub_ctx, opts["target"])
        if opts["method"] == "loo":
            return loo(sub_ctx, opts["target"])
        tolerance = 0.0 if opts["method"] == "freeshap" else float(opts["tolerance"])
        table, _ = tmc_freeshap(
            sub_ctx,
            opts["target"],
            iters=int(opts["iters"]),
            tolerance=tolerance,
            seed=seed,
            workers=int(opts["workers"]),
        )
        return table

    curve, flipped, table = mislabel_detection(
        ctx.train, float(opts["flip"]), ctx.store, scorer, seed
    )
    curve_path = out_dir / "detection.csv"
    scores_path = out_dir / "mislabel_scores.csv"
    curve.write_csv(curve_path)
    table.write_csv(scores_path)
    _write_manifest(
        out_dir,
        "mislabel",
        dict(
            meta,
            command="mislabel",
            flip=float(opts["flip"]),
            method=opts["method"],
            iters=int(opts["iters"]),
            tolerance=float(opts["tolerance"]),
            seed=seed,
            target=opts["target"],
            flipped_indices=[int(i) for i in flipped],
            auc=curve.auc(),
            outputs=[curve_path.name, scores_path.name],
        ),
    )
    print(f"detection AUC {curve.auc():.4f} (baseline {curve.baseline_auc():.4f})")
    return 0


# ---------------------------------------------------------------------------
# corr / synth-kernel / kernel-info


def _cmd_corr(args) -> int:
    a = ScoreTable.read_csv(args.table_a)
    b = ScoreTable.read_csv(args.table_b)
    pearson, spearman = correlate(a, b)
    print(f"pearson={pearson:.6f} spearman={spearman:.6f}")
    return 0


def _cmd_synth_kernel(args) -> int:
    defaults = dict(
        _COMMON_DEFAULTS,
        **{
            "dist-config": "default",
            "n-train": 100,
            "n-test": 50,
            "n-heldout": 0,
            "train-features": None,
            "test-features": None,
            "train-labels": None,
            "test-labels": None,
        },
        kind="rbf",
        bandwidth=None,
        seed=0,
    )
    opts = _resolve(args, defaults)
    out_dir = _out_dir(opts)
    bandwidth = None if opts["bandwidth"] is None else float(opts["bandwidth"])

    if opts["train-features"]:
        if not (opts["test-features"] and opts["train-labels"] and opts["test-labels"]):
            raise UsageError(
                "feature-file mode needs --train-features/--test-features/"
                "--train-labels/--test-labels"
            )
        xt = np.load(opts["train-features"])
        xq = np.load(opts["test-features"])
        train = load_dataset(opts["train-labels"])
        test = load_dataset(opts["test-labels"], n_classes=train.n_classes)
        train = LabeledDataset(train.ids, train.labels, train.n_classes, xt)
        test = LabeledDataset(test.ids, test.labels, train.n_classes, xq)
        heldout = None
        dist_info = None
    else:
        dist = _load_dist(opts["dist-config"])
        seed = int(opts["seed"])
        train = sample_dataset(dist, int(opts["n-train"]), seed, id_prefix="tr")
        test = sample_dataset(dist.clean(), int(opts["n-test"]), seed + 1, id_prefix="te")
        heldout = None
        if int(opts["n-heldout"]) > 0:
            heldout = sample_dataset(
                dist.clean(), int(opts["n-heldout"]), seed + 2, id_prefix="ho"
            )
            test_all = LabeledDataset(
                test.ids + heldout.ids,
                np.concatenate([test.labels, heldout.labels]),
                train.n_classes,
                np.vstack([test.features, heldout.features]),
            )
        dist_info = dist.to_dict()

    eval_set = test if heldout is None else test_all
    store = synth_kernel(train, eval_set, kind=opts["kind"], bandwidth=bandwidth)
    kernel_path = out_dir / "kernel.entk"
    write_kernel(store, kernel_path)
    outputs = [kernel_path.name]
    if not opts["train-features"]:
        train_csv = out_dir / "train_labels.csv"
        test_csv = out_dir / "test_labels.csv"
        write_labels_csv(train, train_csv)
        write_labels_csv(test, test_csv)
        outputs += [train_csv.name, test_csv.name]
        if heldout is not None:
            heldout_csv = out_dir / "heldout_labels.csv"
            write_labels_csv(heldout, heldout_csv)
            outputs.append(heldout_csv.name)
    _write_manifest(
        out_dir,
        "synth_kernel",
        {
            "command": "synth-kernel",
            "kind": opts["kind"],
            "bandwidth": bandwidth,
            "seed": int(opts["seed"]),
            "dist": dist_info,
            "n_train": store.n_train,
            "n_test": store.n_test,
            "n_classes": store.n_classes,
            "kernel_sha256": _sha256(kernel_path),
            "version": __version__,
            "outputs": outputs,
        },
    )
    print(f"wrote {kernel_path}")
    return 0


def _cmd_kernel_info(args) -> int:
    store = read_kernel(args.kernel)
    print(
        f"n_train={store.n_train} n_test={store.n_test} "
        f"n_classes={store.n_classes} layout={int(store.layout)}"
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="kernval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("valuate", help="score training points")
    _add_common(p)
    p.add_argument("--kernel")
    p.add_argument("--train-labels")
    p.add_argument("--test-labels")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--iters", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--target")
    p.add_argument("--workers", type=int)
    p.add_argument("--cap", type=int, help="exact-enumeration size cap")
    p.set_defaults(func=_cmd_valuate)

    p = sub.add_parser("robustness", help="sign-robustness protocol")
    _add_common(p)
    p.add_argument("--dist-config")
    p.add_argument("--resamples", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--n-others", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--method", choices=("shapley", "loo", "both"))
    p.add_argument("--iters", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_robustness)

    p = sub.add_parser("removal", help="data-removal curves")
    _add_common(p)
    p.add_argument("--kernel")
    p.add_argument("--train-labels")
    p.add_argument("--test-labels")
    p.add_argument("--scores")
    p.add_argument("--direction", choices=("high-first", "low-first", "both"))
    p.add_argument("--step", type=float)
    p.add_argument("--target")
    p.set_defaults(func=_cmd_removal)

    p = sub.add_parser("select", help="data-selection curve")
    _add_common(p)
    p.add_argument("--kernel")
    p.add_argument("--train-labels")
    p.add_argument("--test-labels")
    p.add_argument("--heldout-labels")
    p.add_argument("--scores")
    p.add_argument("--steps")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("mislabel", help="wrong-label detection curve")
    _add_common(p)
    p.add_argument("--kernel")
    p.add_argument("--train-labels")
    p.add_argument("--test-labels")
    p.add_argument("--flip", type=float)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--iters", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--target")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_mislabel)

    p = sub.add_parser("corr", help="correlate two score tables")
    p.add_argument("table_a")
    p.add_argument("table_b")
    p.set_defaults(func=_cmd_corr)

    p = sub.add_parser("synth-kernel", help="build a synthetic kernel file")
    _add_common(p)
    p.add_argument("--dist-config")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-heldout", type=int)
    p.add_argument("--train-features")
    p.add_argument("--test-features")
    p.add_argument("--train-labels")
    p.add_argument("--test-labels")
    p.add_argument("--kind", choices=("linear", "rbf"))
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth_kernel)

    p = sub.add_parser("kernel-info", help="echo a kernel file header")
    p.add_argument("kernel")
    p.set_defaults(func=_cmd_kernel_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SingularKernelError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except KernvalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
