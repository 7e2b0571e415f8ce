"""Command-line entry point: `train`, `eval`, `ensemble`, `analyze`, and
`gen-synthetic` subcommands over a flat `[section] key = value` config.

Every config key can be overridden with a `--key value` flag. Exit codes:
0 success, 1 usage/config error, 2 data/format error, 3 training abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, data, model
from .analysis import fmt
from .errors import ConfigError, DataError, FormatError, McfaError, NonFiniteError, ShapeError, TrainingAbort

_RUN_KEYS = {"mode": "str", "seed": "int", "out_dir": "str", "jobs": "int"}
_DATA_KEYS = {
    "views": "strlist",
    "train_files": "strlist",
    "test_files": "strlist",
    "cv_folds": "int",
    "embedding_files": "strlist",
    "d_word": "int",
    "n_maps": "int",
    "window_sizes": "intlist",
    "train_embeddings": "bool",
}
_SYN_KEYS = {
    "n_views": "int",
    "n_classes": "int",
    "n_examples": "int",
    "n_test": "int",
    "informative": "groups",
    "noise_rate": "floatlist",
    "min_len": "int",
    "max_len": "int",
    "signal_tokens": "int",
    "filler_tokens": "int",
    "noise_tokens": "int",
}
_TRAIN_KEYS = {
    "batch_size": "int",
    "dropout_rate": "float",
    "max_norm_c": "float",
    "rho": "float",
    "epsilon": "float",
    "l2_lambda": "float",
    "max_epochs": "int",
    "patience": "int",
    "dev_fraction": "float",
}
_SCHEMA = {"run": _RUN_KEYS, "data": _DATA_KEYS, "synthetic": _SYN_KEYS, "train": _TRAIN_KEYS}


def _parse_value(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "strlist":
            return [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "intlist":
            return [int(p) for p in raw.split(",") if p.strip()]
        if kind == "floatlist":
            vals = [float(p) for p in raw.split(",") if p.strip()]
            return vals[0] if len(vals) == 1 else vals
        if kind == "groups":
            return [
                [int(p) for p in group.split(",") if p.strip()] for group in raw.split("|")
            ]
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


@dataclass
class RunConfig:
    mode: str = "mcfa"
    seed: int = 0
    seed_explicit: bool = False
    out_dir: str = "out"
    jobs: int = 1
    views: list[str] = field(default_factory=list)
    train_files: list[str] = field(default_factory=list)
    test_files: list[str] = field(default_factory=list)
    cv_folds: int = 0
    embedding_files: list[str] = field(default_factory=list)
    d_word: int = 50
    n_maps: int = 100
    window_sizes: list[int] = field(default_factory=lambda: [3, 4, 5])
    train_embeddings: bool = True
    synthetic: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def source(self) -> str:
        has_syn = bool(self.synthetic)
        has_cv = self.cv_folds > 0
        has_fixed = bool(self.test_files)
        picked = [
            name
            for name, active in (
                ("synthetic", has_syn),
                ("cv", has_cv and bool(self.train_files)),
                ("fixed-test", has_fixed and bool(self.train_files)),
            )
            if active
        ]
        if len(picked) != 1:
            raise ConfigError(
                "exactly one data source must be active (synthetic block, "
                f"train_files+cv_folds, or train_files+test_files); got {picked or 'none'}"
            )
        return picked[0]


def read_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    found = parser.read(path, encoding="utf-8")
    if not found:
        raise ConfigError(f"config file not found: {path}")
    rc = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            value = _parse_value(_SCHEMA[section][key], raw, key)
            if section == "run":
                if key == "seed":
                    rc.seed_explicit = True
                setattr(rc, key, value)
            elif section == "data":
                setattr(rc, key, value)
            elif section == "synthetic":
                rc.synthetic[key] = value
            else:
                rc.train[key] = value
    return rc


def apply_overrides(rc: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flag > config file > MCFA_SEED env fallback (seed only) > defaults."""
    for section, keys in _SCHEMA.items():
        for key, kind in keys.items():
            raw = getattr(args, key, None)
            if raw is None:
                continue
            value = _parse_value(kind, str(raw), key)
            if section in ("run", "data"):
                if key == "seed":
                    rc.seed_explicit = True
                setattr(rc, key, value)
            elif section == "synthetic":
                rc.synthetic[key] = value
            else:
                rc.train[key] = value
    if not rc.seed_explicit:
        env = os.environ.get("MCFA_SEED")
        if env is not None:
            rc.seed = _parse_value("int", env, "MCFA_SEED")
    if rc.mode not in model.MODES:
        raise ConfigError(f"mode must be one of {model.MODES}, got {rc.mode!r}")
    return rc


def synthetic_config(rc: RunConfig) -> data.SyntheticConfig:
    keys = dict(rc.synthetic)
    try:
        cfg = data.SyntheticConfig(
            n_views=keys.pop("n_views"),
            n_classes=keys.pop("n_classes"),
            n_examples=keys.pop("n_examples"),
            informative=keys.pop("informative"),
            noise_rate=keys.pop("noise_rate", 0.0),
            seed=rc.seed,
            d_word=rc.d_word,
            min_len=keys.pop("min_len", 6),
            max_len=keys.pop("max_len", 12),
            signal_tokens=keys.pop("signal_tokens", 4),
            filler_tokens=keys.pop("filler_tokens", 20),
            noise_tokens=keys.pop("noise_tokens", 200),
        )
    except KeyError as err:
        raise ConfigError(f"[synthetic] section is missing key {err}") from err
    keys.pop("n_test", None)
    if keys:
        raise ConfigError(f"unused synthetic keys: {sorted(keys)}")
    cfg.validate()
    return cfg


@dataclass
class PreparedRun:
    dataset: data.MultiViewDataset
    splits: list[data.DatasetSplit]


def prepare(rc: RunConfig) -> PreparedRun:
    source = rc.source()
    dev_fraction = float(rc.train.get("dev_fraction", 0.10))
    if source == "synthetic":
        cfg = synthetic_config(rc)
        n_test = int(rc.synthetic.get("n_test", max(1, cfg.n_examples // 5)))
        if n_test >= cfg.n_examples:
            raise ConfigError(f"n_test {n_test} must be < n_examples {cfg.n_examples}")
        ds = data.gen_synthetic(cfg)
        split = data.fixed_split(cfg.n_examples - n_test, n_test, rc.seed, dev_fraction)
        return PreparedRun(dataset=ds, splits=[split])
    if source == "cv":
        ds = data.load_parallel_corpus(rc.train_files, rc.views or None)
        splits = data.make_folds(ds.labels, rc.cv_folds, rc.seed, dev_fraction)
        return PreparedRun(dataset=ds, splits=splits)
    # fixed-test: vocabulary comes from the training files only
    names = rc.views or [Path(p).stem for p in rc.train_files]
    if len(rc.test_files) != len(rc.train_files):
        raise ConfigError(
            f"{len(rc.train_files)} train files but {len(rc.test_files)} test files"
        )
    raw_train = data.read_corpus_files(rc.train_files, names)
    raw_test = data.read_corpus_files(rc.test_files, names)
    vocabs = data.build_vocabularies(raw_train, len(names))
    n_classes = max(ex.label for ex in raw_train) + 1
    for i, ex in enumerate(raw_test):
        if ex.label >= n_classes:
            raise DataError(f"test label {ex.label} at line {i} exceeds training classes")
    raw_all = list(raw_train) + list(raw_test)
    ds = data.MultiViewDataset(
        examples=data.encode_examples(raw_all, vocabs),
        vocabs=vocabs,
        view_names=list(names),
        n_classes=n_classes,
        raw=raw_all,
    )
    split = data.fixed_split(len(raw_train), len(raw_test), rc.seed, dev_fraction)
    return PreparedRun(dataset=ds, splits=[split])


def fold_embeddings(rc: RunConfig, ds: data.MultiViewDataset, seed: int):
    if not rc.embedding_files:
        return None
    if len(rc.embedding_files) != len(ds.view_names):
        raise ConfigError(
            f"{len(rc.embedding_files)} embedding files for {len(ds.view_names)} views"
        )
    return [
        data.load_embeddings(path, ds.vocabs[k], view=k, d_word=rc.d_word, seed=seed)
        for k, path in enumerate(rc.embedding_files)
    ]


def _model_config(rc: RunConfig) -> model.ModelConfig:
    return model.ModelConfig(
        d_word=rc.d_word,
        n_maps=rc.n_maps,
        window_sizes=tuple(rc.window_sizes),
        train_embeddings=rc.train_embeddings,
    )


def _train_config(rc: RunConfig, seed: int) -> model.TrainConfig:
    return model.TrainConfig(seed=seed, **rc.train)


def _artifact_names(n_folds: int, fold: int) -> tuple[str, str]:
    if n_folds == 1:
        return "model.mcfa", "train_log.csv"
    return f"fold{fold}.mcfa", f"fold{fold}_log.csv"


def write_log_csv(log, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "dev_acc"])
        for entry in log:
            w.writerow([entry.epoch, fmt(entry.train_loss), fmt(entry.dev_acc)])


def _train_fold(rc: RunConfig, fold: int) -> float:
    """Train one fold, write its artifacts, return the fold test accuracy.

    Re-prepares the dataset from the config so the function is cheap to
    ship to a worker process; preparation is deterministic.
    """
    prep = prepare(rc)
    split = prep.splits[fold]
    seed = rc.seed + fold
    bundle, log = model.train(
        prep.dataset,
        split,
        rc.mode,
        _train_config(rc, seed),
        _model_config(rc),
        embeddings=fold_embeddings(rc, prep.dataset, seed),
    )
    out = Path(rc.out_dir)
    model_name, log_name = _artifact_names(len(prep.splits), fold)
    model.save(bundle, str(out / model_name))
    write_log_csv(log, out / log_name)
    test_examples = [prep.dataset.examples[i] for i in split.test]
    acc, _ = model.evaluate(bundle, test_examples, indices=split.test)
    return acc


def cmd_train(args) -> int:
    rc = apply_overrides(read_config(args.config), args)
    prep = prepare(rc)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = list(range(len(prep.splits)))
    if rc.jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=rc.jobs) as pool:
            accs = list(pool.map(_train_fold, [rc] * len(folds), folds))
    else:
        accs = [_train_fold(rc, f) for f in folds]
    mean = float(np.mean(accs))
    std = float(np.std(accs))
    summary = f"{rc.mode},{len(prep.dataset.view_names)},{fmt(mean)},{fmt(std)}"
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("mode,n_views,mean_acc,std_acc\n")
        fh.write(summary + "\n")
    print(summary)
    return 0


def _encode_for_bundle(bundle: model.ModelBundle, ds: data.MultiViewDataset):
    """Re-encode raw examples with the bundle's own vocabularies, mapping
    bundle views onto dataset views by name."""
    try:
        view_map = [ds.view_names.index(name) for name in bundle.view_names]
    except ValueError:
        raise DataError(
            f"view mismatch: model views {bundle.view_names}, data views {ds.view_names}"
        ) from None
    if not ds.raw:
        raise DataError("dataset carries no raw tokens to re-encode")
    encoded = []
    for ex in ds.raw:
        if ex.label >= bundle.n_classes:
            raise DataError(f"label {ex.label} exceeds model classes {bundle.n_classes}")
        encoded.append(
            data.MultiViewExample(
                label=ex.label,
                tokens=[bundle.vocabs[k].encode(ex.views[v]) for k, v in enumerate(view_map)],
            )
        )
    return encoded


def _split_portion(prep: PreparedRun, which: str, fold: int) -> list[int]:
    if fold >= len(prep.splits):
        raise ConfigError(f"fold {fold} out of range ({len(prep.splits)} splits)")
    split = prep.splits[fold]
    portion = {"train": split.train, "dev": split.dev, "test": split.test}[which]
    if not portion:
        raise DataError("empty split")
    return portion


def cmd_eval(args) -> int:
    rc = apply_overrides(read_config(args.config), args)
    bundle = model.load(args.model)
    prep = prepare(rc)
    encoded = _encode_for_bundle(bundle, prep.dataset)
    portion = _split_portion(prep, args.split, args.fold)
    examples = [encoded[i] for i in portion]
    acc, preds = model.evaluate(bundle, examples, indices=portion)
    print(f"accuracy={fmt(acc)}")
    out_path = args.out or str(Path(rc.out_dir) / "predictions.csv")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "pred"] + [f"prob_{c}" for c in range(bundle.n_classes)])
        for p in preds:
            w.writerow([p.index, p.label, p.pred] + [fmt(x) for x in p.probs])
    return 0


def cmd_ensemble(args) -> int:
    if len(args.models) < 2:
        raise ConfigError("ensemble needs at least 2 model files")
    rc = apply_overrides(read_config(args.config), args)
    bundles = [model.load(p) for p in args.models]
    prep = prepare(rc)
    encoded = [_encode_for_bundle(b, prep.dataset) for b in bundles]
    portion = _split_portion(prep, args.split, args.fold)
    correct = 0
    for i in portion:
        probs = model.ensemble_predict(bundles, [enc[i] for enc in encoded])
        label = prep.dataset.examples[i].label
        correct += int(int(np.argmax(probs)) == label)
    acc = correct / len(portion)
    print(f"accuracy={fmt(acc)}")
    return 0


def cmd_analyze(args) -> int:
    rc = apply_overrides(read_config(args.config), args)
    bundle = model.load(args.model)
    prep = prepare(rc)
    encoded = _encode_for_bundle(bundle, prep.dataset)
    portion = _split_portion(prep, args.split, args.fold)
    examples = [encoded[i] for i in portion]
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "pca":
        write = [("unaltered", out / "pca_unaltered.csv")]
        if bundle.mode == "mcfa":
            write.append(("altered", out / "pca_altered.csv"))
        for space, path in write:
            analysis.write_projection_csv(bundle, examples, args.components, str(path), space)
            print(str(path))
    elif args.kind == "separation":
        report = analysis.separation_rows(bundle, examples)
        analysis.write_separation_csv(report, str(out / "separation.csv"))
        print(str(out / "separation.csv"))
    elif args.kind == "neighbors":
        analysis.write_neighbors_csv(bundle, examples, args.neighbors_k, str(out / "neighbors.csv"))
        print(str(out / "neighbors.csv"))
    else:  # diagnostics
        vec_path = analysis.dump_diagnostics(bundle, examples, str(out / "diagnostics.csv"))
        print(str(out / "diagnostics.csv"))
        print(vec_path)
    return 0


def cmd_gen_synthetic(args) -> int:
    rc = apply_overrides(read_config(args.config), args)
    cfg = synthetic_config(rc)
    ds = data.gen_synthetic(cfg)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [str(out / f"{name}.txt") for name in ds.view_names]
    data.write_corpus(ds.raw, paths)
    for p in paths:
        print(p)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_override_flags(sub: argparse.ArgumentParser) -> None:
    for keys in _SCHEMA.values():
        for key in keys:
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcfa", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", parents=[], help="train per the config (all CV folds)")
    p_train.add_argument("--config", required=True)
    _add_override_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = subs.add_parser("eval", help="evaluate a saved model")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p_eval.add_argument("--fold", type=int, default=0)
    p_eval.add_argument("--out", default=None, help="predictions CSV path")
    _add_override_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_ens = subs.add_parser("ensemble", help="average class probabilities of several models")
    p_ens.add_argument("--models", nargs="+", required=True)
    p_ens.add_argument("--config", required=True)
    p_ens.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p_ens.add_argument("--fold", type=int, default=0)
    _add_override_flags(p_ens)
    p_ens.set_defaults(func=cmd_ensemble)

    p_an = subs.add_parser("analyze", help="write interpretation CSV artifacts")
    p_an.add_argument("--model", required=True)
    p_an.add_argument("--config", required=True)
    p_an.add_argument("--kind", choices=("pca", "separation", "neighbors", "diagnostics"), required=True)
    p_an.add_argument("--components", type=int, default=2)
    p_an.add_argument("--neighbors-k", dest="neighbors_k", type=int, default=5)
    p_an.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p_an.add_argument("--fold", type=int, default=0)
    _add_override_flags(p_an)
    p_an.set_defaults(func=cmd_analyze)

    p_gen = subs.add_parser("gen-synthetic", help="materialize a synthetic corpus to files")
    p_gen.add_argument("--config", required=True)
    _add_override_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (DataError, FormatError, ShapeError, NonFiniteError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingAbort as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except McfaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
