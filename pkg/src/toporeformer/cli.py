"""Command-line front-end.

Every command reads a JSON run configuration (``--config``), applies
``--set dotted.key=value`` overrides, writes the fully resolved tree to
``<out>/resolved_config.json`` and then does its work inside the output
directory. Exit status is 0 on success, 1 for configuration errors and 2
for runtime failures; failures print ``ERROR <code>: <message>`` on stderr.
Wall-clock timestamps go only to ``<out>/run.log``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, save_adversarial
from .dataio import Dataset, export_latents, load_idx
from .errors import ConfigInvalid, GradcheckFailed, MissingArtifact, TopoReformerError
from .models import load_weights, prefixed, save_weights
from .pipeline import (
    STAGES,
    ModelBundle,
    PipelineConfig,
    ablation_run,
    craft,
    evaluate_attack,
    report_csv,
    report_json,
    train_classifier,
    train_reformer_freezeflow,
    train_topoae,
)

COMMANDS = ("train-classifier", "train-topoae", "train-reformer", "attack", "evaluate",
            "ablate", "gradcheck", "export-latents")

DATA_FILES = {
    "mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "emnist": {
        "train": ("emnist-letters-train-images-idx3-ubyte", "emnist-letters-train-labels-idx1-ubyte"),
        "test": ("emnist-letters-test-images-idx3-ubyte", "emnist-letters-test-labels-idx1-ubyte"),
    },
}

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "root": None,  # falls back to $TOPOREFORM_DATA_DIR
        "dataset": "mnist",
        "num_classes": None,  # largest label + 1
        "label_offset": None,  # 0 for mnist, 1 for emnist letters
        "emnist_transpose": True,
        "train_limit": None,
    },
    "pipeline": {f.name: f.default for f in fields(PipelineConfig) if f.name != "seed"},
    "attacks": [{"kind": "fgsm", "eps": 0.1}],
    "eval": {
        "stage": "+ Warmup",
        "per_class": None,  # stratified test subset size per class; None uses all
        "average": "macro",
        "save_adversarial": True,
    },
    "gradcheck": {"seeds": 50, "tolerance": 1e-4},
    "export": {"split": "test"},
}

_ATTACK_KEYS = {f.name for f in fields(AttackConfig)}
_MODEL_FILES = ("classifier.trfm", "topoae.trfm", "reformer.trfm")

log = logging.getLogger("toporeformer")


# ---------------------------------------------------------------- config


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigInvalid(f"unknown key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings need no quotes: --set eval.stage=No Defense


def _apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigInvalid(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            raise ConfigInvalid(f"unknown key {'.'.join(parts[:i + 1])!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigInvalid(f"unknown key {key!r}")
    node[parts[-1]] = _parse_value(raw)


def _check_type(value, default, where):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigInvalid(f"{where!r} should be {type(default).__name__}, got {value!r}")


def resolve_config(raw: dict | None, overrides=(), seed: int | None = None,
                   out: str | None = None) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``/``--out``."""
    tree = _merge(DEFAULTS, raw or {})
    for assignment in overrides:
        _apply_override(tree, assignment)
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["output_dir"] = out
    for section in ("data", "pipeline", "eval", "gradcheck", "export"):
        for key, default in DEFAULTS[section].items():
            _check_type(tree[section][key], default, f"{section}.{key}")
    _check_type(tree["seed"], 0, "seed")
    if not isinstance(tree["attacks"], list):
        raise ConfigInvalid("'attacks' must be a list")
    for i, attack in enumerate(tree["attacks"]):
        if not isinstance(attack, dict):
            raise ConfigInvalid(f"attacks[{i}] must be an object")
        unknown = set(attack) - _ATTACK_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown key(s) {sorted(unknown)} in attacks[{i}]")
    if tree["data"]["dataset"] not in DATA_FILES:
        raise ConfigInvalid(f"data.dataset must be one of {sorted(DATA_FILES)}")
    if tree["eval"]["stage"] not in STAGES:
        raise ConfigInvalid(f"eval.stage must be one of {list(STAGES)}")
    if tree["export"]["split"] not in ("train", "test"):
        raise ConfigInvalid("export.split must be 'train' or 'test'")
    pipeline_config(tree)
    attack_configs(tree)
    return tree


def pipeline_config(tree: dict) -> PipelineConfig:
    try:
        return PipelineConfig(seed=tree["seed"], **tree["pipeline"])
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"pipeline: {exc}") from None


def attack_configs(tree: dict) -> list[AttackConfig]:
    out = []
    for i, entry in enumerate(tree["attacks"]):
        try:
            out.append(AttackConfig(**{"seed": tree["seed"], **entry}))
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"attacks[{i}]: {exc}") from None
    return out


# ------------------------------------------------------------------ data


def load_split(tree: dict, split: str) -> Dataset:
    data = tree["data"]
    root = data["root"] or os.environ.get("TOPOREFORM_DATA_DIR")
    if not root:
        raise ConfigInvalid("no data root: set data.root or TOPOREFORM_DATA_DIR")
    name = data["dataset"]
    images, labels = (Path(root) / f for f in DATA_FILES[name][split])
    for path in (images, labels):
        if not path.exists():
            raise MissingArtifact(f"data file {path} not found")
    offset = data["label_offset"]
    if offset is None:
        offset = 1 if name == "emnist" else 0
    ds = load_idx(images, labels, num_classes=data["num_classes"], label_offset=offset,
                  transpose=name == "emnist" and data["emnist_transpose"])
    if split == "train" and data["train_limit"] is not None:
        ds = ds.subset(np.arange(min(len(ds), data["train_limit"])))
    return ds


def eval_subset(ds: Dataset, per_class: int | None) -> Dataset:
    """The first ``per_class`` test images of every class, in file order."""
    if per_class is None:
        return ds
    keep = np.concatenate([np.flatnonzero(ds.labels == c)[:per_class] for c in range(ds.num_classes)])
    return ds.subset(np.sort(keep))


# ----------------------------------------------------------------- models


def load_bundle(out: Path, tree: dict, num_classes: int, require=()) -> ModelBundle:
    tensors = {}
    for name in _MODEL_FILES:
        path = out / name
        if path.exists():
            tensors.update(load_weights(path))
        elif name in require:
            raise MissingArtifact(f"{path} not found; run the training command first")
    return ModelBundle.from_tensors(tensors, pipeline_config(tree), num_classes)


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _history(out: Path, name: str, history) -> None:
    _write(out / f"history_{name}.csv", history.to_csv())


# --------------------------------------------------------------- commands


def cmd_train_classifier(tree, out):
    train = load_split(tree, "train")
    clf, hist = train_classifier(train, pipeline_config(tree))
    save_weights(out / "classifier.trfm", prefixed("classifier", clf.params))
    _history(out, "classifier", hist)
    test = load_split(tree, "test")
    acc = float(np.mean(clf.predict(test.images) == test.labels))
    print(f"classifier test accuracy {acc:.4f}")


def cmd_train_topoae(tree, out):
    train = load_split(tree, "train")
    topo, hist = train_topoae(train, pipeline_config(tree))
    save_weights(out / "topoae.trfm", prefixed("topoae", topo.params))
    _history(out, "topoae", hist)
    print(f"topoae final reconstruction {hist.records[-1].components['rec']:.6f}")


def cmd_train_reformer(tree, out):
    """Trains the three reformer variants the ablation needs."""
    train = load_split(tree, "train")
    cfg = pipeline_config(tree)
    bundle = load_bundle(out, tree, train.num_classes, require=("classifier.trfm", "topoae.trfm"))
    tensors = {}
    variants = (("plain", dict(use_aux=False), "vae_plain", None),
                ("aux", dict(warmup_epochs=0), "vae_aux", "aux_joint"),
                ("warmup", {}, "vae_warm", "aux_warm"))
    for name, kwargs, vae_key, aux_key in variants:
        vae, aux, hist = train_reformer_freezeflow(train, bundle.topoae, bundle.classifier, cfg, **kwargs)
        tensors.update(prefixed(vae_key, vae.params))
        if aux_key is not None:
            tensors.update(prefixed(aux_key, aux.params))
        _history(out, f"reformer_{name}", hist)
        log.info("reformer variant %s trained", name)
    save_weights(out / "reformer.trfm", tensors)


def _bundle_and_test(tree, out, require):
    test = eval_subset(load_split(tree, "test"), tree["eval"]["per_class"])
    num_classes = tree["data"]["num_classes"] or test.num_classes
    return load_bundle(out, tree, num_classes, require), test


def _report(tree, stages_rows) -> dict:
    return {"dataset": tree["data"]["dataset"], "seed": tree["seed"],
            "stages": [{"name": s, "attacks": rows} for s, rows in stages_rows]}


def _emit(out: Path, stem: str, report: dict) -> None:
    _write(out / f"{stem}.json", report_json(report))
    _write(out / f"{stem}.csv", report_csv(report))
    sys.stdout.write(report_csv(report))


def cmd_evaluate(tree, out):
    """Clean metrics for every stage the trained artifacts support."""
    bundle, test = _bundle_and_test(tree, out, require=("classifier.trfm",))
    cfg = pipeline_config(tree)
    rows = []
    for stage in bundle.available_stages():
        target = bundle.target(stage, cfg.inference_noise)
        rows.append((stage, [evaluate_attack(target, test, AttackConfig(kind="none"),
                                             tree["eval"]["average"], x_adv=test.images)]))
    _emit(out, "evaluate", _report(tree, rows))


def cmd_attack(tree, out):
    """Attacks ``eval.stage`` with every configured attack."""
    stage = tree["eval"]["stage"]
    bundle, test = _bundle_and_test(tree, out, require=("classifier.trfm",))
    target = bundle.target(stage, pipeline_config(tree).inference_noise)
    clean_pred = target.predict(test.images)
    rows = []
    for i, attack in enumerate(attack_configs(tree)):
        x_adv = craft(target, test, attack)
        rows.append(evaluate_attack(target, test, attack, tree["eval"]["average"], clean_pred, x_adv))
        if tree["eval"]["save_adversarial"]:
            save_adversarial(out / f"adv_{i}_{attack.kind}.trfm", x_adv, test.labels, attack,
                             target.predict(x_adv) != test.labels)
        log.info("attack %d (%s) done", i, attack.kind)
    _emit(out, "attack", _report(tree, [(stage, rows)]))


def cmd_ablate(tree, out):
    bundle, test = _bundle_and_test(tree, out, require=_MODEL_FILES)
    report = ablation_run(test, attack_configs(tree), bundle, pipeline_config(tree),
                          tree["data"]["dataset"], average=tree["eval"]["average"])
    _emit(out, "ablation", report)


def gradcheck_table(seeds: int) -> list[tuple[str, float]]:
    return [(op, max(ad.finite_diff_check(op, seed=s) for s in range(seeds))) for op in ad.OP_KINDS]


def cmd_gradcheck(tree, out):
    tol = tree["gradcheck"]["tolerance"]
    table = gradcheck_table(tree["gradcheck"]["seeds"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["op", "max_rel_error", "ok"])
    for op, err in table:
        writer.writerow([op, f"{err:.3e}", "yes" if err < tol else "no"])
    _write(out / "gradcheck.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    bad = [op for op, err in table if not err < tol]
    if bad:
        raise GradcheckFailed(f"ops above tolerance {tol}: {', '.join(bad)}")


def cmd_export_latents(tree, out):
    ds = load_split(tree, tree["export"]["split"])
    bundle = load_bundle(out, tree, ds.num_classes, require=("topoae.trfm",))
    rows = export_latents(bundle.topoae, ds, out / "latents.csv")
    print(f"wrote {rows} rows to {out / 'latents.csv'}")


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-topoae": cmd_train_topoae,
    "train-reformer": cmd_train_reformer,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-latents": cmd_export_latents,
}


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toporeformer", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key; repeatable")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="master seed (overrides seed)")
    return parser


def _setup_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = None
    try:
        raw = None
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except FileNotFoundError:
                raise ConfigInvalid(f"config file {args.config} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{args.config}: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigInvalid("config root must be an object")
        tree = resolve_config(raw, args.overrides, args.seed, args.out)
        out = Path(tree["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "resolved_config.json", json.dumps(tree, indent=2, sort_keys=True) + "\n")
        handler = _setup_log(out)
        log.info("start %s", args.command)
        HANDLERS[args.command](tree, out)
        log.info("done %s", args.command)
        return 0
    except ConfigInvalid as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 1
    except TopoReformerError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        if handler is not None:
            log.error("%s: %s", exc.code, exc)
        return 2
    except (OSError, ValueError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
