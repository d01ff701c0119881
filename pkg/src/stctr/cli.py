"""Command-line entry point: ``stctr <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (YAML or JSON) with the optional
sections ``generate``, ``model``, ``train`` and ``experiment``; command-line
flags override file values. Outputs go to ``--out`` together with a
``manifest.json`` recording the resolved configuration and library versions.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import checkpoint as ck
from . import metrics
from .ablation import TABLE_ORDER, ablate, export_gate_heatmap, write_ablation_csv
from .errors import ConfigError, StctrError, StorageError
from .features import Vocabulary, load_jsonl
from .gradcheck import full_model_grad_check
from .model import VARIANTS, ModelConfig, model_notes
from .synthgen import GenConfig, generate, write_outputs
from .train import TrainConfig, score_records, split_by_request, train, write_curve

logger = logging.getLogger("stctr")

EXPERIMENT_DEFAULTS = {"test_fraction": 0.2, "split_seed": 0, "repeats": 5,
                       "variants": list(TABLE_ORDER), "variant": "full", "max_behaviors": 50}
MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab"]


# ----------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a mapping")
    unknown = set(cfg) - {"generate", "model", "train", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for key, value in cfg.items():
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
    return cfg


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, bool):
            p.add_argument(_flag(f.name), type=_parse_bool, default=None, metavar="BOOL")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            p.add_argument(_flag(f.name), type=type(default), default=None)
        else:
            # tuples, optionals and matrices are given as JSON literals
            p.add_argument(_flag(f.name), type=_parse_json, default=None, metavar="JSON")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_json(text: str):
    try:
        return json.loads(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a JSON literal: {text!r}") from exc


def _section(args, cfg: dict, section: str, keys) -> dict:
    out = dict(cfg.get(section, {}))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _gen_config(args, cfg) -> GenConfig:
    return GenConfig.from_dict(_section(args, cfg, "generate",
                                        [f.name for f in dataclasses.fields(GenConfig)]))


def _train_config(args, cfg) -> TrainConfig:
    return TrainConfig.from_dict(_section(args, cfg, "train",
                                          [f.name for f in dataclasses.fields(TrainConfig)]))


def _experiment(args, cfg) -> dict:
    exp = dict(EXPERIMENT_DEFAULTS)
    exp.update(_section(args, cfg, "experiment", list(EXPERIMENT_DEFAULTS)))
    unknown = set(exp) - set(EXPERIMENT_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
    return exp


def _model_config(args, cfg, vocab: Vocabulary) -> ModelConfig:
    d = _section(args, cfg, "model", MODEL_KEYS)
    unknown = set(d) - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    return ModelConfig(vocab=vocab.to_dict(), **d)


# ----------------------------------------------------------------- outputs

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, configs: dict, outputs: list) -> Path:
    manifest = {
        "command": command,
        "configs": configs,
        "versions": {"stctr": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_data(args, exp):
    dataset = Path(args.data)
    if dataset.is_dir():
        dataset = dataset / "dataset.jsonl"
    vocab_path = Path(args.vocab) if args.vocab else dataset.parent / "vocab.json"
    vocab = Vocabulary.load(vocab_path)
    data = load_jsonl(dataset, vocab, max_behaviors=int(exp["max_behaviors"]))
    return vocab, data


def _report_files(out: Path, records, mcfg=None) -> list:
    report = metrics.evaluate_records(records)
    paths = [out / "report.json", out / "groups.csv"]
    body = report.to_dict()
    if mcfg is not None:
        body = {"header": {"model": model_notes(mcfg)}, **body}
    _write_text(paths[0], json.dumps(body, indent=2, sort_keys=True) + "\n")
    try:
        metrics.write_group_csv(paths[1], report)
    except OSError as exc:
        raise StorageError(f"cannot write {paths[1]}: {exc}") from exc
    return paths


# ----------------------------------------------------------------- commands

def cmd_generate(args, cfg) -> int:
    gcfg = _gen_config(args, cfg)
    out = _out_dir(args.out)
    synth = generate(gcfg)
    paths = write_outputs(synth, gcfg, out)
    write_manifest(out, "generate", {"generate": gcfg.to_dict()}, list(paths.values()))
    print(f"wrote {len(synth.data)} impressions to {paths['dataset']}")
    return 0


def cmd_train(args, cfg) -> int:
    exp = _experiment(args, cfg)
    tcfg = _train_config(args, cfg)
    vocab, data = _load_data(args, exp)
    mcfg = _model_config(args, cfg, vocab).variant(exp["variant"])
    out = _out_dir(args.out)
    trn, tst = split_by_request(data, exp["test_fraction"], exp["split_seed"])
    state = train(mcfg, tcfg, trn, eval_data=tst if tcfg.eval_every else None)
    outputs = [out / "checkpoint.bin", out / "curve.csv", out / "predictions.csv"]
    ck.save(outputs[0], ck.Checkpoint.from_model(state.model, state.acc, state.step,
                                                 tcfg.to_dict()))
    try:
        write_curve(outputs[1], state.curve)
        records = score_records(state.model, tst)
        metrics.write_predictions(outputs[2], records)
    except OSError as exc:
        raise StorageError(f"cannot write training outputs: {exc}") from exc
    outputs += _report_files(out, records, mcfg)
    write_manifest(out, "train", {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                                  "experiment": exp}, outputs)
    print((out / "report.json").read_text(), end="")
    return 0


def cmd_evaluate(args, cfg) -> int:
    out = _out_dir(args.out)
    configs = {}
    if args.predictions:
        records = metrics.read_predictions(args.predictions)
    else:
        if not (args.checkpoint and args.data):
            raise ConfigError("evaluate needs --predictions, or --checkpoint with --data")
        exp = _experiment(args, cfg)
        ckpt = ck.load(args.checkpoint)
        _, data = _load_data(args, exp)
        if args.split == "test":
            data = split_by_request(data, exp["test_fraction"], exp["split_seed"])[1]
        records = score_records(ckpt.to_model(), data)
        configs = {"model": ckpt.model_config.to_dict(), "experiment": exp}
        try:
            metrics.write_predictions(out / "predictions.csv", records)
        except OSError as exc:
            raise StorageError(f"cannot write predictions: {exc}") from exc
    outputs = _report_files(out, records, None if args.predictions else ckpt.model_config)
    if not args.predictions:
        outputs.append(out / "predictions.csv")
    write_manifest(out, "evaluate", configs, outputs)
    print(outputs[0].read_text(), end="")
    return 0


def cmd_ablate(args, cfg) -> int:
    exp = _experiment(args, cfg)
    tcfg = _train_config(args, cfg)
    vocab, data = _load_data(args, exp)
    base = _model_config(args, cfg, vocab)
    out = _out_dir(args.out)
    trn, tst = split_by_request(data, exp["test_fraction"], exp["split_seed"])
    result = ablate(trn, tst, base, tcfg, int(exp["repeats"]), tuple(exp["variants"]))
    outputs = [out / "ablation.csv", out / "ablation_runs.json"]
    try:
        write_ablation_csv(outputs[0], result)
    except OSError as exc:
        raise StorageError(f"cannot write {outputs[0]}: {exc}") from exc
    _write_text(outputs[1], json.dumps(result.runs, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "ablate", {"model": base.to_dict(), "train": tcfg.to_dict(),
                                   "experiment": exp}, outputs)
    print(outputs[0].read_text(), end="")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    report = full_model_grad_check(seed=args.seed, batch_size=args.batch_size, dim=args.dim,
                                   eps=args.eps, rank=args.rank, variant=args.variant)
    print(json.dumps({"max_rel_error": report.max_rel_error, "worst_param": report.worst_param,
                      "worst_index": list(report.worst_index or ()),
                      "passed": report.passed(args.tol)}, indent=2))
    return 0 if report.passed(args.tol) else 4


def cmd_export_heatmap(args, cfg) -> int:
    exp = _experiment(args, cfg)
    ckpt = ck.load(args.checkpoint)
    _, data = _load_data(args, exp)
    out = Path(args.out)
    _out_dir(out.parent)
    try:
        export_gate_heatmap(ckpt, data, out)
    except OSError as exc:
        raise StorageError(f"cannot write heatmap {out}: {exc}") from exc
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stctr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML or JSON config file")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset.jsonl, or a directory holding it")
            p.add_argument("--vocab", help="vocab.json (default: next to the dataset)")
        return p

    def experiment_flags(p):
        p.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
        p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
        p.add_argument("--max-behaviors", dest="max_behaviors", type=int, default=None)

    p = common(sub.add_parser("generate", help="write a synthetic dataset"), data=False)
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, GenConfig)
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train one model variant"))
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    experiment_flags(p)
    # one --seed drives both initialisation and shuffling
    _add_dataclass_flags(p, ModelConfig, skip=("vocab",))
    _add_dataclass_flags(p, TrainConfig, skip=("seed",))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics from predictions or a checkpoint")
    p.add_argument("--config")
    p.add_argument("--predictions", help="predictions CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--split", choices=("all", "test"), default="test")
    p.add_argument("--out", required=True)
    experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ablate", help="train every variant and tabulate"))
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--variants", type=lambda s: s.split(","), default=None)
    experiment_flags(p)
    # one --seed drives both initialisation and shuffling
    _add_dataclass_flags(p, ModelConfig, skip=("vocab",))
    _add_dataclass_flags(p, TrainConfig, skip=("seed",))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck, config=None)

    p = common(sub.add_parser("export-heatmap", help="mean gate weight per context"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    experiment_flags(p)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except StctrError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
