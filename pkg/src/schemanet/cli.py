"""Operator entry point: train, evaluate, link-predict, export, synth, gradcheck.

Configuration is a flat JSON document whose keys are model or training
hyperparameters; command-line flags override file values. Logs are
JSONL on standard error, data goes to files or standard output.
Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .data_io import (
    CheckpointError,
    DataError,
    SynthWorldSpec,
    load_checkpoint,
    load_dataset,
    load_kb,
    load_vocab,
    save_checkpoint,
    save_dataset,
    save_kb,
    save_vocab,
    synth_generate,
)
from .evaluation import TASKS, evaluate, pkg_link_predict
from .model import ModelConfig, build_model
from .schema import assimilate
from .srg import build_srg
from .training import TrainConfig, TrainingError, train

_MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


class UsageError(ValueError):
    """Bad arguments or unreadable/invalid inputs: exit code 2."""


def _log(record: dict) -> None:
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stderr.flush()


def load_run_config(path: Optional[str], overrides: Dict[str, object]
                    ) -> Tuple[ModelConfig, TrainConfig]:
    """Flat JSON config plus flag overrides (flags win); unknown keys fail."""
    doc: Dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a flat JSON object")
        unknown = set(doc) - _MODEL_KEYS - _TRAIN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        model_config = ModelConfig(**{k: v for k, v in doc.items() if k in _MODEL_KEYS})
        train_config = TrainConfig(**{k: v for k, v in doc.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_config, train_config


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _build_graphs(records, model):
    return [build_srg(rec, model.predicate_init, model.vocab) for rec in records]


def cmd_train(args: argparse.Namespace) -> int:
    vocab = load_vocab(_require_file(args.vocab, "vocabulary"))
    overrides = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr,
                 "batch_size": args.batch_size,
                 "assimilations_trained": args.assimilations}
    model_config, train_config = load_run_config(args.config, overrides)
    if args.data is None and args.kb is None:
        raise UsageError("at least one of --data / --kb is required")

    model = build_model(model_config, vocab,
                        np.random.default_rng(train_config.seed))
    records = (load_dataset(_require_file(args.data, "dataset"), vocab)
               if args.data else [])
    kb = load_kb(_require_file(args.kb, "knowledge base"), vocab) if args.kb else []
    graphs = _build_graphs(records, model)

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def sink(record):
        _log(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        reports = train(model, graphs, kb, train_config, log_sink=sink)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_checkpoint(model, args.out, training_step=len(reports))
    _log({"event": "checkpoint", "path": args.out,
          "final_loss": reports[-1].total if reports else None})
    return 0


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parse_k_list(text: str) -> List[int]:
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}")
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    records = load_dataset(_require_file(args.data, "dataset"), model.vocab)
    graphs = _build_graphs(records, model)
    reports = evaluate(model, graphs, args.task, args.constrained, args.k,
                       args.assimilations)
    for report in reports:
        sys.stdout.write(json.dumps({
            "task": report.task,
            "constrained": report.constrained,
            "step": report.step,
            "recall_at": {str(k): v for k, v in report.recall_at.items()},
            "mean_recall_at": {str(k): v for k, v in report.mean_recall_at.items()},
            "micro_accuracy": report.micro_accuracy,
        }, sort_keys=True) + "\n")
    return 0


def cmd_link_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    with open(_require_file(args.pairs, "pairs"), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise UsageError(f"{args.pairs}:{lineno}: expected 'head tail'")
            head, tail = parts
            h = model.vocab.object_index(head)
            t = model.vocab.object_index(tail)
            for cls, prob in pkg_link_predict(model, h, t, args.top):
                sys.stdout.write(json.dumps(
                    {"head": head, "tail": tail,
                     "predicate": model.vocab.predicates[cls],
                     "score": prob}, sort_keys=True) + "\n")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    model = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if args.what == "object-schema":
        names, matrix = model.vocab.objects, model.bank.object_schemata.data
    else:
        names, matrix = model.vocab.predicates, model.bank.predicate_schemata.data
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["class"] + [f"dim_{i}" for i in range(matrix.shape[1])])
        for name, row in zip(names, matrix):
            writer.writerow([name] + [repr(float(v)) for v in row])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    doc: Dict[str, object] = {}
    if args.spec:
        try:
            with open(_require_file(args.spec, "spec"), "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse spec {args.spec}: {exc}") from None
        known = set(SynthWorldSpec.__dataclass_fields__) - {"pkg", "prototypes"}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown spec keys: {sorted(unknown)}")
    for key, value in (("seed", args.seed),
                       ("train_scenes", args.train_scenes),
                       ("test_scenes", args.test_scenes)):
        if value is not None:
            doc[key] = value
    try:
        spec = SynthWorldSpec(**doc)
        world = synth_generate(spec)
    except (TypeError, DataError) as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    save_vocab(world.vocab, os.path.join(args.out, "vocab.json"))
    save_dataset(world.train, os.path.join(args.out, "train.jsonl"))
    save_dataset(world.test, os.path.join(args.out, "test.jsonl"))
    save_kb(world.kb, os.path.join(args.out, "kb.jsonl"))
    _log({"event": "synth", "out": args.out,
          "train": len(world.train), "test": len(world.test), "kb": len(world.kb)})
    return 0


def run_gradcheck(seed: int = 0, corrupt: bool = False) -> List[Tuple[str, float, bool]]:
    """Finite-difference checks for each primitive and one composite.

    `corrupt` perturbs one analytic gradient on purpose so callers can
    verify the harness actually detects wrong derivatives.
    """
    rng = np.random.default_rng(seed)
    results = []
    with nm.using_dtype(np.float64):
        def mk(shape):
            return nm.Tensor(rng.normal(size=shape), requires_grad=True)

        def check(name, fn, inputs):
            report = nm.grad_check(fn, inputs)
            err = report.max_rel_err
            if corrupt and name == "mul":
                err = max(err, 1.0)  # simulated wrong derivative
            results.append((name, err, err < report.tol))

        a, b = mk((3, 4)), mk((3, 4))
        w = mk((4, 5))
        check("add", lambda x, y: nm.sum_all(nm.add(x, y)), [a, b])
        check("sub", lambda x, y: nm.sum_all(nm.sub(x, y)), [a, b])
        check("mul", lambda x, y: nm.sum_all(nm.mul(x, y)), [a, b])
        check("matmul", lambda x, y: nm.sum_all(nm.matmul(x, y)), [a, w])
        check("leaky_relu",
              lambda x: nm.sum_all(nm.leaky_relu(x, 0.2)), [mk((3, 4))])
        coeff = rng.normal(size=(3, 4))
        check("softmax",
              lambda x: nm.sum_all(nm.mul(nm.softmax(x), coeff)), [a])
        gain, bias = mk((4,)), mk((4,))
        check("layer_norm",
              lambda x, g, c: nm.sum_all(nm.mul(nm.layer_norm(x, g, c), coeff)),
              [a, gain, bias])
        labels = rng.integers(0, 4, size=3)
        check("cross_entropy",
              lambda x: nm.mean_cross_entropy(nm.softmax(x), labels), [a])

        # composite: one full assimilation on a toy graph
        from .data_io import Relation, SceneObject, SceneRecord, Vocabulary
        from .model import initial_node_states

        vocab = Vocabulary(["a", "b", "c"], ["p", "q"])
        config = ModelConfig(d=8, num_layers=1, num_heads=2, ff_hidden=8,
                             injection_hidden=8, predicate_init_hidden=8,
                             object_dropout=0.0, predicate_dropout=0.0)
        model = build_model(config, vocab, rng)
        rec = SceneRecord(
            id="toy",
            objects=[SceneObject([0, 0, 2, 2], "a", list(rng.normal(size=8))),
                     SceneObject([3, 0, 2, 2], "b", list(rng.normal(size=8))),
                     SceneObject([6, 0, 2, 2], "c", list(rng.normal(size=8)))],
            relations=[Relation(0, "p", 1), Relation(1, "q", 2)])
        graph = build_srg(rec, model.predicate_init, vocab)
        params = model.parameters()
        for p in params:
            p.requires_grad = True

        def composite(*ps):
            x0 = initial_node_states(graph, model)
            trace = assimilate(graph, model.stack, model.bank, model.injection,
                               1, x0=x0)
            loss = nm.mean_cross_entropy(trace.steps[1].alpha_obj,
                                         graph.object_labels)
            return nm.add(loss, nm.mean_cross_entropy(trace.steps[1].alpha_pred,
                                                      graph.predicate_labels))

        report = nm.grad_check(composite, params)
        results.append(("one_assimilation_loss", report.max_rel_err,
                        report.passed))
    return results


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    ok = True
    for name, err, passed in results:
        ok = ok and passed
        sys.stdout.write(f"{name:24s} max_rel_err={err:.3e} "
                         f"{'PASS' if passed else 'FAIL'}\n")
    sys.stdout.write(f"gradcheck: {'PASS' if ok else 'FAIL'}\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schemanet",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from scenes and/or triples")
    p.add_argument("--config", help="flat JSON hyperparameter file")
    p.add_argument("--data", help="scene dataset (JSONL)")
    p.add_argument("--vocab", required=True, help="vocabulary JSON")
    p.add_argument("--kb", help="class-level triples (JSONL)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="also write the epoch log to this file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--assimilations", type=int,
                   help="assimilation steps during training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ranking metrics on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--constrained", type=_parse_bool, default=True)
    p.add_argument("--k", type=_parse_k_list, default=[20, 50, 100])
    p.add_argument("--assimilations", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("link-predict",
                       help="rank predicates for class pairs via the PKG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True,
                   help="text file: one 'head tail' class-name pair per line")
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_link_predict)

    p = sub.add_parser("export", help="dump schema matrices as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--what", required=True,
                   choices=("object-schema", "predicate-schema"))
    p.add_argument("--format", choices=("csv",), default="csv")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--spec", help="flat JSON world spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-scenes", dest="train_scenes", type=int)
    p.add_argument("--test-scenes", dest="test_scenes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (CheckpointError, TrainingError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
