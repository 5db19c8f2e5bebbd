"""Dataset, vocabulary and KB ingestion, binary checkpoints, synthetic worlds.

Wire formats:
  dataset   newline-delimited JSON, one scene per line
  vocab     one JSON document {"objects": [...], "predicates": [...]}
  kb        newline-delimited JSON {"head", "predicate", "tail", "count"?}
  checkpoint  binary: magic "SCHM", u32 version (little-endian),
              u32 length-prefixed JSON metadata, then raw tensor bytes
              in the model's declared parameter order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class SceneObject:
    box: List[float]
    label: str
    feature: Optional[List[float]] = None


@dataclass
class Relation:
    head: int
    predicate: str
    tail: int


@dataclass
class SceneRecord:
    id: str
    objects: List[SceneObject]
    relations: List[Relation]


@dataclass
class KbTriple:
    head: str
    predicate: str
    tail: str
    count: int = 1


class Vocabulary:
    """Ordered class names; order fixes the integer indices."""

    def __init__(self, objects: Sequence[str], predicates: Sequence[str]):
        if len(set(objects)) != len(objects):
            raise DataError("duplicate object class names")
        if len(set(predicates)) != len(predicates):
            raise DataError("duplicate predicate class names")
        self.objects = list(objects)
        self.predicates = list(predicates)
        self._obj_index = {name: i for i, name in enumerate(self.objects)}
        self._pred_index = {name: i for i, name in enumerate(self.predicates)}

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    def object_index(self, name: str) -> int:
        try:
            return self._obj_index[name]
        except KeyError:
            raise DataError(f"unknown object label {name!r}") from None

    def predicate_index(self, name: str) -> int:
        try:
            return self._pred_index[name]
        except KeyError:
            raise DataError(f"unknown predicate label {name!r}") from None

    def to_json(self) -> str:
        return json.dumps({"objects": self.objects, "predicates": self.predicates},
                          sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return (isinstance(other, Vocabulary)
                and self.objects == other.objects
                and self.predicates == other.predicates)


def load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "objects" not in doc or "predicates" not in doc:
        raise DataError(f"{path}: vocabulary must contain 'objects' and 'predicates'")
    return Vocabulary(doc["objects"], doc["predicates"])


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vocab.to_json() + "\n")


def _parse_record(doc: dict, vocab: Vocabulary, where: str) -> SceneRecord:
    try:
        objects = []
        for i, obj in enumerate(doc["objects"]):
            box = [float(v) for v in obj["box"]]
            if len(box) != 4:
                raise DataError(f"object {i}: box must have 4 entries")
            label = obj["label"]
            vocab.object_index(label)
            feature = obj.get("feature")
            if feature is not None:
                feature = [float(v) for v in feature]
            objects.append(SceneObject(box=box, label=label, feature=feature))
        relations = []
        for r, rel in enumerate(doc["relations"]):
            head, tail = int(rel["head"]), int(rel["tail"])
            if not (0 <= head < len(objects)) or not (0 <= tail < len(objects)):
                raise DataError(f"relation {r}: object index out of range")
            vocab.predicate_index(rel["predicate"])
            relations.append(Relation(head=head, predicate=rel["predicate"], tail=tail))
        widths = {len(o.feature) for o in objects if o.feature is not None}
        if len(widths) > 1:
            raise DataError(f"inconsistent feature widths {sorted(widths)}")
        return SceneRecord(id=str(doc["id"]), objects=objects, relations=relations)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise DataError(f"{where}: {exc}") from None
        raise DataError(f"{where}: malformed record ({exc})") from None


def load_dataset(path: str, vocab: Vocabulary) -> List[SceneRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            records.append(_parse_record(doc, vocab, where=f"{path}:{lineno}"))
    return records


def record_to_json(record: SceneRecord) -> str:
    doc = {
        "id": record.id,
        "objects": [
            {"box": o.box, "label": o.label, **({"feature": o.feature} if o.feature is not None else {})}
            for o in record.objects
        ],
        "relations": [{"head": r.head, "predicate": r.predicate, "tail": r.tail}
                      for r in record.relations],
    }
    return json.dumps(doc, sort_keys=True)


def save_dataset(records: Sequence[SceneRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record) + "\n")


def load_kb(path: str, vocab: Vocabulary) -> List[KbTriple]:
    """Load class-level triples; duplicates merge by summed count."""
    merged: Dict[Tuple[str, str, str], int] = {}
    order: List[Tuple[str, str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                head, pred, tail = doc["head"], doc["predicate"], doc["tail"]
                count = int(doc.get("count", 1))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed KB triple ({exc})") from None
            if count < 1:
                raise DataError(f"{path}:{lineno}: count must be >= 1")
            try:
                vocab.object_index(head)
                vocab.object_index(tail)
                vocab.predicate_index(pred)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            key = (head, pred, tail)
            if key not in merged:
                merged[key] = 0
                order.append(key)
            merged[key] += count
    return [KbTriple(head=h, predicate=p, tail=t, count=merged[(h, p, t)])
            for (h, p, t) in order]


def save_kb(triples: Sequence[KbTriple], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps({"head": t.head, "predicate": t.predicate,
                                 "tail": t.tail, "count": t.count}, sort_keys=True) + "\n")


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"SCHM"
_VERSION = 1


def save_checkpoint(model, path: str, training_step: int = 0) -> None:
    """Atomic binary dump of all model tensors plus config and vocabulary."""
    named = model.named_parameters()
    meta = {
        "config": model.config.to_dict(),
        "vocab": {"objects": model.vocab.objects, "predicates": model.vocab.predicates},
        "vocab_digest": model.vocab.digest(),
        "training_step": training_step,
        "tensors": [{"name": name, "shape": list(t.shape), "dtype": str(t.data.dtype)}
                    for name, t in named],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str, vocab: Optional[Vocabulary] = None):
    """Rebuild a model from a checkpoint; digest-checked against `vocab` if given."""
    from .model import ModelConfig, build_model  # deferred to avoid a cycle

    with open(path, "rb") as fh:
        header = fh.read(4)
        if header != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {header!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
        meta = json.loads(_read_exact(fh, meta_len, path).decode("utf-8"))

        ckpt_vocab = Vocabulary(meta["vocab"]["objects"], meta["vocab"]["predicates"])
        if ckpt_vocab.digest() != meta["vocab_digest"]:
            raise CheckpointError(f"{path}: vocabulary digest mismatch")
        if vocab is not None and vocab.digest() != meta["vocab_digest"]:
            raise CheckpointError(
                f"{path}: checkpoint was written for a different vocabulary")

        config = ModelConfig.from_dict(meta["config"])
        model = build_model(config, ckpt_vocab, np.random.default_rng(0))
        named = dict(model.named_parameters())
        declared = [entry["name"] for entry in meta["tensors"]]
        if declared != [name for name, _ in model.named_parameters()]:
            raise CheckpointError(f"{path}: tensor list does not match the model layout")
        for entry in meta["tensors"]:
            tensor = named[entry["name"]]
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = _read_exact(fh, nbytes, path)
            tensor.data = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared tensors")
    model.training_step = int(meta.get("training_step", 0))
    return model


def _read_exact(fh, count: int, path: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointError(f"{path}: truncated file")
    return raw


# --- synthetic world --------------------------------------------------------

@dataclass
class SynthWorldSpec:
    """Desk-scale surrogate world for the full pipeline experiments.

    Scenes are relation chains: object classes follow the chain with
    probability `class_coherence` (next class = previous + 1 mod C),
    predicates are drawn from the per-class-pair conditional table
    `pkg`, features are class prototypes plus gaussian noise, and
    occluded objects get a pure-noise feature (zero prototype).
    """

    num_object_classes: int = 20
    num_predicate_classes: int = 10
    feature_dim: int = 64
    feature_noise: float = 0.3
    occlusion_rate: float = 0.3
    train_scenes: int = 2000
    test_scenes: int = 500
    objects_min: int = 4
    objects_max: int = 8
    class_coherence: float = 0.9
    pkg_peak: float = 0.9
    seed: int = 0
    pkg: Optional[np.ndarray] = None          # (C_o, C_o, C_p) conditionals
    prototypes: Optional[np.ndarray] = None   # (C_o, d)

    def validate(self) -> None:
        if self.num_object_classes < 1 or self.num_predicate_classes < 1:
            raise DataError("class counts must be positive")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise DataError("occlusion rate must be in [0, 1)")
        if self.objects_min < 2 or self.objects_max < self.objects_min:
            raise DataError("objects-per-scene range must be >= 2 and ordered")
        if self.pkg is not None:
            sums = self.pkg.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=1e-6):
                raise DataError("pkg conditionals must lie on the simplex")


@dataclass
class SynthWorld:
    train: List[SceneRecord]
    test: List[SceneRecord]
    kb: List[KbTriple]
    vocab: Vocabulary
    pkg: np.ndarray
    prototypes: np.ndarray


def default_pkg(num_obj: int, num_pred: int, peak: float) -> np.ndarray:
    """Peaked conditionals: dominant predicate (h + t) mod P, rest uniform."""
    pkg = np.full((num_obj, num_obj, num_pred), (1.0 - peak) / max(num_pred - 1, 1))
    if num_pred == 1:
        pkg[:] = 1.0
        return pkg
    for h in range(num_obj):
        for t in range(num_obj):
            pkg[h, t, (h + t) % num_pred] = peak
    return pkg


def _object_names(count: int) -> List[str]:
    return [f"obj_{i:02d}" for i in range(count)]


def _predicate_names(count: int) -> List[str]:
    return [f"rel_{i:02d}" for i in range(count)]


def synth_generate(spec: SynthWorldSpec) -> SynthWorld:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    co, cp, d = spec.num_object_classes, spec.num_predicate_classes, spec.feature_dim
    vocab = Vocabulary(_object_names(co), _predicate_names(cp))
    pkg = spec.pkg if spec.pkg is not None else default_pkg(co, cp, spec.pkg_peak)
    prototypes = (spec.prototypes if spec.prototypes is not None
                  else rng.normal(size=(co, d)))

    def make_scene(scene_id: str) -> SceneRecord:
        n = int(rng.integers(spec.objects_min, spec.objects_max + 1))
        classes = np.zeros(n, dtype=np.int64)
        classes[0] = rng.integers(co)
        for k in range(1, n):
            if rng.random() < spec.class_coherence:
                classes[k] = (classes[k - 1] + 1) % co
            else:
                classes[k] = rng.integers(co)
        objects = []
        for k in range(n):
            box = [float(rng.uniform(0, 100)), float(rng.uniform(0, 100)),
                   float(rng.uniform(10, 60)), float(rng.uniform(10, 60))]
            if rng.random() < spec.occlusion_rate:
                feat = rng.normal(0.0, spec.feature_noise, size=d)
            else:
                feat = prototypes[classes[k]] + rng.normal(0.0, spec.feature_noise, size=d)
            objects.append(SceneObject(box=box, label=vocab.objects[classes[k]],
                                       feature=[float(v) for v in feat]))
        relations = []
        for k in range(n - 1):
            h, t = classes[k], classes[k + 1]
            p = int(rng.choice(cp, p=pkg[h, t]))
            relations.append(Relation(head=k, predicate=vocab.predicates[p], tail=k + 1))
        return SceneRecord(id=scene_id, objects=objects, relations=relations)

    train = [make_scene(f"train_{i:05d}") for i in range(spec.train_scenes)]
    test = [make_scene(f"test_{i:05d}") for i in range(spec.test_scenes)]
    kb = kb_from_records(train)
    return SynthWorld(train=train, test=test, kb=kb, vocab=vocab,
                      pkg=pkg, prototypes=prototypes)


def kb_from_records(records: Sequence[SceneRecord]) -> List[KbTriple]:
    """Aggregate class-level triple counts from scene annotations."""
    counts: Dict[Tuple[str, str, str], int] = {}
    order: List[Tuple[str, str, str]] = []
    for record in records:
        for rel in record.relations:
            key = (record.objects[rel.head].label, rel.predicate,
                   record.objects[rel.tail].label)
            if key not in counts:
                counts[key] = 0
                order.append(key)
            counts[key] += 1
    return [KbTriple(head=h, predicate=p, tail=t, count=counts[(h, p, t)])
            for (h, p, t) in order]
