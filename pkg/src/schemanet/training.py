"""Multi-task IC+ICP training: losses, scheduled sampling, epoch loop.

Image batches optimize cross-entropy at every assimilation step; KB
batches optimize the triple-only path. Scheduled sampling rewrites a
bounded fraction of misclassified rows feeding the schema messages with
their one-hot labels; loss targets are never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .data_io import KbTriple, Vocabulary
from .model import ModelParams, initial_node_states
from .schema import AssimilationTrace, assimilate, kb_assimilate, one_hot_rows
from .srg import SceneRepGraph


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    assimilations_trained: int = 4
    lr: float = 1e-5
    batch_size: int = 14
    epochs: int = 24
    scheduled_max_rate: float = 0.10
    ramp_end_epoch: Optional[int] = None   # defaults to the first third of training
    ic_weight: float = 1.0
    icp_weight: float = 1.0
    optimizer: str = "adam"                # "adam" or "sgd"
    kb_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.scheduled_max_rate <= 1.0:
            raise ValueError("scheduled-sampling max rate must be in [0, 1]")
        if self.assimilations_trained < 0:
            raise ValueError("assimilations_trained must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def ramp_end(self) -> int:
        if self.ramp_end_epoch is not None:
            return max(1, self.ramp_end_epoch)
        return max(1, self.epochs // 3)


@dataclass
class LossReport:
    object_losses: List[float] = field(default_factory=list)   # per assimilation step
    predicate_losses: List[float] = field(default_factory=list)
    total: float = 0.0
    replaced: int = 0


def ic_loss(step, object_labels, predicate_labels) -> nm.Tensor:
    """Step-0 cross-entropy with equal per-node weight, objects and predicates pooled."""
    n = step.alpha_obj.shape[0]
    m = step.alpha_pred.shape[0]
    total = nm.scale(nm.mean_cross_entropy(step.alpha_obj, object_labels), n)
    if m > 0:
        total = nm.add(total, nm.scale(
            nm.mean_cross_entropy(step.alpha_pred, predicate_labels), m))
    return nm.scale(total, 1.0 / (n + m))


def multi_task_loss(trace: AssimilationTrace, object_labels, predicate_labels,
                    weights: Optional[Sequence[float]] = None) -> Tuple[nm.Tensor, LossReport]:
    """Weighted sum of per-step pooled cross-entropies over the whole trace."""
    if len(trace) < 1:
        raise ValueError("trace must contain at least the step-0 classification")
    if weights is None:
        weights = [1.0] * len(trace)
    report = LossReport(replaced=sum(trace.replaced_counts))
    total = None
    for step, w in zip(trace.steps, weights):
        n = step.alpha_obj.shape[0]
        m = step.alpha_pred.shape[0]
        obj_ce = nm.mean_cross_entropy(step.alpha_obj, object_labels)
        report.object_losses.append(obj_ce.item())
        part = nm.scale(obj_ce, n)
        if m > 0:
            pred_ce = nm.mean_cross_entropy(step.alpha_pred, predicate_labels)
            report.predicate_losses.append(pred_ce.item())
            part = nm.add(part, nm.scale(pred_ce, m))
        else:
            report.predicate_losses.append(0.0)
        part = nm.scale(part, w / (n + m))
        total = part if total is None else nm.add(total, part)
    report.total = total.item()
    return total, report


def _select_false_negatives(alpha_data: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if alpha_data.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(alpha_data.argmax(axis=-1) != labels)


def _replace_rows(alpha: nm.Tensor, labels: np.ndarray, rows: np.ndarray) -> nm.Tensor:
    if rows.size == 0:
        return alpha
    keep = np.ones((alpha.shape[0], 1), dtype=alpha.data.dtype)
    keep[rows] = 0.0
    onehot = np.zeros_like(alpha.data)
    onehot[rows, labels[rows]] = 1.0
    return nm.add(nm.mul(alpha, nm.Tensor(keep)), nm.Tensor(onehot))


def scheduled_replace(alpha: nm.Tensor, labels, rate: float, rng,
                      cap_nodes: Optional[int] = None) -> Tuple[nm.Tensor, int]:
    """Replace up to ceil(rate * nodes) randomly sampled misclassified rows
    with their one-hot labels; correct rows are never touched."""
    labels = np.asarray(labels, dtype=np.int64)
    if rate == 0.0 or alpha.shape[0] == 0:
        return alpha, 0
    cap = math.ceil(rate * (cap_nodes if cap_nodes is not None else alpha.shape[0]))
    fn_rows = _select_false_negatives(alpha.data, labels)
    count = min(cap, fn_rows.size)
    if count == 0:
        return alpha, 0
    chosen = rng.choice(fn_rows, size=count, replace=False)
    return _replace_rows(alpha, labels, chosen), count


def joint_scheduled_replace(alpha_obj: nm.Tensor, alpha_pred: nm.Tensor,
                            object_labels, predicate_labels, rate: float,
                            rng) -> Tuple[nm.Tensor, nm.Tensor, int]:
    """Scheduled sampling with one cap over all n+m nodes of the graph."""
    object_labels = np.asarray(object_labels, dtype=np.int64)
    predicate_labels = np.asarray(predicate_labels, dtype=np.int64)
    n, m = alpha_obj.shape[0], alpha_pred.shape[0]
    if rate == 0.0 or n + m == 0:
        return alpha_obj, alpha_pred, 0
    cap = math.ceil(rate * (n + m))
    fn_obj = _select_false_negatives(alpha_obj.data, object_labels)
    fn_pred = _select_false_negatives(alpha_pred.data, predicate_labels) + n
    pool = np.concatenate([fn_obj, fn_pred])
    count = min(cap, pool.size)
    if count == 0:
        return alpha_obj, alpha_pred, 0
    chosen = rng.choice(pool, size=count, replace=False)
    alpha_obj = _replace_rows(alpha_obj, object_labels, chosen[chosen < n])
    alpha_pred = _replace_rows(alpha_pred, predicate_labels, chosen[chosen >= n] - n)
    return alpha_obj, alpha_pred, count


def ramp(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from 0 at epoch 0 to the max rate at the ramp end."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.scheduled_max_rate * min(1.0, epoch / config.ramp_end())


def _optimizer_step(model: ModelParams, config: TrainConfig, adam_state) -> None:
    params = model.parameters()
    if config.optimizer == "adam":
        nm.adam_step(adam_state, params)
    else:
        nm.sgd_step(params, config.lr)
    model.training_step += 1


def _scene_loss(model: ModelParams, graph: SceneRepGraph, config: TrainConfig,
                rate: float, rng) -> Tuple[nm.Tensor, LossReport]:
    x0 = initial_node_states(graph, model, training=True, rng=rng)

    def hook(t, alpha_obj, alpha_pred):
        return joint_scheduled_replace(alpha_obj, alpha_pred, graph.object_labels,
                                       graph.predicate_labels, rate, rng)

    trace = assimilate(graph, model.stack, model.bank, model.injection,
                       config.assimilations_trained, x0=x0,
                       message_alpha_hook=hook if rate > 0 else None)
    weights = [config.ic_weight] + [config.icp_weight] * (len(trace) - 1)
    return multi_task_loss(trace, graph.object_labels, graph.predicate_labels, weights)


def _kb_batch_loss(model: ModelParams, batch: Sequence[Tuple[int, int, int]]) -> nm.Tensor:
    total = None
    for head, pred, tail in batch:
        dist = kb_assimilate(head, tail, model.stack, model.bank, model.injection)
        ce = nm.cross_entropy(nm.reshape(dist, (dist.shape[1],)), pred)
        total = ce if total is None else nm.add(total, ce)
    return nm.scale(total, 1.0 / len(batch))


def kb_triple_ids(kb: Sequence[KbTriple], vocab: Vocabulary) -> List[Tuple[int, int, int]]:
    return [(vocab.object_index(t.head), vocab.predicate_index(t.predicate),
             vocab.object_index(t.tail)) for t in kb]


def _interleave(image_batches: List, kb_batches: List, rng) -> List[Tuple[str, object]]:
    """Deterministic proportional interleaving of the two batch streams."""
    schedule = ([("image", b) for b in image_batches]
                + [("kb", b) for b in kb_batches])
    order = rng.permutation(len(schedule))
    return [schedule[i] for i in order]


def train_epoch(model: ModelParams, graphs: Sequence[SceneRepGraph],
                kb: Sequence[Tuple[int, int, int]], config: TrainConfig,
                epoch: int, adam_state, rng) -> Tuple[LossReport, Dict]:
    """One pass over shuffled image batches and count-weighted KB batches."""
    if not graphs and not kb:
        raise TrainingError("nothing to train on: dataset and KB are both empty")
    rate = ramp(epoch, config)

    image_batches = []
    if graphs:
        order = rng.permutation(len(graphs))
        for start in range(0, len(order), config.batch_size):
            image_batches.append([graphs[i] for i in order[start:start + config.batch_size]])

    kb_batches = []
    if kb:
        order = rng.permutation(len(kb))
        for start in range(0, len(order), config.kb_batch_size):
            kb_batches.append([kb[i] for i in order[start:start + config.kb_batch_size]])

    aggregate = LossReport()
    steps = config.assimilations_trained + 1
    aggregate.object_losses = [0.0] * steps
    aggregate.predicate_losses = [0.0] * steps
    scene_count = 0
    batch_losses = []

    for kind, batch in _interleave(image_batches, kb_batches, rng):
        model.zero_grads()
        with nm.Tape() as tape:
            if kind == "image":
                total = None
                for graph in batch:
                    loss, report = _scene_loss(model, graph, config, rate, rng)
                    total = loss if total is None else nm.add(total, loss)
                    for s in range(steps):
                        aggregate.object_losses[s] += report.object_losses[s]
                        aggregate.predicate_losses[s] += report.predicate_losses[s]
                    aggregate.replaced += report.replaced
                    scene_count += 1
                total = nm.scale(total, 1.0 / len(batch))
            else:
                total = _kb_batch_loss(model, batch)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, step {model.training_step}")
            tape.backward(total)
        _optimizer_step(model, config, adam_state)
        batch_losses.append(value)

    if scene_count:
        aggregate.object_losses = [v / scene_count for v in aggregate.object_losses]
        aggregate.predicate_losses = [v / scene_count for v in aggregate.predicate_losses]
    aggregate.total = float(np.mean(batch_losses)) if batch_losses else 0.0
    log_record = {
        "epoch": epoch,
        "rate": rate,
        "mean_batch_loss": aggregate.total,
        "object_losses": aggregate.object_losses,
        "predicate_losses": aggregate.predicate_losses,
        "replaced": aggregate.replaced,
        "batches": len(batch_losses),
    }
    return aggregate, log_record


def expand_kb(kb: Sequence[KbTriple], vocab: Vocabulary,
              max_instances: Optional[int] = None, rng=None) -> List[Tuple[int, int, int]]:
    """Expand count-weighted triples into training instances."""
    instances: List[Tuple[int, int, int]] = []
    for t in kb:
        ids = (vocab.object_index(t.head), vocab.predicate_index(t.predicate),
               vocab.object_index(t.tail))
        instances.extend([ids] * t.count)
    if max_instances is not None and len(instances) > max_instances:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = rng.choice(len(instances), size=max_instances, replace=False)
        instances = [instances[i] for i in sorted(keep)]
    return instances


def train(model: ModelParams, graphs: Sequence[SceneRepGraph],
          kb: Sequence[KbTriple], config: TrainConfig,
          log_sink=None) -> List[LossReport]:
    """Full training loop; returns per-epoch reports."""
    rng = np.random.default_rng(config.seed)
    adam_state = nm.AdamState(model.parameters(), lr=config.lr)
    kb_ids = expand_kb(kb, model.vocab) if kb else []
    reports = []
    for epoch in range(config.epochs):
        report, record = train_epoch(model, graphs, kb_ids, config, epoch,
                                     adam_state, rng)
        reports.append(report)
        if log_sink is not None:
            log_sink(record)
    return reports
