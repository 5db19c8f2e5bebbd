"""Task runners and ranking metrics: SGCls/PredCls, R@K, mR@K, link prediction.

Triple scores are products of the class probabilities involved; ranking
ties break by (pair index, class index) ascending so runs are
reproducible. mR@K averages per-predicate recalls over the classes
present in the evaluation ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import numerics as nm
from .model import ModelParams, initial_node_states
from .schema import AssimilationStep, assimilate, kb_assimilate, one_hot_rows
from .srg import SceneRepGraph

TASKS = ("sgcls", "predcls")


@dataclass(frozen=True)
class ScoredTriple:
    head: int
    tail: int
    predicate: int
    score: float
    pair: int                    # rank of the ordered pair, for tie-breaks
    objects_correct: bool = True

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.head, self.predicate, self.tail)


@dataclass
class RecallReport:
    task: str
    constrained: bool
    step: int
    recall_at: Dict[int, float] = field(default_factory=dict)
    mean_recall_at: Dict[int, float] = field(default_factory=dict)
    per_predicate: Dict[int, Dict[int, float]] = field(default_factory=dict)
    micro_accuracy: Optional[float] = None


def ordered_pairs(graph: SceneRepGraph) -> List[Tuple[int, int, int]]:
    """Distinct annotated (head, tail) pairs with the first relation index
    that introduced them; order of first appearance fixes the pair index."""
    seen = {}
    out = []
    for r in range(graph.m):
        key = (int(graph.head_index[r]), int(graph.tail_index[r]))
        if key not in seen:
            seen[key] = r
            out.append((key[0], key[1], r))
    return out


def score_triples(step: AssimilationStep, graph: SceneRepGraph, task: str) -> List[ScoredTriple]:
    """Candidate triples for every annotated ordered pair and predicate class.

    SGCls: score = P(head argmax class) * P(predicate) * P(tail argmax class),
    and a candidate only counts as correct if both argmax labels match.
    PredCls: object factors are 1 and object labels are taken as given.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    alpha_obj = step.alpha_obj.data
    alpha_pred = step.alpha_pred.data
    out = []
    for pair_idx, (head, tail, rel) in enumerate(ordered_pairs(graph)):
        pred_dist = alpha_pred[rel]
        if task == "sgcls":
            head_cls = int(alpha_obj[head].argmax())
            tail_cls = int(alpha_obj[tail].argmax())
            obj_factor = float(alpha_obj[head, head_cls] * alpha_obj[tail, tail_cls])
            objects_correct = (head_cls == int(graph.object_labels[head])
                               and tail_cls == int(graph.object_labels[tail]))
        else:
            obj_factor = 1.0
            objects_correct = True
        for c in range(pred_dist.shape[0]):
            out.append(ScoredTriple(head=head, tail=tail, predicate=c,
                                    score=obj_factor * float(pred_dist[c]),
                                    pair=pair_idx, objects_correct=objects_correct))
    return out


def apply_graph_constraint(triples: Sequence[ScoredTriple],
                           constrained: bool) -> List[ScoredTriple]:
    """Constrained: keep the single best predicate per ordered pair."""
    if not constrained:
        return list(triples)
    best: Dict[Tuple[int, int], ScoredTriple] = {}
    for t in triples:
        key = (t.head, t.tail)
        cur = best.get(key)
        if cur is None or t.score > cur.score or (t.score == cur.score
                                                  and t.predicate < cur.predicate):
            best[key] = t
    return sorted(best.values(), key=lambda t: (t.pair, t.predicate))


def rank_triples(triples: Sequence[ScoredTriple]) -> List[ScoredTriple]:
    return sorted(triples, key=lambda t: (-t.score, t.pair, t.predicate))


def ground_truth_triples(graph: SceneRepGraph) -> Set[Tuple[int, int, int]]:
    return {(int(graph.head_index[r]), int(graph.predicate_labels[r]),
             int(graph.tail_index[r])) for r in range(graph.m)}


def _image_hits(predictions: Sequence[ScoredTriple],
                gt: Set[Tuple[int, int, int]], k: int) -> Set[Tuple[int, int, int]]:
    hits = set()
    for t in rank_triples(predictions)[:k]:
        if t.objects_correct and t.key in gt:
            hits.add(t.key)
    return hits


def recall_at_k(predictions_per_image: Sequence[Sequence[ScoredTriple]],
                gt_per_image: Sequence[Set[Tuple[int, int, int]]], k: int) -> float:
    """Macro mean over images (with nonempty GT) of |top-K hits| / |GT|."""
    if k < 1:
        raise ValueError("K must be >= 1")
    recalls = []
    for preds, gt in zip(predictions_per_image, gt_per_image):
        if not gt:
            continue
        recalls.append(len(_image_hits(preds, gt, k)) / len(gt))
    return float(np.mean(recalls)) if recalls else 0.0


def per_predicate_recall(predictions_per_image, gt_per_image, k: int) -> Dict[int, float]:
    """Recall per predicate class, pooled over all its GT triples."""
    gt_counts: Dict[int, int] = {}
    hit_counts: Dict[int, int] = {}
    for preds, gt in zip(predictions_per_image, gt_per_image):
        if not gt:
            continue
        hits = _image_hits(preds, gt, k)
        for (_, pred, _) in gt:
            gt_counts[pred] = gt_counts.get(pred, 0) + 1
        for (_, pred, _) in hits:
            hit_counts[pred] = hit_counts.get(pred, 0) + 1
    return {pred: hit_counts.get(pred, 0) / count
            for pred, count in sorted(gt_counts.items())}


def mean_recall_at_k(predictions_per_image, gt_per_image, k: int) -> float:
    """Unweighted mean of per-predicate recalls over classes present in GT."""
    table = per_predicate_recall(predictions_per_image, gt_per_image, k)
    if not table:
        return 0.0
    return float(np.mean(list(table.values())))


def micro_accuracy(step: AssimilationStep, graph: SceneRepGraph,
                   include_predicates: bool = True) -> Tuple[int, int]:
    """(correct, total) node-label counts for one scene at one step."""
    correct = int((step.alpha_obj.data.argmax(axis=-1) == graph.object_labels).sum())
    total = graph.n
    if include_predicates and graph.m > 0:
        correct += int((step.alpha_pred.data.argmax(axis=-1) == graph.predicate_labels).sum())
        total += graph.m
    return correct, total


def run_model(model: ModelParams, graph: SceneRepGraph, task: str,
              assimilations: int):
    """Eval-mode assimilation; PredCls clamps object alphas to the given
    ground-truth labels before every schema-message computation."""
    hook = None
    if task == "predcls":
        gt_obj = one_hot_rows(graph.object_labels, model.vocab.num_objects)

        def hook(t, alpha_obj, alpha_pred):
            return gt_obj, alpha_pred, 0

    return assimilate(graph, model.stack, model.bank, model.injection,
                      assimilations, message_alpha_hook=hook)


def evaluate(model: ModelParams, graphs: Sequence[SceneRepGraph], task: str,
             constrained: bool, ks: Sequence[int],
             assimilations: int) -> List[RecallReport]:
    """One RecallReport per assimilation step 0..assimilations."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    steps = assimilations + 1
    predictions = [[] for _ in range(steps)]
    gts = []
    acc_correct = np.zeros(steps, dtype=np.int64)
    acc_total = np.zeros(steps, dtype=np.int64)
    for graph in graphs:
        trace = run_model(model, graph, task, assimilations)
        gts.append(ground_truth_triples(graph))
        for s in range(steps):
            triples = score_triples(trace.steps[s], graph, task)
            predictions[s].append(apply_graph_constraint(triples, constrained))
            c, t = micro_accuracy(trace.steps[s], graph)
            acc_correct[s] += c
            acc_total[s] += t

    reports = []
    for s in range(steps):
        report = RecallReport(task=task, constrained=constrained, step=s)
        for k in ks:
            report.recall_at[k] = recall_at_k(predictions[s], gts, k)
            report.mean_recall_at[k] = mean_recall_at_k(predictions[s], gts, k)
            report.per_predicate[k] = per_predicate_recall(predictions[s], gts, k)
        if acc_total[s]:
            report.micro_accuracy = float(acc_correct[s] / acc_total[s])
        reports.append(report)
    return reports


def pkg_link_predict(model: ModelParams, head_class: int, tail_class: int,
                     top_n: int) -> List[Tuple[int, float]]:
    """Top-N predicate classes for a class pair, via the triple-only path."""
    dist = kb_assimilate(head_class, tail_class, model.stack, model.bank,
                         model.injection).data[0]
    order = sorted(range(dist.shape[0]), key=lambda c: (-dist[c], c))[:top_n]
    return [(c, float(dist[c])) for c in order]
