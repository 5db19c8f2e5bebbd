"""Scene Representation Graph: object nodes, predicate nodes, bipartite adjacency.

Object node features are ingested as vectors (or zero when absent);
predicate node features are produced by a two-layer network from the
relational position vector of the head/tail boxes. Node ids are objects
first (0..n-1) then predicates (n..n+m-1). Edges follow head -> predicate
-> tail, and N_in/N_out are derived from that orientation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nm


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GraphError(f"bounding box extents must be positive, got w={self.w}, h={self.h}")


@dataclass(frozen=True)
class RelPositionVector:
    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def as_array(self, dtype=None) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_w, self.t_h],
                        dtype=dtype or nm.get_default_dtype())


def rel_position_vector(head: BoundingBox, tail: BoundingBox) -> RelPositionVector:
    """Relative geometry of head w.r.t. tail; tail extents as denominators."""
    return RelPositionVector(
        t_x=(head.x - tail.x) / tail.w,
        t_y=(head.y - tail.y) / tail.h,
        t_w=float(np.log(head.w / tail.w)),
        t_h=float(np.log(head.h / tail.h)),
    )


class PredicateInitNet:
    """Two affine layers (4 -> hidden -> d) with leaky-relu and dropout between."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator,
                 dropout_rate: float = 0.1, leaky_slope: float = 0.2):
        self.d = d
        self.hidden = hidden
        self.dropout_rate = dropout_rate
        self.leaky_slope = leaky_slope
        self.w1 = nm.glorot_init((4, hidden), rng)
        self.b1 = nm.zeros_init((1, hidden))
        self.w2 = nm.glorot_init((hidden, d), rng)
        self.b2 = nm.zeros_init((1, d))

    def named_parameters(self):
        return [("predicate_init.w1", self.w1), ("predicate_init.b1", self.b1),
                ("predicate_init.w2", self.w2), ("predicate_init.b2", self.b2)]

    def forward(self, t: nm.Tensor, training: bool = False, rng=None) -> nm.Tensor:
        h = nm.leaky_relu(nm.add(nm.matmul(t, self.w1), self.b1), self.leaky_slope)
        h = nm.dropout(h, self.dropout_rate, training, rng)
        return nm.add(nm.matmul(h, self.w2), self.b2)


def init_predicate_feature(t: RelPositionVector, net: PredicateInitNet,
                           training: bool = False, rng=None) -> nm.Tensor:
    out = net.forward(nm.Tensor(t.as_array().reshape(1, 4)), training=training, rng=rng)
    return nm.reshape(out, (net.d,))


class SceneRepGraph:
    """Bipartite-neighbor graph over one scene.

    object_features holds the ingested (or zero) vectors; predicate
    features stored here are an eval-mode snapshot, the differentiable
    path recomputes them from rel_vectors through the init net.
    """

    def __init__(self, scene_id: str,
                 object_features: np.ndarray,
                 boxes: List[BoundingBox],
                 head_index: np.ndarray,
                 tail_index: np.ndarray,
                 rel_vectors: np.ndarray,
                 predicate_features: Optional[np.ndarray] = None,
                 object_labels: Optional[np.ndarray] = None,
                 predicate_labels: Optional[np.ndarray] = None):
        self.scene_id = scene_id
        self.object_features = object_features
        self.boxes = boxes
        self.head_index = head_index
        self.tail_index = tail_index
        self.rel_vectors = rel_vectors
        self.predicate_features = predicate_features
        self.object_labels = object_labels
        self.predicate_labels = predicate_labels
        self._masks = None

    @property
    def n(self) -> int:
        return self.object_features.shape[0]

    @property
    def m(self) -> int:
        return self.head_index.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.n + self.m

    @property
    def d(self) -> int:
        return self.object_features.shape[1]

    def predicate_node(self, rel: int) -> int:
        return self.n + rel

    def n_in(self, node: int) -> List[int]:
        """Nodes j with an edge j -> node."""
        if node < self.n:
            return [self.predicate_node(r) for r in np.flatnonzero(self.tail_index == node)]
        r = node - self.n
        return [int(self.head_index[r])]

    def n_out(self, node: int) -> List[int]:
        """Nodes j with an edge node -> j."""
        if node < self.n:
            return [self.predicate_node(r) for r in np.flatnonzero(self.head_index == node)]
        r = node - self.n
        return [int(self.tail_index[r])]

    def neighbor_masks(self):
        """Dense (N, N) adjacency masks; mask_in[i, j] = 1 iff j in N_in(i)."""
        if self._masks is None:
            size = self.num_nodes
            mask_in = np.zeros((size, size), dtype=np.float32)
            mask_out = np.zeros((size, size), dtype=np.float32)
            for r in range(self.m):
                h, t, p = int(self.head_index[r]), int(self.tail_index[r]), self.predicate_node(r)
                # edges h -> p and p -> t
                mask_in[p, h] = 1.0
                mask_out[h, p] = 1.0
                mask_in[t, p] = 1.0
                mask_out[p, t] = 1.0
            self._masks = (mask_in, mask_out)
        return self._masks


def build_srg(record, net: PredicateInitNet, vocab) -> SceneRepGraph:
    """Construct the graph for one scene record.

    Missing object features become zero vectors (the triple-only path).
    Rejects dangling relation indices, self-relations, and feature-width
    mismatches.
    """
    d = net.d
    n = len(record.objects)
    features = np.zeros((n, d), dtype=nm.get_default_dtype())
    boxes = []
    obj_labels = np.zeros(n, dtype=np.int64)
    for i, obj in enumerate(record.objects):
        boxes.append(BoundingBox(*obj.box))
        if obj.feature is not None:
            feat = np.asarray(obj.feature, dtype=nm.get_default_dtype())
            if feat.shape != (d,):
                raise GraphError(
                    f"scene {record.id}: object {i} feature width {feat.shape} != ({d},)")
            features[i] = feat
        obj_labels[i] = vocab.object_index(obj.label)

    m = len(record.relations)
    head = np.zeros(m, dtype=np.int64)
    tail = np.zeros(m, dtype=np.int64)
    pred_labels = np.zeros(m, dtype=np.int64)
    rel_vectors = np.zeros((m, 4), dtype=nm.get_default_dtype())
    for r, rel in enumerate(record.relations):
        if not (0 <= rel.head < n) or not (0 <= rel.tail < n):
            raise GraphError(f"scene {record.id}: relation {r} references a missing object")
        if rel.head == rel.tail:
            raise GraphError(f"scene {record.id}: relation {r} is a self-relation")
        head[r], tail[r] = rel.head, rel.tail
        pred_labels[r] = vocab.predicate_index(rel.predicate)
        rel_vectors[r] = rel_position_vector(boxes[rel.head], boxes[rel.tail]).as_array()

    if m > 0:
        pred_features = net.forward(nm.Tensor(rel_vectors)).data
    else:
        pred_features = np.zeros((0, d), dtype=nm.get_default_dtype())

    return SceneRepGraph(
        scene_id=record.id,
        object_features=features,
        boxes=boxes,
        head_index=head,
        tail_index=tail,
        rel_vectors=rel_vectors,
        predicate_features=pred_features,
        object_labels=obj_labels,
        predicate_labels=pred_labels,
    )


def make_triple_graph(d: int, head_class: int, tail_class: int,
                      predicate_class: int = 0) -> SceneRepGraph:
    """Zero-feature 2-object / 1-predicate graph for knowledge-base triples."""
    return SceneRepGraph(
        scene_id=f"kb:{head_class}->{tail_class}",
        object_features=np.zeros((2, d), dtype=nm.get_default_dtype()),
        boxes=[],
        head_index=np.array([0], dtype=np.int64),
        tail_index=np.array([1], dtype=np.int64),
        rel_vectors=np.zeros((1, 4), dtype=nm.get_default_dtype()),
        predicate_features=np.zeros((1, d), dtype=nm.get_default_dtype()),
        object_labels=np.array([head_class, tail_class], dtype=np.int64),
        predicate_labels=np.array([predicate_class], dtype=np.int64),
    )
