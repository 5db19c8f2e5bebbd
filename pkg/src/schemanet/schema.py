"""Schema bank, classification as attention, injection, and assimilation.

The same per-class embedding matrix serves as the classifier weights
(dot-product attention against node states) and as the message content
injected back into the original features before re-contextualizing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import numerics as nm
from .graph_transformer import TransformerStack, contextualize
from .srg import SceneRepGraph, make_triple_graph


class SchemaBank:
    """Trainable per-class embeddings for object and predicate classes."""

    def __init__(self, num_object_classes: int, num_predicate_classes: int,
                 d: int, rng: np.random.Generator):
        self.object_schemata = nm.glorot_init((num_object_classes, d), rng)
        self.predicate_schemata = nm.glorot_init((num_predicate_classes, d), rng)

    @property
    def d(self) -> int:
        return self.object_schemata.shape[1]

    @property
    def num_object_classes(self) -> int:
        return self.object_schemata.shape[0]

    @property
    def num_predicate_classes(self) -> int:
        return self.predicate_schemata.shape[0]

    def named_parameters(self):
        return [("schema.objects", self.object_schemata),
                ("schema.predicates", self.predicate_schemata)]


class InjectionNet:
    """Two-layer network g plus the layer-norm pairs of the fusion step."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator,
                 leaky_slope: float = 0.2):
        self.d = d
        self.leaky_slope = leaky_slope
        self.w1 = nm.glorot_init((d, hidden), rng)
        self.b1 = nm.zeros_init((1, hidden))
        self.w2 = nm.glorot_init((hidden, d), rng)
        self.b2 = nm.zeros_init((1, d))
        self.ln1_gain = nm.ones_init((1, d))
        self.ln1_bias = nm.zeros_init((1, d))
        self.ln2_gain = nm.ones_init((1, d))
        self.ln2_bias = nm.zeros_init((1, d))

    def named_parameters(self):
        return [("injection.w1", self.w1), ("injection.b1", self.b1),
                ("injection.w2", self.w2), ("injection.b2", self.b2),
                ("injection.ln1_gain", self.ln1_gain), ("injection.ln1_bias", self.ln1_bias),
                ("injection.ln2_gain", self.ln2_gain), ("injection.ln2_bias", self.ln2_bias)]

    def g(self, u: nm.Tensor) -> nm.Tensor:
        h = nm.leaky_relu(nm.add(nm.matmul(u, self.w1), self.b1), self.leaky_slope)
        return nm.add(nm.matmul(h, self.w2), self.b2)


@dataclass
class AssimilationStep:
    alpha_obj: nm.Tensor    # (n, |C_o|), rows on the simplex
    alpha_pred: nm.Tensor   # (m, |C_p|)
    states: nm.Tensor       # (n + m, d) contextualized node states


@dataclass
class AssimilationTrace:
    steps: List[AssimilationStep]
    replaced_counts: List[int]

    def __len__(self) -> int:
        return len(self.steps)


def classify(z: nm.Tensor, n_objects: int, bank: SchemaBank) -> Tuple[nm.Tensor, nm.Tensor]:
    """Dot-product attention of node states against the schema rows."""
    z_obj = nm.slice_rows(z, 0, n_objects)
    z_pred = nm.slice_rows(z, n_objects, z.shape[0])
    alpha_obj = nm.softmax(nm.matmul(z_obj, nm.transpose(bank.object_schemata)), axis=-1)
    alpha_pred = nm.softmax(nm.matmul(z_pred, nm.transpose(bank.predicate_schemata)), axis=-1)
    return alpha_obj, alpha_pred


def schema_message(alpha_obj: nm.Tensor, alpha_pred: nm.Tensor,
                   bank: SchemaBank) -> nm.Tensor:
    """Convex combinations of schema rows, stacked objects-then-predicates."""
    delta_obj = nm.matmul(alpha_obj, bank.object_schemata)
    delta_pred = nm.matmul(alpha_pred, bank.predicate_schemata)
    return nm.concat_rows(delta_obj, delta_pred)


def inject(x: nm.Tensor, delta: nm.Tensor, net: InjectionNet) -> nm.Tensor:
    """Fuse schema messages with the ORIGINAL features (never intermediates)."""
    u = nm.layer_norm(nm.add(x, delta), net.ln1_gain, net.ln1_bias)
    return nm.layer_norm(nm.add(u, net.g(u)), net.ln2_gain, net.ln2_bias)


AlphaHook = Callable[[int, nm.Tensor, nm.Tensor], Tuple[nm.Tensor, nm.Tensor, int]]


def assimilate(graph: SceneRepGraph, stack: TransformerStack, bank: SchemaBank,
               net: InjectionNet, assimilations: int,
               x0: Optional[nm.Tensor] = None,
               message_alpha_hook: Optional[AlphaHook] = None) -> AssimilationTrace:
    """Run step 0 (contextualize + classify) plus `assimilations` refinement steps.

    x0 defaults to the graph's stored features; pass a tape-connected
    tensor to train through the feature-initialization networks. The
    hook (scheduled sampling, label clamping) rewrites the distributions
    feeding the schema messages only; recorded trace entries keep the
    raw classifications.
    """
    if assimilations < 0:
        raise ValueError("assimilation count must be >= 0")
    if x0 is None:
        x0 = nm.Tensor(np.concatenate([graph.object_features, graph.predicate_features], axis=0))
    mask_in, mask_out = graph.neighbor_masks()
    n = graph.n

    z = contextualize(stack, x0, mask_in, mask_out)
    alpha_obj, alpha_pred = classify(z, n, bank)
    trace = AssimilationTrace(steps=[AssimilationStep(alpha_obj, alpha_pred, z)],
                              replaced_counts=[])
    for t in range(assimilations):
        msg_obj, msg_pred = alpha_obj, alpha_pred
        replaced = 0
        if message_alpha_hook is not None:
            msg_obj, msg_pred, replaced = message_alpha_hook(t, msg_obj, msg_pred)
        delta = schema_message(msg_obj, msg_pred, bank)
        z0 = inject(x0, delta, net)
        z = contextualize(stack, z0, mask_in, mask_out)
        alpha_obj, alpha_pred = classify(z, n, bank)
        trace.steps.append(AssimilationStep(alpha_obj, alpha_pred, z))
        trace.replaced_counts.append(replaced)
    return trace


def one_hot_rows(indices, num_classes: int) -> nm.Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], num_classes), dtype=nm.get_default_dtype())
    out[np.arange(idx.shape[0]), idx] = 1.0
    return nm.Tensor(out)


def kb_assimilate(head_class: int, tail_class: int, stack: TransformerStack,
                  bank: SchemaBank, net: InjectionNet) -> nm.Tensor:
    """Predicate distribution for a pure triple: zero features, seeded alphas.

    Head/tail get one-hot class indicators, the predicate node a uniform
    seed; one injection + contextualization + classification follows.
    """
    if not 0 <= head_class < bank.num_object_classes:
        raise IndexError(f"unknown object class id {head_class}")
    if not 0 <= tail_class < bank.num_object_classes:
        raise IndexError(f"unknown object class id {tail_class}")
    graph = make_triple_graph(bank.d, head_class, tail_class)
    mask_in, mask_out = graph.neighbor_masks()
    x0 = nm.Tensor(np.zeros((3, bank.d), dtype=nm.get_default_dtype()))
    alpha_obj = one_hot_rows([head_class, tail_class], bank.num_object_classes)
    alpha_pred = nm.Tensor(np.full((1, bank.num_predicate_classes),
                                   1.0 / bank.num_predicate_classes,
                                   dtype=nm.get_default_dtype()))
    delta = schema_message(alpha_obj, alpha_pred, bank)
    z0 = inject(x0, delta, net)
    z = contextualize(stack, z0, mask_in, mask_out)
    _, out_pred = classify(z, graph.n, bank)
    return out_pred
