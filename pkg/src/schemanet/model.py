"""Model container: every trainable tensor plus the hyperparameter record."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from . import numerics as nm
from .data_io import Vocabulary
from .graph_transformer import TransformerStack, init_transformer_stack
from .schema import InjectionNet, SchemaBank
from .srg import PredicateInitNet, SceneRepGraph


@dataclass
class ModelConfig:
    d: int = 512
    num_layers: int = 4
    num_heads: int = 5
    ff_hidden: int = 2048
    injection_hidden: int = 512
    predicate_init_hidden: int = 512
    object_dropout: float = 0.8
    predicate_dropout: float = 0.1
    leaky_slope: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


class ModelParams:
    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 predicate_init: PredicateInitNet, stack: TransformerStack,
                 injection: InjectionNet, bank: SchemaBank):
        self.config = config
        self.vocab = vocab
        self.predicate_init = predicate_init
        self.stack = stack
        self.injection = injection
        self.bank = bank
        self.training_step = 0

    def named_parameters(self) -> List[Tuple[str, nm.Tensor]]:
        return (self.predicate_init.named_parameters()
                + self.stack.named_parameters()
                + self.injection.named_parameters()
                + self.bank.named_parameters())

    def parameters(self) -> List[nm.Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_model(config: ModelConfig, vocab: Vocabulary,
                rng: np.random.Generator) -> ModelParams:
    predicate_init = PredicateInitNet(config.d, config.predicate_init_hidden, rng,
                                      dropout_rate=config.predicate_dropout,
                                      leaky_slope=config.leaky_slope)
    stack = init_transformer_stack(config.d, config.num_layers, config.num_heads,
                                   config.ff_hidden, rng, leaky_slope=config.leaky_slope)
    injection = InjectionNet(config.d, config.injection_hidden, rng,
                             leaky_slope=config.leaky_slope)
    bank = SchemaBank(vocab.num_objects, vocab.num_predicates, config.d, rng)
    return ModelParams(config, vocab, predicate_init, stack, injection, bank)


def initial_node_states(graph: SceneRepGraph, model: ModelParams,
                        training: bool = False, rng=None) -> nm.Tensor:
    """Tape-connected step-0 features: ingested object vectors (with dropout
    in training mode) stacked over predicate-init network outputs."""
    obj = nm.dropout(nm.Tensor(graph.object_features),
                     model.config.object_dropout, training, rng)
    if graph.m > 0:
        pred = model.predicate_init.forward(nm.Tensor(graph.rel_vectors),
                                            training=training, rng=rng)
    else:
        pred = nm.Tensor(np.zeros((0, model.config.d), dtype=nm.get_default_dtype()))
    return nm.concat_rows(obj, pred)
