"""Multi-head attention contextualizer over the scene representation graph.

Per head, attention logits are leaky_relu(h . [z_i || W z_j]); coefficients
are normalized separately within the incoming and outgoing neighbor sets,
and head messages are averaged. Each layer applies the two residual
layer-norm steps (messages, then the feed-forward network).
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nm


class HeadParams:
    """One attention head: projection and the two halves of the weight vector."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = nm.glorot_init((d, d), rng)        # right-multiplied: z @ proj
        self.attn_src = nm.glorot_init((d, 1), rng)    # pairs with z_i
        self.attn_dst = nm.glorot_init((d, 1), rng)    # pairs with W z_j


class TransformerLayerParams:
    def __init__(self, d: int, num_heads: int, ff_hidden: int, rng: np.random.Generator,
                 leaky_slope: float = 0.2):
        if num_heads < 1:
            raise ValueError("need at least one attention head")
        self.d = d
        self.leaky_slope = leaky_slope
        self.heads = [HeadParams(d, rng) for _ in range(num_heads)]
        self.ff_w1 = nm.glorot_init((d, ff_hidden), rng)
        self.ff_b1 = nm.zeros_init((1, ff_hidden))
        self.ff_w2 = nm.glorot_init((ff_hidden, d), rng)
        self.ff_b2 = nm.zeros_init((1, d))
        self.ln1_gain = nm.ones_init((1, d))
        self.ln1_bias = nm.zeros_init((1, d))
        self.ln2_gain = nm.ones_init((1, d))
        self.ln2_bias = nm.zeros_init((1, d))

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def named_parameters(self, prefix: str):
        out = []
        for k, head in enumerate(self.heads):
            out += [(f"{prefix}.head{k}.proj", head.proj),
                    (f"{prefix}.head{k}.attn_src", head.attn_src),
                    (f"{prefix}.head{k}.attn_dst", head.attn_dst)]
        out += [(f"{prefix}.ff_w1", self.ff_w1), (f"{prefix}.ff_b1", self.ff_b1),
                (f"{prefix}.ff_w2", self.ff_w2), (f"{prefix}.ff_b2", self.ff_b2),
                (f"{prefix}.ln1_gain", self.ln1_gain), (f"{prefix}.ln1_bias", self.ln1_bias),
                (f"{prefix}.ln2_gain", self.ln2_gain), (f"{prefix}.ln2_bias", self.ln2_bias)]
        return out

    def feed_forward(self, z: nm.Tensor) -> nm.Tensor:
        h = nm.leaky_relu(nm.add(nm.matmul(z, self.ff_w1), self.ff_b1), self.leaky_slope)
        return nm.add(nm.matmul(h, self.ff_w2), self.ff_b2)


class TransformerStack:
    def __init__(self, layers: List[TransformerLayerParams]):
        self.layers = layers

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def named_parameters(self):
        out = []
        for l, layer in enumerate(self.layers):
            out += layer.named_parameters(f"transformer.layer{l}")
        return out


def init_transformer_stack(d: int, num_layers: int, num_heads: int, ff_hidden: int,
                           rng: np.random.Generator, leaky_slope: float = 0.2) -> TransformerStack:
    return TransformerStack([
        TransformerLayerParams(d, num_heads, ff_hidden, rng, leaky_slope)
        for _ in range(num_layers)
    ])


def attention_coefficients(layer: TransformerLayerParams, head: int,
                           z_i: nm.Tensor, neighbor_z: nm.Tensor) -> nm.Tensor:
    """Coefficients of node i over a nonempty neighbor set (one head)."""
    if neighbor_z.shape[0] == 0:
        raise ValueError("attention over an empty neighbor set")
    hp = layer.heads[head]
    zi = nm.reshape(z_i, (1, layer.d))
    projected = nm.matmul(neighbor_z, hp.proj)
    logits = nm.add(nm.matmul(zi, hp.attn_src),
                    nm.transpose(nm.matmul(projected, hp.attn_dst)))
    e = nm.leaky_relu(logits, layer.leaky_slope)
    return nm.reshape(nm.softmax(e, axis=-1), (neighbor_z.shape[0],))


def neighborhood_message(layer: TransformerLayerParams, z_i: nm.Tensor,
                         neighbor_z: nm.Tensor) -> nm.Tensor:
    """Head-averaged attention-weighted sum of projected neighbors (1 x d)."""
    if neighbor_z.shape[0] == 0:
        return nm.Tensor(np.zeros((1, layer.d)))
    total = None
    for k, hp in enumerate(layer.heads):
        alpha = nm.reshape(attention_coefficients(layer, k, z_i, neighbor_z),
                           (1, neighbor_z.shape[0]))
        msg = nm.matmul(alpha, nm.matmul(neighbor_z, hp.proj))
        total = msg if total is None else nm.add(total, msg)
    return nm.scale(total, 1.0 / layer.num_heads)


def _directional_message(layer: TransformerLayerParams, z: nm.Tensor,
                         mask: np.ndarray) -> nm.Tensor:
    total = None
    for hp in layer.heads:
        projected = nm.matmul(z, hp.proj)
        src = nm.matmul(z, hp.attn_src)                   # (N, 1)
        dst = nm.transpose(nm.matmul(projected, hp.attn_dst))  # (1, N)
        e = nm.leaky_relu(nm.add(src, dst), layer.leaky_slope)
        alpha = nm.masked_softmax(e, mask, axis=-1)
        msg = nm.matmul(alpha, projected)
        total = msg if total is None else nm.add(total, msg)
    return nm.scale(total, 1.0 / layer.num_heads)


def transformer_layer(layer: TransformerLayerParams, z: nm.Tensor,
                      mask_in: np.ndarray, mask_out: np.ndarray,
                      attention_sink: Optional[list] = None) -> nm.Tensor:
    """One contextualization layer over all nodes at once."""
    if attention_sink is not None:
        for hp in layer.heads:
            projected = z.data @ hp.proj.data
            src = z.data @ hp.attn_src.data
            dst = (projected @ hp.attn_dst.data).T
            e = src + dst
            e = np.where(e >= 0, e, layer.leaky_slope * e)
            for mask in (mask_in, mask_out):
                attention_sink.append(
                    nm.masked_softmax(nm.Tensor(e), mask, axis=-1).data)
    msg_in = _directional_message(layer, z, mask_in)
    msg_out = _directional_message(layer, z, mask_out)
    z_mid = nm.layer_norm(nm.add(nm.add(z, msg_in), msg_out),
                          layer.ln1_gain, layer.ln1_bias)
    return nm.layer_norm(nm.add(z_mid, layer.feed_forward(z_mid)),
                         layer.ln2_gain, layer.ln2_bias)


def contextualize(stack: TransformerStack, z: nm.Tensor,
                  mask_in: np.ndarray, mask_out: np.ndarray,
                  attention_sink: Optional[list] = None) -> nm.Tensor:
    for layer in stack.layers:
        z = transformer_layer(layer, z, mask_in, mask_out, attention_sink=attention_sink)
    return z
