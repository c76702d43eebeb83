"""Semantic-guided interaction between the semantic token and the visual tokens."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Block, CrossBlock, LayerNorm, Module
from .tensor import Tensor

SGI_BLOCKS = 4


def concat_semantic(token: Tensor, V: Tensor) -> Tensor:
    """z = [token; v_1; ...; v_n] with shape (B, n+1, d)."""
    if token.shape[-1] != V.shape[-1]:
        raise DimensionError(f"semantic token width {token.shape[-1]} != visual width {V.shape[-1]}")
    B, n, d = V.shape
    return T.concat([token.reshape(B, 1, d), V], axis=1)


def extract_identity(z_hat: Tensor) -> Tensor:
    return z_hat[:, 0]


class SGI(Module):
    """Four bidirectional (unmasked) pre-norm blocks over the joint sequence.

    As usual for a pre-norm stack, a final LayerNorm closes the residual stream;
    it also pins the feature scale so the triplet loss cannot be lowered by
    shrinking every feature towards zero.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.blocks = [Block(dim, heads, rng) for _ in range(SGI_BLOCKS)]
        self.norm = LayerNorm(dim)

    def forward(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return self.norm(z)

    def __call__(self, token: Tensor, V: Tensor) -> Tensor:
        return extract_identity(self.forward(concat_semantic(token, V)))

    def keep_attention(self, flag: bool = True):
        for block in self.blocks:
            block.attn.keep_weights = flag
            block.attn.last_weights = None

    def attention_maps(self) -> list[np.ndarray]:
        return [block.attn.last_weights for block in self.blocks]


class QueryOnlySGI(Module):
    """Ablation: the semantic token is the sole query; visual tokens only supply keys/values."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.blocks = [CrossBlock(dim, heads, rng) for _ in range(SGI_BLOCKS)]
        self.norm = LayerNorm(dim)

    def __call__(self, token: Tensor, V: Tensor) -> Tensor:
        if token.shape[-1] != V.shape[-1]:
            raise DimensionError(f"semantic token width {token.shape[-1]} != visual width {V.shape[-1]}")
        B, d = token.shape
        q = token.reshape(B, 1, d)
        for block in self.blocks:
            q = block(q, V)
        return self.norm(q).reshape(B, d)

    def keep_attention(self, flag: bool = True):
        for block in self.blocks:
            block.attn.keep_weights = flag
            block.attn.last_weights = None

    def attention_maps(self) -> list[np.ndarray]:
        return [block.attn.last_weights for block in self.blocks]
