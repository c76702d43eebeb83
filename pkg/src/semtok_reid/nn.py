"""Transformer building blocks on top of :mod:`semtok_reid.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e30


class Module:
    """Parameter container; every ``Tensor`` attribute is a parameter."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self):
        for _, p in self.named_parameters():
            p.freeze()
        return self

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(uniform_init(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4):
        self.fc1 = Linear(dim, expansion * dim, rng)
        self.fc2 = Linear(expansion * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# rotary positions


def _rotate_half_matrix(head_dim: int, sections: int) -> np.ndarray:
    """Matrix R with x @ R == rotate_half(x) applied independently per section."""
    size = head_dim // sections
    half = size // 2
    R = np.zeros((head_dim, head_dim))
    for s in range(sections):
        o = s * size
        for i in range(half):
            R[o + half + i, o + i] = -1.0  # out[i] = -x[half + i]
            R[o + i, o + half + i] = 1.0  # out[half + i] = x[i]
    return R


class Rotary:
    """Rotary tables for integer positions along one or more axes.

    ``positions`` has shape (T, A). The head dimension is split into A equal
    sections and section ``a`` is rotated by the position along axis ``a``.
    With A=2 and (row, col) positions this is the axial 2-D variant.
    """

    def __init__(self, positions: np.ndarray, head_dim: int, base: float = 10000.0):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim == 1:
            positions = positions[:, None]
        n_axes = positions.shape[1]
        size = head_dim // n_axes
        if size * n_axes != head_dim or size % 2:
            raise ValueError(f"head_dim {head_dim} not splittable into {n_axes} even sections")
        half = size // 2
        inv_freq = base ** (-np.arange(half) / half)
        cos, sin = [], []
        for a in range(n_axes):
            ang = positions[:, a : a + 1] * inv_freq[None, :]
            ang = np.concatenate([ang, ang], axis=1)
            cos.append(np.cos(ang))
            sin.append(np.sin(ang))
        self.cos = Tensor(np.concatenate(cos, axis=1))
        self.sin = Tensor(np.concatenate(sin, axis=1))
        self.rot = Tensor(_rotate_half_matrix(head_dim, n_axes))

    def __call__(self, x: Tensor) -> Tensor:
        # x: (..., T, head_dim)
        return x * self.cos + T.matmul(x, self.rot) * self.sin


def causal_mask(length: int) -> Tensor:
    return Tensor(np.triu(np.full((length, length), NEG_INF), k=1))


# ---------------------------------------------------------------------------
# attention


class Attention(Module):
    """Multi-head attention; self-attention when ``kv`` is omitted."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None
        self.keep_weights = False

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, kv: Tensor | None = None, rotary: Rotary | None = None,
                 mask: Tensor | None = None) -> Tensor:
        kv = x if kv is None else kv
        B, L, D = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(kv))
        v = self._split(self.wv(kv))
        if rotary is not None:
            q, k = rotary(q), rotary(k)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2))
        scores = T.scale(scores, 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + mask
        weights = T.softmax(scores, axis=-1)
        if self.keep_weights:
            self.last_weights = weights.data.copy()
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.wo(out)


class Block(Module):
    """Pre-norm transformer block: attention and FFN, each with a residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, x: Tensor, rotary: Rotary | None = None, mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), rotary=rotary, mask=mask)
        return x + self.ffn(self.ln2(x))


class CrossBlock(Module):
    """Pre-norm block whose query stream attends to a fixed key/value set."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        q = q + self.attn(self.ln_q(q), kv=self.ln_kv(kv))
        return q + self.ffn(self.ln2(q))
