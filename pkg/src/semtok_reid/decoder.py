"""Frozen decoder-only language model that emits the pedestrian semantic token.

The prompt is ``<|vision_start|> v_1 .. v_n <|vision_end|> instruction``. One
causal forward pass yields the logits for the next word; its arg-max is the
generated ``<REID>`` word and the final hidden state at the last prompt
position is kept as the differentiable token encoding ``v_reid``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Block, LayerNorm, Linear, Module, Rotary, causal_mask
from .tensor import Tensor

DEFAULT_INSTRUCTION = (
    "Summarize the person image into one word, focusing on age, gender, clothing, "
    "and biometric features."
)

RESERVED = ("<pad>", "<unk>", "<|vision_start|>", "<|vision_end|>", "<REID>")

# Static word-level table. Ids follow the reserved tokens in this order.
WORDS = """
. , ? ! : ; ' " - the a an and or of in on into to with without for by at from is are
summarize describe person people pedestrian man woman child boy girl adult elderly young old
image photo picture one two word words focusing focus age gender clothing biometric features
feature appearance body face hair head arm arms leg legs hand hands shoulder height build
shirt jacket coat dress skirt trousers pants shorts jeans shoes boots sneakers hat cap bag
backpack handbag umbrella glasses scarf belt sleeve sleeves long short tall small large slim
red orange yellow green blue purple pink brown black white gray grey dark light bright pale
walking standing running carrying holding wearing left right front back side camera view
""".split()


class Vocabulary:
    def __init__(self, size: int = 512):
        tokens = list(RESERVED) + [w for w in dict.fromkeys(WORDS)]
        if size < len(tokens):
            raise ConfigError(f"vocabulary size {size} smaller than the static table ({len(tokens)})")
        tokens += [f"<extra_{i}>" for i in range(size - len(tokens))]
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.size = size

    @property
    def vision_start(self) -> int:
        return self.ids["<|vision_start|>"]

    @property
    def vision_end(self) -> int:
        return self.ids["<|vision_end|>"]

    @property
    def unk(self) -> int:
        return self.ids["<unk>"]

    def encode(self, text: str) -> list[int]:
        words = re.findall(r"\w+|[^\w\s]", text.lower())
        return [self.ids.get(w, self.unk) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class PromptSequence:
    embeddings: Tensor  # (B, L, d)
    token_ids: np.ndarray  # (L,), -1 marks visual slots
    positions: np.ndarray  # (L,)
    n_visual: int

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class SemanticToken:
    token_id: np.ndarray  # (B,) arg-max word ids
    v_reid: Tensor  # (B, d)


class FrozenDecoder(Module):
    def __init__(self, dim: int, layers: int, heads: int, vocab: Vocabulary,
                 rng: np.random.Generator, instruction: str = DEFAULT_INSTRUCTION):
        self.vocab = vocab
        self.heads = heads
        self.embed = Tensor(rng.normal(0.0, 1.0, size=(vocab.size, dim)), requires_grad=True)
        self.blocks = [Block(dim, heads, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, vocab.size, rng, bias=False)
        self.instruction_ids = np.asarray(vocab.encode(instruction), dtype=np.int64)
        if self.instruction_ids.size == 0:
            raise ConfigError("pstg.instruction is empty")
        self.forward_calls = 0
        self.freeze()

    def build_prompt(self, V: Tensor, instruction=None) -> PromptSequence:
        ids = self.instruction_ids if instruction is None else np.asarray(instruction, dtype=np.int64)
        if ids.size == 0:
            raise ConfigError("instruction must contain at least one token")
        B, n, d = V.shape
        text = np.concatenate([[self.vocab.vision_start], [self.vocab.vision_end], ids])
        emb = T.embedding(self.embed, text)  # (2 + m, d)
        start = T.broadcast_to(emb[0:1].reshape(1, 1, d), (B, 1, d))
        end_and_text = T.broadcast_to(emb[1:].reshape(1, len(text) - 1, d), (B, len(text) - 1, d))
        seq = T.concat([start, V, end_and_text], axis=1)
        token_ids = np.concatenate([[self.vocab.vision_start], np.full(n, -1), [self.vocab.vision_end], ids])
        return PromptSequence(seq, token_ids, np.arange(len(token_ids)), n)

    def decode_forward(self, seq: PromptSequence) -> tuple[Tensor, Tensor]:
        """Causal pass over the prompt; returns (final hidden states, last-position logits)."""
        self.forward_calls += 1
        L = seq.length
        d = seq.embeddings.shape[-1]
        rotary = Rotary(seq.positions, d // self.heads)
        mask = causal_mask(L)
        x = seq.embeddings
        for block in self.blocks:
            x = block(x, rotary=rotary, mask=mask)
        hidden = self.norm(x)
        logits = self.head(hidden[:, L - 1])
        return hidden, logits

    def generate_semantic_token(self, V: Tensor, instruction=None) -> SemanticToken:
        seq = self.build_prompt(V, instruction)
        hidden, logits = self.decode_forward(seq)
        token_id = np.argmax(logits.data, axis=-1)
        return SemanticToken(token_id, hidden[:, seq.length - 1])


def css_late(v_reid: Tensor, cams, table: Tensor) -> Tensor:
    """Add each sample's camera embedding row to its semantic token."""
    cams = np.asarray(cams, dtype=np.int64)
    if cams.size and (cams.min() < 0 or cams.max() >= table.shape[0]):
        raise IndexError(f"camera id out of range [0, {table.shape[0]})")
    return v_reid + T.embedding(table, cams)
