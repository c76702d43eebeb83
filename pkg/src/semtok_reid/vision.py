"""Visual token extraction: patch embedding, 2-D rotary transformer, 2x2 merge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Block, LayerNorm, Linear, Module, Rotary
from .tensor import Tensor


def check_image_dims(height: int, width: int, patch: int) -> tuple[int, int]:
    """Return the patch grid (rows, cols); both must be even for the 2x2 merge."""
    if patch <= 0 or height % (2 * patch) or width % (2 * patch):
        raise ConfigError(
            f"image {height}x{width} is not divisible by 2*patch={2 * patch}; "
            "the patch grid must have even rows and columns"
        )
    return height // patch, width // patch


def num_visual_tokens(height: int, width: int, patch: int) -> int:
    rows, cols = check_image_dims(height, width, patch)
    n_patches = rows * cols
    n = n_patches // 4
    assert 4 * n == n_patches
    return n


def grid_positions(rows: int, cols: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([r, c], axis=1)


def patchify_pixels(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) pixels -> (B, N, P*P*3) flattened patches, row-major over the grid."""
    B, H, W, C = images.shape
    rows, cols = check_image_dims(H, W, patch)
    x = images.reshape(B, rows, patch, cols, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, rows * cols, patch * patch * C)


@dataclass
class PatchSequence:
    embeddings: Tensor  # (B, N, d)
    rows: int
    cols: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


def inject_camera_input(xp: PatchSequence, cams, table: Tensor) -> PatchSequence:
    """Add each image's camera row to every one of its patch embeddings."""
    cams = np.asarray(cams, dtype=np.int64)
    if cams.size and (cams.min() < 0 or cams.max() >= table.shape[0]):
        raise IndexError(f"camera id out of range [0, {table.shape[0]})")
    rows = T.embedding(table, cams)  # (B, d)
    shifted = xp.embeddings + rows.reshape(len(cams), 1, table.shape[1])
    return PatchSequence(shifted, xp.rows, xp.cols)


class MergeConnector(Module):
    """Concatenate each 2x2 neighbourhood (TL, TR, BL, BR) and project 4d -> 4d -> d."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(4 * dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def __call__(self, f: Tensor, rows: int, cols: int) -> Tensor:
        if rows % 2 or cols % 2:
            raise ConfigError(f"patch grid {rows}x{cols} has an odd side; 2x2 merge impossible")
        B, N, d = f.shape
        x = f.reshape(B, rows // 2, 2, cols // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(B, N // 4, 4 * d)
        return self.fc2(T.gelu(self.fc1(x)))


class VisionEncoder(Module):
    def __init__(self, dim: int, layers: int, heads: int, patch: int, height: int, width: int,
                 rng: np.random.Generator):
        self.rows, self.cols = check_image_dims(height, width, patch)
        self.patch = patch
        self.dim = dim
        fan_in = patch * patch * 3
        self.patch_proj = Linear(fan_in, dim, rng)
        self.blocks = [Block(dim, heads, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.merger = MergeConnector(dim, rng)
        self._rotary = Rotary(grid_positions(self.rows, self.cols), dim // heads)
        self.n_tokens = num_visual_tokens(height, width, patch)

    def patchify(self, images) -> PatchSequence:
        """Embed (B, H, W, 3) pixels; pass a ``Tensor`` to get gradients w.r.t. pixels."""
        if isinstance(images, Tensor):
            B, H, W, C = images.shape
            check_image_dims(H, W, self.patch)
            P = self.patch
            flat = images.reshape(B, self.rows, P, self.cols, P, C).transpose(0, 1, 3, 2, 4, 5)
            flat = flat.reshape(B, self.rows * self.cols, P * P * C)
        else:
            flat = Tensor(patchify_pixels(np.asarray(images, dtype=np.float64), self.patch))
        return PatchSequence(self.patch_proj(flat), self.rows, self.cols)

    def encode(self, xp: PatchSequence, positions: np.ndarray | None = None) -> Tensor:
        """Transformer over the patch sequence; ``positions`` overrides the (row, col) grid."""
        rotary = self._rotary
        if positions is not None:
            rotary = Rotary(positions, self.dim // self.blocks[0].attn.heads)
        x = xp.embeddings
        for block in self.blocks:
            x = block(x, rotary=rotary)
        return self.norm(x)

    def merge(self, f: Tensor) -> Tensor:
        return self.merger(f, self.rows, self.cols)

    def __call__(self, images: np.ndarray, cams=None, camera_table: Tensor | None = None) -> Tensor:
        xp = self.patchify(images)
        if camera_table is not None:
            xp = inject_camera_input(xp, cams, camera_table)
        return self.merge(self.encode(xp))
