"""Full pipeline: visual tokens -> semantic token -> camera supplement -> SGI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import FrozenDecoder, Vocabulary, css_late
from .nn import Linear, Module
from .sgi import SGI, QueryOnlySGI
from .tensor import Tensor
from .vision import VisionEncoder


@dataclass
class Representation:
    V: Tensor
    v_reid: Tensor
    v_bar: Tensor
    v_hat: Tensor
    token_id: np.ndarray | None


class ReIDModel(Module):
    def __init__(self, cfg: TrainConfig, height: int, width: int, num_cameras: int, num_ids: int):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 101])
        d = cfg.dim
        self.vision = VisionEncoder(d, cfg.vision_layers, cfg.heads, cfg.patch, height, width, rng)
        self.camera_table = Tensor(rng.normal(0.0, 0.02, size=(num_cameras, d)), requires_grad=True)
        decoder_rng = np.random.default_rng([cfg.seed, 202])
        self.decoder = FrozenDecoder(d, cfg.decoder_layers, cfg.heads, Vocabulary(cfg.vocab_size),
                                     decoder_rng, cfg.instruction)
        if cfg.pstg_mode == "learnable_token":
            self.reid_token = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
        if cfg.sgi_variant == "full":
            self.sgi = SGI(d, cfg.heads, rng)
        elif cfg.sgi_variant == "query_only":
            self.sgi = QueryOnlySGI(d, cfg.heads, rng)
        else:
            self.sgi = None
        self.classifier = Linear(d, num_ids, rng)
        self.num_cameras = num_cameras
        self.num_ids = num_ids
        self.image_hw = (height, width)

    def represent(self, images, cams) -> Representation:
        cfg = self.cfg
        table = self.camera_table if cfg.css_mode == "input" else None
        V = self.vision(images, cams, table)
        return self.represent_tokens(V, V, cams)

    def represent_tokens(self, V_decoder: Tensor, V_sgi: Tensor, cams) -> Representation:
        """Everything after the vision encoder; the two inputs let callers isolate one path."""
        cfg = self.cfg
        token_id = None
        if cfg.pstg_mode == "learnable_token":
            B, _, d = V_sgi.shape
            v_reid = T.broadcast_to(self.reid_token.reshape(1, d), (B, d))
        else:
            V_dec = T.stop_gradient(V_decoder) if cfg.stop_gradient else V_decoder
            sem = self.decoder.generate_semantic_token(V_dec)
            v_reid, token_id = sem.v_reid, sem.token_id
        v_bar = css_late(v_reid, cams, self.camera_table) if cfg.css_mode == "late" else v_reid
        v_hat = v_bar if self.sgi is None else self.sgi(v_bar, V_sgi)
        return Representation(V_sgi, v_reid, v_bar, v_hat, token_id)

    def __call__(self, images, cams) -> Tensor:
        return self.represent(images, cams).v_hat

    def logits(self, features: Tensor) -> Tensor:
        return self.classifier(features)
