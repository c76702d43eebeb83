"""Training loop, optimizer, schedule, PK sampling, checkpoints and the ablation suite."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import ABLATION_GRID, KEY_TO_FIELD, TrainConfig, _coerce, apply_variant, serialize_config
from .data import DatasetIndex, augment, channel_mean, load_split
from .errors import DatasetError, FormatError, NumericError
from .evaluation import EvalReport, evaluate
from .losses import LossReport, batch_hard_triplet, id_loss, smoothed_targets, total_loss
from .model import ReIDModel

logger = logging.getLogger(__name__)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from base/10 to base, plateau, then one multiplicative decay."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (0.1 + 0.9 * epoch / cfg.warmup_epochs)
    if epoch < cfg.decay_epoch:
        return cfg.base_lr
    return cfg.base_lr * cfg.decay_factor


def pk_sample(labels, p_ids: int, k_imgs: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a batch with ``p_ids`` identities x ``k_imgs`` images each.

    Identities with fewer than ``k_imgs`` images are sampled with replacement.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < p_ids:
        raise DatasetError(f"PK sampling needs {p_ids} identities, dataset has {len(uniq)}")
    chosen = rng.choice(uniq, size=p_ids, replace=False)
    batch = []
    for ident in chosen:
        pool = np.flatnonzero(labels == ident)
        batch.append(rng.choice(pool, size=k_imgs, replace=len(pool) < k_imgs))
    return np.concatenate(batch)


def decays(name: str) -> bool:
    # biases, norm affines, embedding tables and the learnable token are exempt
    return name.endswith(".weight")


class AdamW:
    """Adam with decoupled weight decay; holds state for trainable parameters only."""

    def __init__(self, params: list[tuple[str, T.Tensor]], weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, p) for n, p in params if p.requires_grad and not p.frozen]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(name):
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.array(float(self.t))}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]):
        self.t = int(np.asarray(tensors.get("optim.t", 0.0)).reshape(-1)[0])
        known = {n for n, _ in self.params}
        self.m, self.v = {}, {}
        for key, arr in tensors.items():
            for prefix, store in (("optim.m.", self.m), ("optim.v.", self.v)):
                if key.startswith(prefix):
                    name = key[len(prefix):]
                    if name not in known:
                        raise FormatError(f"optimizer state for unknown or frozen parameter {name!r}")
                    store[name] = arr.copy()


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def decoder_checksum(model: ReIDModel) -> str:
    return parameter_checksum(model.decoder.named_parameters("decoder."))


# ---------------------------------------------------------------------------
# data held in memory for one run


@dataclass
class RunData:
    train_images: np.ndarray
    train_ids: np.ndarray
    train_cams: np.ndarray
    query: tuple
    gallery: tuple
    fill: np.ndarray
    id_list: np.ndarray

    @classmethod
    def load(cls, index: DatasetIndex) -> "RunData":
        train = load_split(index, "train")
        query = load_split(index, "query")
        gallery = load_split(index, "gallery")
        return cls(train[0], train[1], train[2], query, gallery, channel_mean(train[0]), np.unique(train[1]))

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.train_images.shape[1], self.train_images.shape[2]

    @property
    def num_cameras(self) -> int:
        return int(max(self.train_cams.max(), self.query[2].max(), self.gallery[2].max())) + 1


def build_model(cfg: TrainConfig, data: RunData) -> ReIDModel:
    H, W = data.image_hw
    return ReIDModel(cfg, H, W, data.num_cameras, len(data.id_list))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ReIDModel, opt: AdamW, epoch: int) -> Path:
    tensors = {f"model.{n}": p.data for n, p in model.named_parameters()}
    tensors.update(opt.state_tensors())
    meta = {}
    for line in serialize_config(model.cfg).splitlines():
        key, value = line.split("=", 1)
        meta[key] = value
    H, W = model.image_hw
    rng_state = np.random.default_rng([model.cfg.seed, 7, epoch]).bit_generator.state
    meta.update({
        "meta.epoch": str(epoch),
        "meta.height": str(H),
        "meta.width": str(W),
        "meta.num_cameras": str(model.num_cameras),
        "meta.num_ids": str(model.num_ids),
        "meta.rng": json.dumps(rng_state, sort_keys=True),
    })
    return checkpoint.save(path, tensors, meta)


@dataclass
class LoadedCheckpoint:
    model: ReIDModel
    optimizer: AdamW
    epoch: int
    rng_state: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    tensors, meta = checkpoint.load(path)
    changes = {}
    try:
        for key, value in meta.items():
            if key in KEY_TO_FIELD:
                f = KEY_TO_FIELD[key]
                changes[f.name] = _coerce(f, value)
        cfg = TrainConfig(**changes).validate()
        model = ReIDModel(cfg, int(meta["meta.height"]), int(meta["meta.width"]),
                          int(meta["meta.num_cameras"]), int(meta["meta.num_ids"]))
        epoch = int(meta["meta.epoch"])
        rng_state = json.loads(meta["meta.rng"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata incomplete or invalid: {exc}", path=path) from None
    for name, p in model.named_parameters():
        key = f"model.{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks parameter {name!r}", path=path)
        if tensors[key].shape != p.shape:
            raise FormatError(f"parameter {name!r} has shape {tensors[key].shape}, expected {p.shape}", path=path)
        p.data = tensors[key].copy()
    opt = AdamW(model.trainable_parameters(), cfg.weight_decay)
    opt.load_state(tensors)
    return LoadedCheckpoint(model, opt, epoch, rng_state)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ReIDModel
    optimizer: AdamW
    epoch: int
    history: list[dict] = field(default_factory=list)
    report: EvalReport | None = None
    checkpoint_path: Path | None = None


def train_step(model: ReIDModel, opt: AdamW, images, cams, labels, label_idx, lr: float) -> LossReport:
    cfg = model.cfg
    rep = model.represent(images, cams)
    logits = model.logits(rep.v_hat)
    l_id = id_loss(logits, smoothed_targets(label_idx, model.num_ids, cfg.epsilon))
    tri = batch_hard_triplet(rep.v_hat, labels, cfg.margin)
    loss = total_loss(l_id, tri.loss, cfg.alpha1, cfg.alpha2)
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite loss (L_id={l_id.item()}, L_tri={tri.loss.item()})")
    model.zero_grad()
    T.backward(loss)
    opt.step(lr)
    return LossReport(l_id.item(), tri.loss.item(), loss.item(), cfg.alpha1, cfg.alpha2, cfg.margin, tri.d_p, tri.d_n)


def train(cfg: TrainConfig, index: DatasetIndex | None = None, *, data: RunData | None = None,
          out_dir=None, resume=None, until_epoch: int | None = None,
          log: Callable[[str], None] | None = None, evaluate_final: bool = True) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``until_epoch`` (default ``cfg.epochs``)."""
    cfg = cfg.validate()
    data = data or RunData.load(index)
    emit = log or logger.info
    if resume is not None:
        loaded = load_checkpoint(resume)
        model, opt, start = loaded.model, loaded.optimizer, loaded.epoch
        if serialize_config(model.cfg) != serialize_config(cfg):
            logger.warning("resuming with the checkpoint's own configuration")
        cfg = model.cfg
    else:
        model = build_model(cfg, data)
        opt = AdamW(model.trainable_parameters(), cfg.weight_decay)
        start = 0
    end = cfg.epochs if until_epoch is None else until_epoch
    steps = cfg.steps_per_epoch or max(1, len(data.train_ids) // cfg.batch_size)
    label_of = {int(ident): i for i, ident in enumerate(data.id_list)}
    label_idx = np.array([label_of[int(i)] for i in data.train_ids])
    history = []
    report = None
    for epoch in range(start, end):
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        lr = lr_at(epoch, cfg)
        reports = []
        for step in range(steps):
            idx = pk_sample(data.train_ids, cfg.p_ids, cfg.k_imgs, rng)
            images = np.stack([
                augment(data.train_images[i], rng, data.fill, cfg.flip_p, cfg.pad, cfg.erase_p) for i in idx
            ])
            try:
                reports.append(train_step(model, opt, images, data.train_cams[idx], data.train_ids[idx],
                                          label_idx[idx], lr))
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch={epoch} step={step}") from None
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "L_id": float(np.mean([r.l_id for r in reports])),
            "L_tri": float(np.mean([r.l_tri for r in reports])),
            "L": float(np.mean([r.total for r in reports])),
        }
        emit(f"epoch={row['epoch']} lr={lr:.6g} L_id={row['L_id']:.6f} L_tri={row['L_tri']:.6f} L={row['L']:.6f}")
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and epoch + 1 < end:
            report = evaluate(model, data.query, data.gallery, cfg.max_rank)
            row.update(mAP=report.mAP, rank1=report.rank1)
            emit(f"eval epoch={epoch + 1} mAP={report.mAP:.6f} Rank-1={report.rank1:.6f}")
        history.append(row)
    if evaluate_final:
        report = evaluate(model, data.query, data.gallery, cfg.max_rank)
        emit(f"eval epoch={end} mAP={report.mAP:.6f} Rank-1={report.rank1:.6f}")
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        ckpt_path = save_checkpoint(out / "model.rckp", model, opt, end)
        if report is not None:
            (out / "eval.txt").write_text(report.to_text(), encoding="utf-8")
    return TrainResult(model, opt, end, history, report, ckpt_path)


def decoder_path_gradient(model: ReIDModel, images, cams, labels, label_idx) -> np.ndarray:
    """dL/dV restricted to the route through the frozen decoder.

    V is computed once, then fed to the decoder as a fresh leaf while SGI sees
    a constant copy, so the returned gradient is exactly the decoder's share.
    """
    cfg = model.cfg
    table = model.camera_table if cfg.css_mode == "input" else None
    with T.no_grad():
        V = model.vision(images, cams, table).data
    V_leaf = T.Tensor(V.copy(), requires_grad=True)
    rep = model.represent_tokens(V_leaf, T.Tensor(V), cams)
    l_id = id_loss(model.logits(rep.v_hat), smoothed_targets(label_idx, model.num_ids, cfg.epsilon))
    tri = batch_hard_triplet(rep.v_hat, labels, cfg.margin)
    loss = total_loss(l_id, tri.loss, cfg.alpha1, cfg.alpha2)
    if loss.requires_grad:
        model.zero_grad()
        T.backward(loss)
        model.zero_grad()
    return np.zeros_like(V) if V_leaf.grad is None else V_leaf.grad


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    variant: str
    seed: int
    mAP: float | None
    rank1: float | None
    status: str = "ok"


def run_ablation_suite(base_cfg: TrainConfig, index: DatasetIndex, seeds, variants=ABLATION_GRID,
                       log: Callable[[str], None] | None = None) -> list[AblationRow]:
    data = RunData.load(index)
    emit = log or logger.info
    rows = []
    for seed in seeds:
        for name in variants:
            try:
                cfg = apply_variant(base_cfg.replace(seed=int(seed)), name)
                result = train(cfg, data=data, log=lambda msg, n=name, s=seed: emit(f"variant={n} seed={s} {msg}"))
                rows.append(AblationRow(name, int(seed), result.report.mAP, result.report.rank1))
            except Exception as exc:  # one failed variant must not sink the grid
                emit(f"variant={name} seed={seed} status=error error={type(exc).__name__}: {exc}")
                rows.append(AblationRow(name, int(seed), None, None, f"error: {type(exc).__name__}"))
    return rows


def format_ablation(rows: list[AblationRow]) -> tuple[str, str]:
    """(CSV text, aligned plain-text table)."""
    csv_lines = ["variant,seed,mAP,Rank-1,status"]
    table = [f"{'variant':<12} {'seed':>4} {'mAP':>8} {'Rank-1':>8}  status"]
    for r in rows:
        m = "" if r.mAP is None else f"{r.mAP:.6f}"
        k = "" if r.rank1 is None else f"{r.rank1:.6f}"
        csv_lines.append(f"{r.variant},{r.seed},{m},{k},{r.status}")
        table.append(f"{r.variant:<12} {r.seed:>4} {m or 'error':>8} {k or 'error':>8}  {r.status}")
    return "\n".join(csv_lines) + "\n", "\n".join(table) + "\n"
