"""Procedural pedestrian dataset, the RIMG image format, and train-time augmentation.

Each identity is a blob figure (head, torso, legs, optional bag) whose colours
and proportions are fixed by ``(seed, identity)``. Each camera applies its own
colour tint, brightness shift, framing jitter and sensor noise, so matching
across cameras is harder than matching within one.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, FormatError

MAGIC = b"RIMG"
HEADER = struct.Struct("<4sIII")

PALETTE = np.array([
    [0.85, 0.10, 0.10],  # red
    [0.10, 0.30, 0.85],  # blue
    [0.10, 0.65, 0.20],  # green
    [0.95, 0.85, 0.15],  # yellow
    [0.10, 0.10, 0.10],  # black
    [0.95, 0.95, 0.95],  # white
    [0.55, 0.30, 0.10],  # brown
    [0.60, 0.15, 0.65],  # purple
])

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class IdentityProfile:
    identity: int
    torso_rgb: tuple[float, float, float]
    leg_rgb: tuple[float, float, float]
    torso_leg_ratio: float
    body_width: float
    head_size: float
    accessory: bool
    accessory_rgb: tuple[float, float, float]

    @classmethod
    def sample(cls, seed: int, identity: int) -> "IdentityProfile":
        rng = np.random.default_rng([seed, 1, identity])
        torso = PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 0.06, 3)
        legs = PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 0.06, 3)
        bag = PALETTE[rng.integers(len(PALETTE))]
        return cls(
            identity=identity,
            torso_rgb=tuple(np.clip(torso, 0, 1)),
            leg_rgb=tuple(np.clip(legs, 0, 1)),
            torso_leg_ratio=float(rng.uniform(0.7, 1.4)),
            body_width=float(rng.uniform(0.35, 0.6)),
            head_size=float(rng.uniform(0.09, 0.15)),
            accessory=bool(rng.random() < 0.5),
            accessory_rgb=tuple(bag),
        )


@dataclass(frozen=True)
class CameraProfile:
    camera: int
    tint: tuple[float, float, float]
    brightness: float
    jitter: float
    noise_sigma: float

    @classmethod
    def sample(cls, seed: int, camera: int) -> "CameraProfile":
        rng = np.random.default_rng([seed, 2, camera])
        return cls(
            camera=camera,
            tint=tuple(rng.uniform(0.7, 1.3, 3)),
            brightness=float(rng.uniform(-0.15, 0.15)),
            jitter=float(rng.uniform(0.03, 0.12)),
            noise_sigma=float(rng.uniform(0.02, 0.07)),
        )


@dataclass
class Record:
    path: str
    identity: int
    camera: int
    split: str


@dataclass
class DatasetIndex:
    root: Path
    records: list[Record]

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def identities(self, split: str) -> list[int]:
        return sorted({r.identity for r in self.records if r.split == split})

    @property
    def num_cameras(self) -> int:
        return max(r.camera for r in self.records) + 1


# ---------------------------------------------------------------------------
# RIMG format


def encode_rimg(pixels: np.ndarray) -> bytes:
    """(H, W, 3) uint8 -> bytes."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("RIMG payload must be an (H, W, 3) uint8 array")
    H, W, C = pixels.shape
    return HEADER.pack(MAGIC, H, W, C) + np.ascontiguousarray(pixels).tobytes()


def decode_rimg(blob: bytes, path=None) -> np.ndarray:
    if len(blob) < HEADER.size:
        raise FormatError(f"truncated header ({len(blob)} bytes)", offset=len(blob), path=path)
    magic, H, W, C = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if C != 3:
        raise FormatError(f"expected 3 channels, header says {C}", offset=12, path=path)
    expected = HEADER.size + H * W * C
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - HEADER.size} does not match header {H}x{W}x{C}",
            offset=min(len(blob), expected), path=path,
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size).reshape(H, W, C).copy()


def write_image(path, pixels: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_rimg(pixels))
    except OSError as exc:
        raise DatasetError(f"cannot write image {path}: {exc.strerror}") from exc


def read_image(path) -> np.ndarray:
    """Raw uint8 pixels of one RIMG file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc.strerror}") from exc
    return decode_rimg(blob, path)


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) floats in [0, 1]
    identity: int
    camera: int
    split: str


def load_image(path, record: Record | None = None) -> ImageSample:
    pixels = read_image(path).astype(np.float64) / 255.0
    if record is None:
        return ImageSample(pixels, -1, -1, "")
    return ImageSample(pixels, record.identity, record.camera, record.split)


# ---------------------------------------------------------------------------
# index


def write_index(root, records: list[Record]) -> Path:
    path = Path(root) / "index.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "identity", "camera", "split"])
        for r in records:
            writer.writerow([r.path, r.identity, r.camera, r.split])
    return path


def read_index(root) -> DatasetIndex:
    root = Path(root)
    path = root / "index.csv"
    if not path.is_file():
        raise DatasetError(f"dataset index not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "identity", "camera", "split"]:
            raise FormatError(f"unexpected index header {reader.fieldnames}", path=path)
        for row in reader:
            if row["split"] not in SPLITS:
                raise FormatError(f"unknown split {row['split']!r}", path=path)
            records.append(Record(row["path"], int(row["identity"]), int(row["camera"]), row["split"]))
    return DatasetIndex(root, records)


def load_split(index: DatasetIndex, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All images of a split as (B, H, W, 3) floats plus identity and camera vectors."""
    records = index.subset(split)
    if not records:
        raise DatasetError(f"split {split!r} is empty in {index.root}")
    images = np.stack([load_image(index.root / r.path).pixels for r in records])
    ids = np.array([r.identity for r in records], dtype=np.int64)
    cams = np.array([r.camera for r in records], dtype=np.int64)
    return images, ids, cams


# ---------------------------------------------------------------------------
# rendering


def _fill_rect(img, top, bottom, left, right, rgb):
    H, W, _ = img.shape
    t, b = int(round(max(0, top))), int(round(min(H, bottom)))
    l, r = int(round(max(0, left))), int(round(min(W, right)))
    if b > t and r > l:
        img[t:b, l:r] = rgb


def render_person(ident: IdentityProfile, cam: CameraProfile, rng: np.random.Generator,
                  height: int, width: int) -> np.ndarray:
    img = np.full((height, width, 3), rng.uniform(0.25, 0.75))
    img += rng.normal(0, 0.05, (height, width, 3))

    scale = rng.uniform(0.9, 1.05)
    cx = width * (0.5 + rng.uniform(-cam.jitter, cam.jitter))
    top = height * (0.04 + rng.uniform(0, cam.jitter))
    fig_h = height * 0.9 * scale
    head_h = fig_h * ident.head_size * 1.6
    body_h = fig_h - head_h
    torso_h = body_h * ident.torso_leg_ratio / (1 + ident.torso_leg_ratio)
    half_w = width * ident.body_width * scale / 2

    # head: ellipse in a skin tone shared by everyone
    yy, xx = np.mgrid[0:height, 0:width]
    hy, hx = top + head_h / 2, cx
    ry, rx = head_h / 2, head_h / 2.6
    img[((yy - hy) / ry) ** 2 + ((xx - hx) / rx) ** 2 <= 1.0] = (0.85, 0.65, 0.5)

    t0 = top + head_h
    _fill_rect(img, t0, t0 + torso_h, cx - half_w, cx + half_w, ident.torso_rgb)
    l0 = t0 + torso_h
    gap = max(1.0, half_w * 0.15)
    _fill_rect(img, l0, top + fig_h, cx - half_w * 0.85, cx - gap / 2, ident.leg_rgb)
    _fill_rect(img, l0, top + fig_h, cx + gap / 2, cx + half_w * 0.85, ident.leg_rgb)
    if ident.accessory:
        side = 1 if rng.random() < 0.5 else -1
        bx = cx + side * half_w
        _fill_rect(img, t0 + torso_h * 0.3, t0 + torso_h * 0.9, min(bx, bx + side * width * 0.15),
                   max(bx, bx + side * width * 0.15), ident.accessory_rgb)

    img = img * np.asarray(cam.tint) + cam.brightness
    img += rng.normal(0, cam.noise_sigma, img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class DatasetSpec:
    seed: int = 0
    num_train_ids: int = 64
    num_test_ids: int = 32
    num_cameras: int = 4
    images_per_id_per_cam: int = 4
    height: int = 64
    width: int = 32

    def validate(self) -> "DatasetSpec":
        if self.num_cameras < 2:
            raise ConfigError("at least 2 cameras are needed for cross-camera evaluation")
        for name in ("num_train_ids", "num_test_ids", "images_per_id_per_cam", "height", "width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.images_per_id_per_cam < 2:
            raise ConfigError("images_per_id_per_cam must be >= 2 so every query has gallery matches")
        return self


def generate_dataset(out_dir, spec: DatasetSpec | None = None, **kwargs) -> DatasetIndex:
    """Render every image and write ``index.csv``; a pure function of ``spec``."""
    spec = (spec or DatasetSpec(**kwargs)).validate()
    root = Path(out_dir)
    cams = [CameraProfile.sample(spec.seed, c) for c in range(spec.num_cameras)]
    records: list[Record] = []
    ordinal = 0
    total_ids = spec.num_train_ids + spec.num_test_ids
    for identity in range(total_ids):
        ident = IdentityProfile.sample(spec.seed, identity)
        is_train = identity < spec.num_train_ids
        for cam in cams:
            for k in range(spec.images_per_id_per_cam):
                rng = np.random.default_rng([spec.seed, 3, ordinal])
                ordinal += 1
                pixels = render_person(ident, cam, rng, spec.height, spec.width)
                if is_train:
                    split = "train"
                else:
                    split = "query" if k == 0 else "gallery"
                rel = f"images/{split}/{identity:04d}_c{cam.camera}_{k}.rimg"
                write_image(root / rel, pixels)
                records.append(Record(rel, identity, cam.camera, split))
    try:
        write_index(root, records)
    except OSError as exc:
        raise DatasetError(f"cannot write index in {root}: {exc.strerror}") from exc
    return DatasetIndex(root, records)


# ---------------------------------------------------------------------------
# augmentation


def channel_mean(images: np.ndarray) -> np.ndarray:
    return images.reshape(-1, images.shape[-1]).mean(axis=0)


def augment(image: np.ndarray, rng: np.random.Generator, fill: np.ndarray, flip_p: float = 0.5,
            pad: int = 4, erase_p: float = 0.5, area=(0.02, 0.2), trace: dict | None = None) -> np.ndarray:
    """Horizontal flip, reflect-pad + random crop, random erasing, in that order."""
    H, W, _ = image.shape
    out = image
    flip = rng.random() < flip_p
    if flip:
        out = out[:, ::-1]
    top = left = pad
    if pad > 0:
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        out = padded[top:top + H, left:left + W]
    box = None
    if rng.random() < erase_p:
        for _ in range(100):
            target = rng.uniform(*area) * H * W
            aspect = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3)))
            h = int(round(np.sqrt(target * aspect)))
            w = int(round(np.sqrt(target / aspect)))
            if 0 < h < H and 0 < w < W and area[0] <= h * w / (H * W) <= area[1]:
                y = int(rng.integers(0, H - h + 1))
                x = int(rng.integers(0, W - w + 1))
                out = out.copy()
                out[y:y + h, x:x + w] = fill
                box = (y, x, h, w)
                break
    if trace is not None:
        trace.update(flip=flip, crop=(top, left), erase=box)
    return np.ascontiguousarray(out)
