"""Command-line entry point: ``semtok-reid <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file-format
error, 4 numeric failure. Logs are plain ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, VARIANTS, apply_variant, load_config
from .errors import ConfigError, DatasetError, NumericError, ReIDError

THREADS_ENV = "SEMTOK_REID_THREADS"


def _emit(text: str, stream=None):
    print(text, file=stream or sys.stdout, flush=True)


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _data_dir(path: str) -> Path:
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"data directory not found: {root}")
    return root


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import DatasetSpec, generate_dataset

    spec = DatasetSpec(
        seed=0 if args.seed is None else args.seed,
        num_train_ids=args.ids,
        num_test_ids=args.test_ids,
        num_cameras=args.cams,
        images_per_id_per_cam=args.imgs_per,
        height=args.height,
        width=args.width,
    )
    index = generate_dataset(args.out, spec)
    counts = {s: len(index.subset(s)) for s in ("train", "query", "gallery")}
    _emit(f"dataset={args.out} train={counts['train']} query={counts['query']} gallery={counts['gallery']}")
    return 0


def cmd_train(args) -> int:
    from .data import read_index
    from .train import train

    cfg = _config(args)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    index = read_index(_data_dir(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w", encoding="utf-8") as log_file:
        def log(line: str):
            _emit(line)
            log_file.write(line + "\n")
            log_file.flush()

        result = train(cfg, index, out_dir=out, log=log)
    _emit(f"checkpoint={result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from . import checkpoint
    from .data import load_split, read_index
    from .evaluation import cmc_map, extract_features, similarity
    from .train import load_checkpoint

    loaded = load_checkpoint(args.ckpt)
    index = read_index(_data_dir(args.data))
    model = loaded.model
    qf = extract_features(model, *load_split(index, "query"))
    gf = extract_features(model, *load_split(index, "gallery"))
    report = cmc_map(similarity(qf, gf), qf.ids, qf.cams, gf.ids, gf.cams, args.max_rank or model.cfg.max_rank)
    text = report.to_text()
    sys.stdout.write(text)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name("eval_report.txt")
    out.write_text(text, encoding="utf-8")
    _emit(f"report={out}")
    if args.features:
        checkpoint.save(args.features, {
            "query.features": qf.features, "query.ids": qf.ids.astype(np.float64), "query.cams": qf.cams.astype(np.float64),
            "gallery.features": gf.features, "gallery.ids": gf.ids.astype(np.float64),
            "gallery.cams": gf.cams.astype(np.float64),
        })
        _emit(f"features={args.features}")
    return 0


def cmd_ablate(args) -> int:
    from .data import read_index
    from .train import format_ablation, run_ablation_suite

    cfg = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    index = read_index(_data_dir(args.data))
    rows = run_ablation_suite(cfg, index, seeds, log=lambda line: _emit(line, sys.stderr))
    csv_text, table = format_ablation(rows)
    sys.stdout.write(csv_text + "\n" + table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(csv_text, encoding="utf-8")
        (out / "ablation.txt").write_text(table, encoding="utf-8")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.scale, seed=0 if args.seed is None else args.seed)
    sys.stdout.write(report.to_text())
    if not report.passed:
        _emit(f"failed={','.join(report.failures())}", sys.stderr)
        return 1
    return 0


def dump_attention(model, image: np.ndarray, camera: int) -> list[str]:
    """One CSV row per (layer, head, query row) of the SGI attention weights."""
    from .tensor import no_grad

    if model.sgi is None:
        raise ConfigError("this checkpoint has no SGI module (variant no_sgi); nothing to dump")
    model.sgi.keep_attention(True)
    try:
        with no_grad():
            model(image[None], np.array([camera]))
        maps = model.sgi.attention_maps()
    finally:
        model.sgi.keep_attention(False)
    lines = ["layer,head,row,weights"]
    for layer, weights in enumerate(maps):
        w = weights[0]  # (heads, rows, cols)
        for head in range(w.shape[0]):
            for row in range(w.shape[1]):
                values = " ".join(f"{v:.9g}" for v in w[head, row])
                lines.append(f"{layer},{head},{row},{values}")
    return lines


def cmd_dump_attention(args) -> int:
    from .data import load_image
    from .train import load_checkpoint

    model = load_checkpoint(args.ckpt).model
    pixels = load_image(args.image).pixels
    if pixels.shape[:2] != model.image_hw:
        raise DatasetError(f"image {args.image} is {pixels.shape[0]}x{pixels.shape[1]}, "
                           f"model expects {model.image_hw[0]}x{model.image_hw[1]}")
    if not 0 <= args.camera < model.num_cameras:
        raise ConfigError(f"--camera must be in [0, {model.num_cameras})")
    lines = dump_attention(model, pixels, args.camera)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit(f"attention={args.out} rows={len(lines) - 1}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semtok-reid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "render the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=64, help="training identities")
    p.add_argument("--test-ids", type=int, default=32)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--imgs-per", type=int, default=4, help="images per identity per camera")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=32)

    p = add("train", cmd_train, "train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", help="|".join(VARIANTS))

    p = add("eval", cmd_eval, "evaluate a checkpoint on the query/gallery splits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report file (default: eval_report.txt beside the checkpoint)")
    p.add_argument("--features", help="also export query/gallery features in checkpoint format")
    p.add_argument("--max-rank", type=int, default=None)

    p = add("ablate", cmd_ablate, "run the ablation grid over several seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="directory for ablation.csv and ablation.txt")

    p = add("grad-check", cmd_grad_check, "finite-difference check of every backward rule")
    p.add_argument("--scale", choices=("small", "full"), default="full")

    p = add("dump-attention", cmd_dump_attention, "write raw SGI attention weights for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--camera", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        _emit(f"error=config message={exc}", sys.stderr)
        return 2
    except DatasetError as exc:
        _emit(f"error=data message={exc}", sys.stderr)
        return 3
    except NumericError as exc:
        _emit(f"error=numeric message={exc}", sys.stderr)
        return 4
    except ReIDError as exc:
        _emit(f"error=usage message={exc}", sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
