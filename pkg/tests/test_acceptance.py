"""Acceptance gate: one pass/fail line per criterion, printed and collected for the summary."""

import csv
import io
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import ap_cmc_oracle, id_loss_oracle, smoothed_targets_oracle, triplet_oracle
from semtok_reid.cli import main
from semtok_reid.config import TrainConfig, apply_variant
from semtok_reid.data import augment, read_index
from semtok_reid.evaluation import cmc_map, evaluate
from semtok_reid.losses import batch_hard_triplet, id_loss, smoothed_targets, total_loss
from semtok_reid.sgi import SGI_BLOCKS, concat_semantic
from semtok_reid.tensor import Tensor, no_grad
from semtok_reid.train import (
    AdamW,
    RunData,
    build_model,
    decoder_checksum,
    decoder_path_gradient,
    parameter_checksum,
    pk_sample,
    train,
    train_step,
)
from semtok_reid.vision import VisionEncoder, num_visual_tokens


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def default_run(default_data, tmp_path_factory):
    """Two independent CLI training runs on the default config and dataset."""
    root = tmp_path_factory.mktemp("accept")
    for name in ("a", "b"):
        assert main(["train", "--data", str(default_data), "--out", str(root / name)]) == 0
    return root


@pytest.fixture(scope="module")
def default_run_data(default_data):
    return RunData.load(read_index(default_data))


@pytest.mark.slow
def test_criterion_1_gradient_integrity(capsys):
    start = time.perf_counter()
    code = main(["grad-check", "--scale", "full"])
    seconds = time.perf_counter() - start
    out = capsys.readouterr().out
    ok = code == 0 and "overall=pass" in out and "pixel_to_loss" in out and seconds < 120
    assert record(1, "grad-check --scale full", ok, f"exit={code} seconds={seconds:.1f}")


@pytest.mark.slow
def test_criterion_2_freeze_contract(default_run_data):
    data = default_run_data
    cfg = TrainConfig()
    model = build_model(cfg, data)
    opt = AdamW(model.trainable_parameters(), cfg.weight_decay)
    dec0 = decoder_checksum(model)
    vis0 = parameter_checksum(model.vision.named_parameters())
    sgi0 = parameter_checksum(model.sgi.named_parameters())
    rng = np.random.default_rng(0)
    label_of = {int(v): i for i, v in enumerate(data.id_list)}

    def batch():
        idx = pk_sample(data.train_ids, cfg.p_ids, cfg.k_imgs, rng)
        images = np.stack([augment(data.train_images[i], rng, data.fill) for i in idx])
        labels = data.train_ids[idx]
        return images, data.train_cams[idx], labels, np.array([label_of[int(v)] for v in labels])

    for _ in range(50):
        train_step(model, opt, *batch(), lr=cfg.base_lr)
    frozen = decoder_checksum(model) == dec0
    vis_moved = parameter_checksum(model.vision.named_parameters()) != vis0
    sgi_moved = parameter_checksum(model.sgi.named_parameters()) != sgi0
    probe = batch()
    g_full = np.abs(decoder_path_gradient(model, *probe)).sum()
    stopped = build_model(apply_variant(cfg, "stop_grad"), data)
    g_stop = np.abs(decoder_path_gradient(stopped, *probe)).max()
    ok = frozen and vis_moved and sgi_moved and g_full > 0 and g_stop == 0.0
    detail = (f"decoder_unchanged={frozen} vision_changed={vis_moved} sgi_changed={sgi_moved} "
              f"|dL/dV|_decoder={g_full:.3e} stop_grad_max={g_stop}")
    assert record(2, "freeze contract after 50 steps", ok, detail)


def test_criterion_3_loss_exactness():
    rng = np.random.default_rng(3)
    worst = {"smoothed_targets": 0.0, "id_loss": 0.0, "batch_hard_triplet": 0.0, "total_loss": 0.0}
    for _ in range(100):
        n = int(rng.integers(2, 30))
        y = rng.integers(0, n, size=int(rng.integers(1, 9)))
        q = smoothed_targets(y, n, 0.1)
        worst["smoothed_targets"] = max(worst["smoothed_targets"],
                                        np.max(np.abs(q - np.stack([smoothed_targets_oracle(int(t), n, 0.1) for t in y]))))
        logits = rng.normal(scale=4, size=(len(y), n))
        worst["id_loss"] = max(worst["id_loss"], abs(id_loss(Tensor(logits), q).item() - id_loss_oracle(logits, q)))
        p, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        labels = rng.permutation(np.repeat(rng.choice(1000, size=p, replace=False), k))
        feats = rng.normal(size=(p * k, int(rng.integers(1, 8))))
        got = batch_hard_triplet(Tensor(feats), labels, 0.3).loss.item()
        worst["batch_hard_triplet"] = max(worst["batch_hard_triplet"], abs(got - triplet_oracle(feats, labels, 0.3)))
        a, b = rng.uniform(0, 5, size=2)
        worst["total_loss"] = max(worst["total_loss"], abs(total_loss(a, b, 0.25, 1.0) - (0.25 * a + 1.0 * b)))
    ok = all(v <= 1e-10 for v in worst.values())
    assert record(3, "losses match oracles on 100 instances", ok,
                  " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_4_metric_exactness():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        nq, ng = int(rng.integers(1, 12)), int(rng.integers(2, 40))
        ids, cams = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        qi, qc = rng.integers(0, ids, nq), rng.integers(0, cams, nq)
        gi, gc = rng.integers(0, ids, ng), rng.integers(0, cams, ng)
        if i % 4 == 0:  # force same-id-same-camera rows into the gallery
            gi[: min(nq, ng)], gc[: min(nq, ng)] = qi[: min(nq, ng)], qc[: min(nq, ng)]
        S = np.round(rng.uniform(-1, 1, size=(nq, ng)), 1)
        oracle_map, oracle_cmc = ap_cmc_oracle(S, qi, qc, gi, gc, 10)
        r = cmc_map(S, qi, qc, gi, gc, max_rank=10)
        worst = max(worst, abs(r.mAP - oracle_map), float(np.max(np.abs(r.cmc - oracle_cmc))))
    perfect = cmc_map(np.array([[0.9, 0.5, 0.1]]), [1], [0], [1, 2, 3], [1, 1, 1]).mAP
    half = cmc_map(np.array([[0.9, 0.5]]), [1], [0], [2, 1], [1, 1]).mAP
    ok = worst <= 1e-12 and perfect == 1.0 and half == 0.5
    assert record(4, "cmc_map matches oracle", ok, f"max_err={worst:.1e} perfect={perfect} half={half}")


def test_criterion_5_shape_fidelity():
    sweep = [(280, 140, 14, 50), (64, 32, 8, 8), (32, 16, 4, 8), (48, 48, 8, 9), (128, 64, 16, 8)]
    problems = []
    rng = np.random.default_rng(5)
    for H, W, P, n_expected in sweep:
        n = num_visual_tokens(H, W, P)
        enc = VisionEncoder(16, 1, 2, P, H, W, rng)
        with no_grad():
            V = enc(rng.uniform(size=(1, H, W, 3)))
            z = concat_semantic(Tensor(np.zeros((1, 16))), V)
        if not (n == n_expected == V.shape[1] == (H // P) * (W // P) // 4 and z.shape[1] == n + 1):
            problems.append(f"{H}x{W}/{P}")
    cfg = TrainConfig(dim=16, heads=2, patch=14, vision_layers=1, decoder_layers=1)
    from semtok_reid.model import ReIDModel

    model = ReIDModel(cfg, 280, 140, 2, 3)
    model.sgi.keep_attention(True)
    with no_grad():
        model(rng.uniform(size=(1, 280, 140, 3)), np.array([0]))
    maps = model.sgi.attention_maps()
    seq_ok = all(m.shape[-2:] == (51, 51) for m in maps)
    ok = not problems and seq_ok and len(model.sgi.blocks) == SGI_BLOCKS == 4
    assert record(5, "token counts and SGI shape", ok,
                  f"n_280x140_p14={num_visual_tokens(280, 140, 14)} sgi_len={maps[0].shape[-1]} "
                  f"blocks={len(model.sgi.blocks)} bad={problems or 'none'}")


@pytest.mark.slow
def test_criterion_6_determinism(default_run):
    same_ckpt = (default_run / "a/model.rckp").read_bytes() == (default_run / "b/model.rckp").read_bytes()
    same_report = (default_run / "a/eval.txt").read_bytes() == (default_run / "b/eval.txt").read_bytes()
    assert record(6, "two default train runs are bitwise identical", same_ckpt and same_report,
                  f"checkpoint_equal={same_ckpt} report_equal={same_report}")


def _map_from_report(path) -> float:
    for line in path.read_text().splitlines():
        if line.startswith("mAP="):
            return float(line.split("=", 1)[1])
    raise AssertionError(f"no mAP line in {path}")


@pytest.mark.slow
def test_criterion_7_learning_signal(default_run, default_run_data):
    trained = _map_from_report(default_run / "a/eval.txt")
    untrained_model = build_model(TrainConfig(), default_run_data)
    untrained = evaluate(untrained_model, default_run_data.query, default_run_data.gallery).mAP
    gain = trained - untrained
    assert record(7, "mAP gain over the untrained model >= 0.2", gain >= 0.2,
                  f"trained={trained:.4f} untrained={untrained:.4f} gain={gain:.4f}")


@pytest.mark.slow
def test_criterion_8_ablation_trend(default_data, tmp_path, capsys):
    code = main(["ablate", "--data", str(default_data), "--seeds", "0,1,2", "--out", str(tmp_path)])
    capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ablation.csv").read_text())))
    maps = {}
    for row in rows:
        if row["status"] == "ok":
            maps.setdefault(row["variant"], {})[int(row["seed"])] = float(row["mAP"])
    full = maps.get("full", {})
    verdicts, parts = [], []
    for other in ("stop_grad", "no_sgi"):
        alt = maps.get(other, {})
        seeds = sorted(set(full) & set(alt))
        wins = sum(full[s] >= alt[s] for s in seeds)
        mean_ok = bool(seeds) and np.mean([full[s] for s in seeds]) >= np.mean([alt[s] for s in seeds])
        verdicts.append(mean_ok and wins >= 2)
        parts.append(f"full_vs_{other}: mean {np.mean(list(full.values())):.4f} vs "
                     f"{np.mean(list(alt.values())):.4f}, seed wins {wins}/{len(seeds)}")
    ok = code == 0 and len(rows) == 21 and all(verdicts)
    assert record(8, "ablation ordering over 3 seeds", ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_9_resume(default_run_data, tmp_path):
    cfg = TrainConfig(epochs=4, warmup_epochs=1, decay_epoch=3, eval_every=0)
    full = train(cfg, data=default_run_data, log=lambda s: None, evaluate_final=False)
    train(cfg, data=default_run_data, out_dir=tmp_path, until_epoch=2, log=lambda s: None, evaluate_final=False)
    resumed = train(cfg, data=default_run_data, resume=tmp_path / "model.rckp", log=lambda s: None,
                    evaluate_final=False)
    a, b = dict(full.model.named_parameters()), dict(resumed.model.named_parameters())
    mismatched = [n for n in a if not np.array_equal(a[n].data, b[n].data)]
    ok = a.keys() == b.keys() and not mismatched
    assert record(9, "resume equals uninterrupted training", ok,
                  f"params={len(a)} mismatched={len(mismatched)}")
