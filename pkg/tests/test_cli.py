import hashlib

import numpy as np
import pytest

from semtok_reid import tensor as T
from semtok_reid.cli import main
from semtok_reid.config import serialize_config
from conftest import tiny_config

SMALL_DATA = ["--ids", "6", "--test-ids", "3", "--cams", "2", "--imgs-per", "2", "--height", "32", "--width", "16"]


def _digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--seed", "1"] + SMALL_DATA) == 0
    (root / "tiny.cfg").write_text(serialize_config(tiny_config()), encoding="utf-8")
    assert main(["train", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_gen_data_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "4"] + SMALL_DATA) == 0
    assert (tmp_path / "a/index.csv").exists()
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    main(["gen-data", "--out", str(tmp_path / "c"), "--seed", "5"] + SMALL_DATA)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")
    assert "train=" in capsys.readouterr().out


def test_gen_data_rejects_single_camera(tmp_path):
    args = ["gen-data", "--out", str(tmp_path / "x")] + SMALL_DATA
    args[args.index("--cams") + 1] = "1"
    assert main(args) == 2


def test_train_writes_log_and_checkpoint(workdir):
    log = (workdir / "run/train.log").read_text()
    assert "epoch=1 " in log and "L_id=" in log and "L_tri=" in log
    assert (workdir / "run/model.rckp").exists()


def test_train_variant_and_missing_data(workdir, tmp_path, capsys):
    assert main(["train", "--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "sg"), "--variant", "stop_grad"]) == 0
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "o"),
                 "--variant", "bogus"]) == 2


def test_seed_flag_changes_training(workdir, tmp_path):
    args = ["train", "--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data")]
    main(args + ["--out", str(tmp_path / "s7"), "--seed", "7"])
    main(args + ["--out", str(tmp_path / "s7b"), "--seed", "7"])
    main(args + ["--out", str(tmp_path / "s8"), "--seed", "8"])
    a, b, c = (tmp_path / f"{n}/model.rckp" for n in ("s7", "s7b", "s8"))
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_eval_prints_and_writes_report(workdir, tmp_path, capsys):
    ckpt = workdir / "run/model.rckp"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(workdir / "data"),
                 "--features", str(tmp_path / "f.rckp")]) == 0
    out = capsys.readouterr().out
    assert "mAP=" in out and "Rank-1=" in out
    assert (workdir / "run/eval_report.txt").read_text() in out
    assert (tmp_path / "f.rckp").exists()


def test_eval_corrupt_checkpoint(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.rckp"
    bad.write_bytes(b"RCKP" + b"\x00" * 5)
    assert main(["eval", "--ckpt", str(bad), "--data", str(workdir / "data")]) == 3
    assert "error=data" in capsys.readouterr().err


def test_ablate_rows(workdir, tmp_path, capsys):
    assert main(["ablate", "--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data"),
                 "--seeds", "0", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,seed,mAP,Rank-1,status"
    assert len(lines) == 1 + 7
    assert all(ln.endswith(",ok") for ln in lines[1:])
    assert "variant" in capsys.readouterr().out
    assert main(["ablate", "--data", str(workdir / "data"), "--seeds", "x"]) == 2


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--scale", "small"]) == 0
    out = capsys.readouterr().out
    assert "pixel_to_loss" in out and "overall=pass" in out


def test_grad_check_names_a_broken_primitive(monkeypatch, capsys):
    real = T.PRIMITIVES["exp"]

    def broken_exp(a):
        # forward is exp, but the backward only passes the identity
        return real(a.detach()) + (a - a.detach())

    monkeypatch.setitem(T.PRIMITIVES, "exp", broken_exp)
    assert main(["grad-check", "--scale", "small"]) != 0
    captured = capsys.readouterr()
    assert "exp" in captured.err and "FAIL" in captured.out


def test_grad_check_bad_scale():
    with pytest.raises(SystemExit):
        main(["grad-check", "--scale", "huge"])


def test_dump_attention(workdir, tmp_path):
    image = next((workdir / "data").rglob("*.rimg"))
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["dump-attention", "--ckpt", str(workdir / "run/model.rckp"), "--image", str(image)]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().splitlines()
    assert lines[0] == "layer,head,row,weights"
    cfg = tiny_config()
    # 32x16 image with patch 8 merges to 2x1 tokens, plus the semantic token
    n = 3
    assert len(lines) - 1 == 4 * cfg.heads * n
    for ln in lines[1:]:
        weights = np.array([float(w) for w in ln.split(",", 3)[3].split()])
        assert len(weights) == n and abs(weights.sum() - 1) < 1e-7


def test_thread_env_validation(workdir, monkeypatch):
    monkeypatch.setenv("SEMTOK_REID_THREADS", "zero")
    assert main(["gen-data", "--out", str(workdir / "z")] + SMALL_DATA) == 2
    monkeypatch.setenv("SEMTOK_REID_THREADS", "1")
    assert main(["gen-data", "--out", str(workdir / "z")] + SMALL_DATA) == 0
