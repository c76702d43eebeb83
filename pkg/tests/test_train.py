import numpy as np
import pytest

from conftest import tiny_config
from semtok_reid import checkpoint
from semtok_reid import train as train_mod
from semtok_reid.config import TrainConfig
from semtok_reid.data import augment, read_index
from semtok_reid.errors import DatasetError, FormatError, NumericError
from semtok_reid.train import (
    AdamW,
    RunData,
    build_model,
    decays,
    decoder_checksum,
    decoder_path_gradient,
    format_ablation,
    load_checkpoint,
    lr_at,
    parameter_checksum,
    pk_sample,
    run_ablation_suite,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def data(tiny_data):
    return RunData.load(read_index(tiny_data))


def _batch(data, cfg, seed=0):
    rng = np.random.default_rng(seed)
    idx = pk_sample(data.train_ids, cfg.p_ids, cfg.k_imgs, rng)
    images = np.stack([augment(data.train_images[i], rng, data.fill) for i in idx])
    label_of = {int(v): i for i, v in enumerate(data.id_list)}
    labels = data.train_ids[idx]
    return images, data.train_cams[idx], labels, np.array([label_of[int(v)] for v in labels])


def test_pk_batch_shape():
    labels = np.repeat(np.arange(64), 16)
    idx = pk_sample(labels, 16, 4, np.random.default_rng(0))
    assert len(idx) == 64
    _, counts = np.unique(labels[idx], return_counts=True)
    assert len(counts) == 16 and np.all(counts == 4)


def test_pk_samples_with_replacement_when_short():
    labels = np.array([0, 1, 1, 1, 2, 2])
    idx = pk_sample(labels, 3, 3, np.random.default_rng(0))
    _, counts = np.unique(labels[idx], return_counts=True)
    assert np.all(counts == 3)


def test_pk_needs_enough_identities():
    with pytest.raises(DatasetError):
        pk_sample(np.zeros(10, int), 2, 2, np.random.default_rng(0))


def test_lr_schedule_examples():
    long_run = TrainConfig(epochs=60, decay_epoch=30)
    assert lr_at(0, long_run) == pytest.approx(3e-5, rel=1e-12)
    assert lr_at(10, long_run) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(20, long_run) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(30, long_run) == pytest.approx(3e-5, rel=1e-12)


def test_lr_schedule_closed_form():
    cfg = TrainConfig()
    for e in range(cfg.epochs):
        if e < cfg.warmup_epochs:
            expected = cfg.base_lr / 10 + (cfg.base_lr - cfg.base_lr / 10) * e / cfg.warmup_epochs
        elif e < cfg.decay_epoch:
            expected = cfg.base_lr
        else:
            expected = cfg.base_lr * cfg.decay_factor
        assert lr_at(e, cfg) == pytest.approx(expected, rel=1e-12)


def test_weight_decay_exemptions():
    assert decays("vision.patch_proj.weight")
    assert not decays("vision.patch_proj.bias")
    assert not decays("sgi.norm.gamma")
    assert not decays("camera_table")
    assert not decays("reid_token")


def test_optimizer_holds_no_frozen_state(data):
    cfg = tiny_config()
    model = build_model(cfg, data)
    opt = AdamW(model.named_parameters(), cfg.weight_decay)
    train_step(model, opt, *_batch(data, cfg), lr=1e-3)
    keys = opt.state_tensors()
    assert not any(".decoder." in k or k.startswith("optim.m.decoder") for k in keys)
    frozen = {n for n, p in model.named_parameters() if p.frozen}
    assert frozen and frozen.isdisjoint({n for n, _ in opt.params})


def test_freeze_contract(data):
    cfg = tiny_config()
    model = build_model(cfg, data)
    opt = AdamW(model.trainable_parameters(), cfg.weight_decay)
    dec_before = decoder_checksum(model)
    vis_before = parameter_checksum(model.vision.named_parameters())
    train_step(model, opt, *_batch(data, cfg, 0), lr=1e-3)
    assert parameter_checksum(model.vision.named_parameters()) != vis_before
    for step in range(1, 10):
        train_step(model, opt, *_batch(data, cfg, step), lr=1e-3)
    assert decoder_checksum(model) == dec_before


def test_stop_gradient_zeroes_decoder_path(data):
    batch = _batch(data, tiny_config())
    full = build_model(tiny_config(), data)
    assert np.abs(decoder_path_gradient(full, *batch)).sum() > 0
    stopped = build_model(tiny_config(stop_gradient=True), data)
    g = decoder_path_gradient(stopped, *batch)
    assert np.all(g == 0)
    # the visual encoder still learns through SGI
    opt = AdamW(stopped.trainable_parameters(), 0.0)
    before = parameter_checksum(stopped.vision.named_parameters())
    train_step(stopped, opt, *batch, lr=1e-3)
    assert parameter_checksum(stopped.vision.named_parameters()) != before


def test_learnable_token_replaces_v_reid(data):
    model = build_model(tiny_config(pstg_mode="learnable_token"), data)
    images, cams, _, _ = _batch(data, tiny_config())
    rep = model.represent(images, cams)
    assert rep.token_id is None
    assert np.array_equal(rep.v_reid.data, np.broadcast_to(model.reid_token.data, rep.v_reid.shape))
    assert "reid_token" in dict(model.trainable_parameters())


def test_css_late_variant_adds_camera_row(data):
    model = build_model(tiny_config(css_mode="late"), data)
    images, cams, _, _ = _batch(data, tiny_config())
    rep = model.represent(images, cams)
    assert np.allclose(rep.v_bar.data, rep.v_reid.data + model.camera_table.data[cams], atol=0)


def test_training_is_deterministic(data, tmp_path):
    cfg = tiny_config()
    a = train(cfg, data=data, out_dir=tmp_path / "a", log=lambda s: None)
    b = train(cfg, data=data, out_dir=tmp_path / "b", log=lambda s: None)
    assert (tmp_path / "a/model.rckp").read_bytes() == (tmp_path / "b/model.rckp").read_bytes()
    assert a.report.to_text() == b.report.to_text()


def test_training_logs_losses_and_lr(data):
    lines = []
    train(tiny_config(), data=data, log=lines.append)
    epochs = [ln for ln in lines if ln.startswith("epoch=")]
    assert len(epochs) == 2
    assert all("L_id=" in ln and "L_tri=" in ln and "lr=" in ln for ln in epochs)


def test_checkpoint_resume_is_bitwise(data, tmp_path):
    cfg = tiny_config(epochs=3, decay_epoch=2)
    full = train(cfg, data=data, log=lambda s: None, evaluate_final=False)
    part = train(cfg, data=data, out_dir=tmp_path, until_epoch=2, log=lambda s: None, evaluate_final=False)
    assert part.epoch == 2
    resumed = train(cfg, data=data, resume=tmp_path / "model.rckp", log=lambda s: None, evaluate_final=False)
    a = dict(full.model.named_parameters())
    b = dict(resumed.model.named_parameters())
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name].data, b[name].data), name


def test_checkpoint_contents(data, tmp_path):
    cfg = tiny_config()
    res = train(cfg, data=data, out_dir=tmp_path, log=lambda s: None)
    tensors, meta = checkpoint.load(res.checkpoint_path)
    assert meta["model.dim"] == "16" and meta["meta.epoch"] == "2"
    assert "optim.t" in tensors and any(k.startswith("model.decoder.") for k in tensors)
    loaded = load_checkpoint(res.checkpoint_path)
    assert loaded.epoch == 2 and loaded.model.cfg == cfg


def test_checkpoint_codec_errors(tmp_path):
    blob = checkpoint.encode({"a": np.arange(3.0)}, {"k": "v"})
    tensors, meta = checkpoint.decode(blob)
    assert tensors["a"].tolist() == [0.0, 1.0, 2.0] and meta == {"k": "v"}
    with pytest.raises(FormatError, match="offset 0"):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint.decode(blob[:30])
    with pytest.raises(FormatError):
        checkpoint.decode(blob[:8] + (9).to_bytes(4, "little") + blob[12:])
    checkpoint.save(tmp_path / "x.rckp", {"a": np.ones(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["x.rckp"]


def test_non_finite_loss_reports_step(data, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(train_mod, "train_step", boom)
    with pytest.raises(NumericError, match="epoch=0 step=0"):
        train(tiny_config(), data=data, log=lambda s: None)


def test_ablation_suite_rows_and_partial_failure(tiny_data, monkeypatch):
    real_train = train_mod.train

    def flaky(cfg, *args, **kwargs):
        if cfg.sgi_variant == "query_only":
            raise NumericError("simulated divergence")
        return real_train(cfg, *args, **kwargs)

    monkeypatch.setattr(train_mod, "train", flaky)
    rows = run_ablation_suite(tiny_config(epochs=2), read_index(tiny_data), [0], log=lambda s: None)
    assert [r.variant for r in rows] == ["full", "no_pstg", "no_sgi", "stop_grad", "css_off", "css_late",
                                         "query_only"]
    assert rows[-1].status.startswith("error") and rows[-1].mAP is None
    assert all(r.status == "ok" and 0 <= r.mAP <= 1 for r in rows[:-1])
    csv_text, table = format_ablation(rows)
    assert csv_text.splitlines()[0] == "variant,seed,mAP,Rank-1,status"
    assert len(csv_text.splitlines()) == 8 and "error" in table
