import hashlib
import logging

import numpy as np
import pytest
from PIL import Image

from wdsc.data import IngestReport, StereoPair, ingest_kitti, preprocess, split_indices, synth_pairs
from wdsc.model import WynerModel, save_checkpoint
from wdsc.tensor import Tensor
from wdsc.training import AMSGrad, PlateauSchedule, TrainConfig, evaluate_loss, lr_schedule, train, write_log


# ---------------------------------------------------------------------------
# optimizer


def test_amsgrad_first_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AMSGrad([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)


def test_amsgrad_zero_grad_no_move():
    p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    opt = AMSGrad([p], lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_amsgrad_vmax_monotone():
    rng = np.random.default_rng(0)
    p = Tensor(np.zeros(5), requires_grad=True)
    opt = AMSGrad([p], lr=0.01)
    prev = np.zeros(5)
    for _ in range(50):
        p.grad = rng.normal(scale=rng.uniform(0.01, 3), size=5)
        opt.step()
        assert np.all(opt.v_max[0] >= prev)
        prev = opt.v_max[0].copy()


def test_amsgrad_nan_gradient_aborts():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="non-finite"):
        AMSGrad([p]).step()


# ---------------------------------------------------------------------------
# schedule


def test_lr_unchanged_when_decreasing():
    assert lr_schedule([10.0 - i for i in range(20)], 1e-4) == 1e-4


def test_lr_drops_after_plateau():
    assert lr_schedule([5.0] * 6, 1e-4, patience=5) == pytest.approx(1e-5)
    assert lr_schedule([5.0] * 5, 1e-4, patience=5) == 1e-4


def test_lr_floor():
    assert lr_schedule([1.0] * 100, 1e-7) == 1e-7
    assert lr_schedule([1.0] * 100, 1e-4) == 1e-7


def test_lr_relative_threshold():
    # improvements below 1e-4 relative count as stagnation
    hist = [1.0] + [1.0 - 1e-6 * k for k in range(1, 7)]
    assert lr_schedule(hist, 1e-4) == pytest.approx(1e-5)
    s = PlateauSchedule(1e-4)
    for v in (1.0, 0.99, 0.98, 0.97, 0.96, 0.95):
        s.update(v)
    assert s.lr == 1e-4


# ---------------------------------------------------------------------------
# config


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(lmbda=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=1e-8, lr_floor=1e-7)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    path = tmp_path / "c.json"
    path.write_text('{"lambda": 12.5, "n": 4, "max_iters": 3}')
    cfg = TrainConfig.from_json(path)
    assert cfg.lmbda == 12.5 and cfg.n == 4 and cfg.lr == 1e-4 and cfg.lr_floor == 1e-7 and cfg.batch_size == 1
    path.write_text('{"bogus": 1}')
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_json(path)


# ---------------------------------------------------------------------------
# data


def test_synth_pairs_reproducible_and_correlated():
    a = list(synth_pairs(3, 64))
    b = list(synth_pairs(3, 64))
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.left, q.left)
        np.testing.assert_array_equal(p.right, q.right)
    assert a[0].left.shape == (3, 32, 64) and a[0].left.dtype == np.float32
    mad = np.mean([np.abs(p.left - p.right).mean() for p in a])
    assert mad < 0.1
    assert all(p.left.min() >= 0 and p.left.max() <= 1 for p in a)


def test_synth_pairs_identical_without_disparity_or_noise():
    for p in synth_pairs(4, 5, disparity=(0, 0), noise=0):
        np.testing.assert_array_equal(p.left, p.right)


def test_synth_pairs_shape_check():
    with pytest.raises(ValueError):
        next(synth_pairs(0, 1, (3, 30, 64)))


def test_stereo_pair_shape_check():
    with pytest.raises(ValueError):
        StereoPair(np.zeros((3, 16, 16)), np.zeros((3, 16, 32)))


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def test_preprocess_kitti_geometry():
    img = np.random.default_rng(0).uniform(size=(3, 375, 1242)).astype(np.float32)
    out = preprocess(img)
    assert out.shape == (3, 128, 256)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        preprocess(np.zeros((3, 300, 1242), np.float32))


def test_preprocess_center_crop():
    img = np.zeros((3, 375, 1242), np.float32)
    # mark the pixels just outside the 370x740 center window
    img[:, :, :251] = 1.0
    img[:, :, 991:] = 1.0
    out = preprocess(img, target_hw=(370, 740))
    assert not np.any(out)


def test_constant_image_stays_constant(tmp_path):
    color = np.array([200, 17, 90], np.uint8)
    arr = np.broadcast_to(color, (375, 1242, 3)).copy()
    _write(tmp_path / "image_2" / "a.png", arr)
    _write(tmp_path / "image_3" / "a.png", arr)
    pairs = list(ingest_kitti(tmp_path))
    assert len(pairs) == 1 and pairs[0].left.shape == (3, 128, 256)
    np.testing.assert_allclose(pairs[0].left, np.broadcast_to((color / 255.0)[:, None, None], (3, 128, 256)), atol=1e-6)


def test_ingest_pairs_and_warnings(tmp_path, caplog):
    arr = np.zeros((375, 1242, 3), np.uint8)
    _write(tmp_path / "image_2" / "a.png", arr)
    _write(tmp_path / "image_3" / "a.png", arr)
    _write(tmp_path / "image_2" / "b.png", arr)
    report = IngestReport()
    with caplog.at_level(logging.WARNING):
        pairs = list(ingest_kitti(tmp_path, report=report))
    assert [p.name for p in pairs] == ["a"]
    assert report.unpaired == 1 and report.pairs == 1
    assert sum("b" in r.getMessage() for r in caplog.records) == 1


def test_ingest_wrong_size_skipped(tmp_path, caplog):
    _write(tmp_path / "left" / "a.png", np.zeros((100, 200, 3), np.uint8))
    _write(tmp_path / "right" / "a.png", np.zeros((100, 200, 3), np.uint8))
    _write(tmp_path / "left" / "b.png", np.zeros((375, 1242, 3), np.uint8))
    _write(tmp_path / "right" / "b.png", np.zeros((375, 1242, 3), np.uint8))
    report = IngestReport()
    with caplog.at_level(logging.WARNING):
        pairs = list(ingest_kitti(tmp_path, report=report))
    assert [p.name for p in pairs] == ["b"] and report.bad_size == 1


def test_ingest_sorted_order(tmp_path):
    arr = np.zeros((375, 1242, 3), np.uint8)
    for stem in ("000010", "000002", "000001"):
        _write(tmp_path / "colored_0" / f"{stem}.png", arr)
        _write(tmp_path / "colored_1" / f"{stem}.png", arr)
    assert [p.name for p in ingest_kitti(tmp_path)] == ["000001", "000002", "000010"]


def test_ingest_missing_folders(tmp_path):
    with pytest.raises(FileNotFoundError):
        list(ingest_kitti(tmp_path))


def test_split_counts():
    tr, te = split_indices(1576 + 790)
    assert len(tr) == 1576 and len(te) == 790 and tr[-1] + 1 == te[0]
    tr, te = split_indices(100)
    assert len(tr) == 67 and len(te) == 33


# ---------------------------------------------------------------------------
# training loop


def _hash(model) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode() + p.data.tobytes())
    return h.hexdigest()


def test_smoke_training_reduces_loss(tmp_path):
    pairs = list(synth_pairs(0, 24))
    cfg = TrainConfig(n=8, max_iters=2000, lr=1e-3, lmbda=0.05 * 255**2, log_every=100, val_every=500)
    model0 = WynerModel(n=8, seed=cfg.seed)
    before = evaluate_loss(model0, pairs[:8], cfg)
    res = train(cfg, pairs[8:], pairs[:8], log_path=tmp_path / "log.csv", ckpt_path=tmp_path / "ck.npz")
    after = evaluate_loss(res.model, pairs[:8], cfg)
    assert after < before
    assert res.log_rows[-1]["loss"] < res.log_rows[0]["loss"]
    assert all(r["R_x"] >= 0 and r["R_y"] >= 0 for r in res.log_rows)
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "iter,loss,R_x,D_x,R_y,D_y,R_w,lr"
    assert (tmp_path / "ck.npz").exists() and res.model.tables
    assert len(res.val_history) == 4


def test_alpha_zero_never_updates_side_branch():
    cfg = TrainConfig(n=4, max_iters=20, lr=1e-3, alpha=0.0, log_every=10)
    init = {n: p.data.copy() for n, p in WynerModel(n=4).named_parameters()}
    res = train(cfg, list(synth_pairs(1, 4)))
    for name, p in res.model.named_parameters():
        if name.startswith(("g_ay", "g_sy", "density_vy")):
            np.testing.assert_array_equal(p.data, init[name])
        elif name.startswith("g_ax"):
            assert not np.array_equal(p.data, init[name])


def test_training_deterministic(tmp_path):
    cfg = TrainConfig(n=4, max_iters=30, lr=1e-3, log_every=10)
    pairs = list(synth_pairs(2, 6))
    a = train(cfg, pairs, ckpt_path=tmp_path / "a.npz")
    b = train(cfg, pairs, ckpt_path=tmp_path / "b.npz")
    assert _hash(a.model) == _hash(b.model)
    assert a.model.checkpoint_id() == b.model.checkpoint_id()
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_divergence_restores_last_good(monkeypatch):
    cfg = TrainConfig(n=4, max_iters=40, lr=1e-3, log_every=5)
    pairs = list(synth_pairs(3, 4))
    calls = {"n": 0}
    real = AMSGrad.step

    def flaky(self):
        calls["n"] += 1
        if calls["n"] == 13:
            self.params[0].grad[...] = np.nan
        return real(self)

    monkeypatch.setattr(AMSGrad, "step", flaky)
    res = train(cfg, pairs)
    assert res.diverged
    assert all(np.all(np.isfinite(p.data)) for p in res.model.parameters())
    assert res.model.train_info["iters"] == 13


def test_write_log(tmp_path):
    rows = [{"iter": 1, "loss": 2.0, "R_x": 0.1, "D_x": 0.2, "R_y": 0.3, "D_y": 0.4, "R_w": -0.5, "lr": 1e-4, "extra": 1}]
    write_log(rows, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[1] == "1,2.0,0.1,0.2,0.3,0.4,-0.5,0.0001"


def test_train_requires_pairs():
    with pytest.raises(ValueError):
        train(TrainConfig(n=4, max_iters=1), [])


def test_checkpoint_saves_train_info(tmp_path):
    res = train(TrainConfig(n=4, max_iters=2, lmbda=3.0, alpha=0.5, beta=0.25), list(synth_pairs(0, 2)))
    assert res.model.train_info == {"lambda": 3.0, "alpha": 0.5, "beta": 0.25, "iters": 2}
    save_checkpoint(res.model, tmp_path / "x.npz")
