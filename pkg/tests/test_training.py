import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hformer.config import TrainConfig
from hformer.dataset import Sample
from hformer.model import Hformer, HformerConfig
from hformer.numerics import Tensor, backward, cross_entropy, grad_check
from hformer.params import ParamStore
from hformer.training import (SGD, Checkpoint, CheckpointError, TrainingDiverged, augment,
                              batch_indices, decode_checkpoint, encode_checkpoint, four_crops,
                              load_checkpoint, poly_lr, read_metric_log, save_checkpoint, train)


def tiny_cfg(**kw):
    base = dict(height=32, width=32, base_channels=4, stage_multiplier=4, num_classes=4)
    base.update(kw)
    return HformerConfig(**base)


def tiny_data(n=3, size=32, k=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        order = np.minimum(np.arange(size)[None, :] * k // size + rng.integers(0, 2), k - 1)
        order = np.broadcast_to(order, (size, size)).astype(np.uint8)
        phase = rng.uniform(-np.pi, np.pi, size=(size, size)).astype(np.float32)
        out.append(Sample(f"s{i}", phase, order.copy()))
    return out


# -- loss ------------------------------------------------------------------------

def test_uniform_logits_loss_is_log_k():
    loss = cross_entropy(Tensor(np.zeros((1, 34, 2, 2))), np.zeros((1, 2, 2), int))
    assert float(loss.data) == pytest.approx(np.log(34), abs=1e-12)


def test_margin_drives_loss_to_zero():
    labels = np.array([[[0, 2]]])
    prev = np.inf
    for margin in (1.0, 5.0, 20.0, 50.0):
        logits = np.zeros((1, 3, 1, 2))
        logits[0, 0, 0, 0] = logits[0, 2, 0, 1] = margin
        cur = float(cross_entropy(Tensor(logits), labels).data)
        assert cur < prev
        prev = cur
    assert prev < 1e-20


def test_loss_gradcheck():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(1, 2, 2))
    x = Tensor(rng.normal(size=(1, 3, 2, 2)))
    assert grad_check(lambda v: cross_entropy(v, labels), x) < 1e-5


def test_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))


# -- schedule --------------------------------------------------------------------

def test_poly_lr_values():
    cfg = TrainConfig(max_iters=1000)
    assert poly_lr(0, cfg) == 0.0005
    assert poly_lr(1000, cfg) == 0.0
    assert poly_lr(500, cfg) == pytest.approx(0.0005 * 0.5 ** 0.9, rel=1e-12)
    assert abs(poly_lr(500, cfg) - 2.6795e-4) < 1e-8
    with pytest.raises(ValueError):
        poly_lr(1001, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10_000), st.floats(0.1, 3.0), st.data())
def test_poly_lr_non_increasing(T, power, data):
    cfg = TrainConfig(max_iters=T, poly_power=power)
    a = data.draw(st.integers(0, T))
    b = data.draw(st.integers(a, T))
    assert poly_lr(b, cfg) <= poly_lr(a, cfg)


# -- optimizer -------------------------------------------------------------------

def one_param(value, decay=True):
    store = ParamStore(np.float64)
    store.add("w", np.array(value, dtype=np.float64), decay=decay)
    return store


def test_sgd_plain_step():
    store = one_param([1.0, 2.0])
    store["w"].grad = np.array([0.5, -1.0])
    SGD(store, momentum=0.0, weight_decay=0.0).step(1.0)
    assert store["w"].data.tolist() == [0.5, 3.0]


def test_sgd_momentum_two_steps():
    store = one_param([0.0])
    opt = SGD(store, momentum=0.9, weight_decay=0.0)
    deltas = []
    for _ in range(2):
        before = store["w"].data.copy()
        store["w"].grad = np.array([1.0])
        opt.step(1.0)
        deltas.append(float((before - store["w"].data)[0]))
    assert deltas == [1.0, 1.9]


def test_sgd_weight_decay_and_exemption():
    store = ParamStore(np.float64)
    store.add("w", np.array([2.0, -4.0]))
    store.add("b", np.array([2.0]), decay=False)
    SGD(store, momentum=0.0, weight_decay=0.01).step(1.0)
    assert np.allclose(store["w"].data, [1.98, -3.96], rtol=1e-15)
    assert store["b"].data.tolist() == [2.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5), st.floats(0, 0.99), st.floats(0, 10))
def test_sgd_zero_grad_zero_decay_is_identity(vals, momentum, lr):
    store = one_param(vals)
    store["w"].grad = np.zeros(len(vals))
    SGD(store, momentum=momentum, weight_decay=0.0).step(lr)
    assert store["w"].data.tolist() == vals


def test_sgd_nan_gradient_names_parameter():
    store = ParamStore(np.float64)
    store.add("good", np.zeros(2))
    store.add("stage.bad", np.zeros(2))
    store["good"].grad = np.ones(2)
    store["stage.bad"].grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="stage.bad"):
        SGD(store).step(0.1)
    assert store["good"].data.tolist() == [0.0, 0.0]     # nothing applied


# -- augmentation ----------------------------------------------------------------

def test_augment_disabled_is_identity():
    rng = np.random.default_rng(0)
    p, o = rng.normal(size=(6, 7)), rng.integers(0, 5, (6, 7))
    a, b = augment(p, o, rng, None, hflip=False, vflip=False)
    assert np.array_equal(a, p) and np.array_equal(b, o)


def test_double_flip_is_identity():
    p = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(p[:, ::-1][:, ::-1], p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9), st.integers(2, 9), st.booleans(), st.booleans())
def test_augment_is_paired(seed, h, w, hf, vf):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(h, w))
    o = rng.integers(0, 34, (h, w))
    ch, cw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    # labels as a function of input values survive the transform
    lookup = dict(zip(p.ravel().tolist(), o.ravel().tolist()))
    a, b = augment(p, o, np.random.default_rng(seed + 1), (ch, cw), hf, vf)
    assert a.shape == b.shape == (ch, cw)
    assert all(lookup[v] == lab for v, lab in zip(a.ravel().tolist(), b.ravel().tolist()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_preserves_label_multiset_of_crop(seed):
    rng = np.random.default_rng(seed)
    p, o = rng.normal(size=(8, 8)), rng.integers(0, 6, (8, 8))
    a, b = augment(p, o, np.random.default_rng(seed), None, True, True)
    assert sorted(b.ravel().tolist()) == sorted(o.ravel().tolist())


def test_crop_too_large():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 4)), np.zeros((4, 4)), np.random.default_rng(0), (5, 4))


def test_four_crops():
    p = np.arange(48.0).reshape(6, 8)
    crops = four_crops(p, p.astype(int), (4, 5))
    assert len(crops) == 4
    assert np.array_equal(crops[0][0], p[:4, :5]) and np.array_equal(crops[3][0], p[2:, 3:])
    cover = np.zeros((6, 8), int)
    for r in (0, 2):
        for c in (0, 3):
            cover[r:r + 4, c:c + 5] += 1
    assert cover.min() >= 1


def test_batch_indices_cover_each_epoch():
    seen = [i for t in range(5) for i in batch_indices(t, 2, 10, seed=3)]
    assert sorted(seen) == list(range(10))
    assert batch_indices(7, 2, 10, 3) == batch_indices(7, 2, 10, 3)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bytes(tmp_path):
    model = Hformer(tiny_cfg(), seed=4)
    opt = SGD(model.params)
    for v in opt.buffers.values():
        v[...] = np.random.default_rng(0).normal(size=v.shape)
    ck = Checkpoint.capture(model, opt, 17, seed=5)
    a = save_checkpoint(tmp_path / "a.hfck", ck)
    back = load_checkpoint(a, expect=tiny_cfg())
    b = save_checkpoint(tmp_path / "b.hfck", back)
    assert a.read_bytes() == b.read_bytes()
    assert back.iteration == 17 and back.rng_state["seed"] == 5
    for name, arr in ck.params.items():
        assert back.params[name].tobytes() == arr.tobytes()


def test_checkpoint_header_layout():
    model = Hformer(tiny_cfg())
    blob = encode_checkpoint(Checkpoint.capture(model, None, 3, 0))
    assert blob[:4] == b"HFCK"
    version, n_text = struct.unpack("<II", blob[4:12])
    assert version == 1
    text = blob[12:12 + n_text].decode()
    assert "model.base_channels = 4" in text
    (count,) = struct.unpack("<I", blob[12 + n_text:16 + n_text])
    assert count == len(model.params)


def test_checkpoint_rejections():
    blob = encode_checkpoint(Checkpoint.capture(Hformer(tiny_cfg()), None, 0, 0))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob, expect=tiny_cfg(num_classes=5))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + blob[4:])
    ck = decode_checkpoint(blob)
    other = Hformer(tiny_cfg(head_mode="single"))
    with pytest.raises((KeyError, ValueError)):
        other.params.load_state(ck.params)


# -- training loop ---------------------------------------------------------------

def fast_cfg(**kw):
    base = dict(max_iters=6, batch_size=2, initial_lr=0.01, checkpoint_interval=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_checkpoint_is_initialization(tmp_path):
    model = Hformer(tiny_cfg(), seed=2)
    init = model.params.state()
    res = train(model, fast_cfg(max_iters=0), tiny_data(), run_dir=tmp_path)
    ck = load_checkpoint(res.checkpoints[0])
    assert ck.iteration == 0
    assert all(ck.params[k].tobytes() == v.tobytes() for k, v in init.items())


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(Hformer(tiny_cfg()), fast_cfg(), [])


def test_same_seed_same_logs_and_checkpoints(tmp_path):
    data = tiny_data()
    runs = []
    for name in ("a", "b"):
        train(Hformer(tiny_cfg(), seed=0), fast_cfg(), data, data[:1], tmp_path / name)
        runs.append(tmp_path / name)
    assert (runs[0] / "metrics.csv").read_bytes() == (runs[1] / "metrics.csv").read_bytes()
    for f in ("ckpt_000003.hfck", "ckpt_000006.hfck"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    rows = read_metric_log(runs[0] / "metrics.csv")
    assert [r["iter"] for r in rows] == list(range(1, 7))
    assert rows[-1]["val_miou"] is not None and rows[0]["val_miou"] is None


def test_resume_reproduces_uninterrupted_run(tmp_path):
    data = tiny_data()
    full = train(Hformer(tiny_cfg(), seed=0), fast_cfg(), data, run_dir=tmp_path / "full")
    half = train(Hformer(tiny_cfg(), seed=0), fast_cfg(), data, run_dir=tmp_path / "split", stop_at=3)
    ck = load_checkpoint(half.checkpoints[-1])
    assert ck.iteration == 3
    rest = train(Hformer(tiny_cfg(), seed=9), fast_cfg(), data, run_dir=tmp_path / "split", resume=ck)
    assert [r["loss"] for r in rest.rows] == [r["loss"] for r in full.rows]
    assert ((tmp_path / "full" / "ckpt_000006.hfck").read_bytes()
            == (tmp_path / "split" / "ckpt_000006.hfck").read_bytes())


def test_divergence_keeps_last_good(tmp_path):
    model = Hformer(tiny_cfg(), seed=0)
    with pytest.raises(TrainingDiverged):
        train(model, fast_cfg(initial_lr=1e30), tiny_data(), run_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "last_good.hfck")
    assert all(np.all(np.isfinite(v)) for v in ck.params.values())


def _ten_losses():
    model = Hformer(tiny_cfg(), seed=0)
    data = tiny_data(n=2)
    x = np.stack([s.phase for s in data])[:, None]
    y = np.stack([s.order for s in data]).astype(np.int64)
    opt = SGD(model.params)
    cfg = TrainConfig(max_iters=10)
    losses = []
    for t in range(10):
        model.params.zero_grad()
        loss = cross_entropy(model(Tensor(x)), y)
        losses.append(float(loss.data))
        backward(loss)
        opt.step(poly_lr(t, cfg))
    return losses


def test_loss_decreases_on_fixed_batch():
    losses = _ten_losses()
    assert max(losses[1:]) < losses[0] and losses[-1] < 0.8 * losses[0]


@pytest.mark.xfail(reason="momentum at the default lr gives three small rises in ten steps", strict=False)
def test_loss_at_most_two_rises():
    losses = _ten_losses()
    assert sum(b >= a for a, b in zip(losses, losses[1:])) <= 2
