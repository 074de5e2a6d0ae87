import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hformer.model import (AbsolutePosition, Backbone, Decoder, Encoder, FpnHead, Hformer,
                           HformerConfig, PatchExpanding, PatchProjection, count_parameters,
                           depth_to_space, nchw_to_nhwc, sinusoidal_table, space_to_depth)
from hformer.numerics import (Tensor, backward, cross_entropy, grad_check, grad_check_params,
                              layer_norm, ops)
from hformer.params import ParamStore


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def tiny(**kw):
    base = dict(height=32, width=32, base_channels=4, stage_multiplier=4, num_classes=4)
    base.update(kw)
    return HformerConfig(**base)


def toy(**kw):
    base = dict(height=64, width=64, base_channels=8, stage_multiplier=4, num_classes=34)
    base.update(kw)
    return HformerConfig(**base)


# -- config ----------------------------------------------------------------------

def test_config_errors():
    with pytest.raises(ValueError):
        HformerConfig(height=48).validate()
    with pytest.raises(ValueError):
        HformerConfig(num_classes=1).validate()
    with pytest.raises(ValueError):
        HformerConfig(head_mode="fpn").validate()
    with pytest.raises(ValueError):
        HformerConfig(patch_sizes=(3, 4, 2, 1)).validate()


def test_stage_patch_clamps_to_stage():
    cfg = tiny()
    assert [cfg.stage_size(i) for i in range(4)] == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert [cfg.stage_patch(i) for i in range(4)] == [4, 4, 2, 1]


# -- backbone --------------------------------------------------------------------

def test_backbone_shape_ladder():
    cfg = toy()
    bb = Backbone(ParamStore(), cfg, np.random.default_rng(0))
    feats = bb(Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    shapes = [tuple(nchw_to_nhwc(f).shape[1:]) for f in feats]
    assert shapes == [(16, 16, 8), (8, 8, 32), (4, 4, 128), (2, 2, 512)]


def test_backbone_zero_input_zero_features():
    bb = Backbone(ParamStore(), toy(), np.random.default_rng(1))
    for f in bb(Tensor(np.zeros((2, 1, 64, 64), np.float32))):
        assert not np.any(f.data)


def test_backbone_rejects_wrong_size():
    bb = Backbone(ParamStore(), toy(), np.random.default_rng(1))
    with pytest.raises(ValueError):
        bb(Tensor(np.zeros((1, 1, 32, 64), np.float32)))


def test_stem_gradcheck():
    rng = np.random.default_rng(2)
    cfg = HformerConfig(height=32, width=32, base_channels=2)
    store = ParamStore(np.float64)
    bb = Backbone(store, cfg, rng)
    for _, p in store.items():
        p.data[...] = rng.normal(0, 0.5, p.shape)
    stem = lambda v: bb.stem2(bb.stem1(v))
    x = rng.normal(size=(1, 1, 8, 8))
    r = rng.normal(size=stem(t64(x)).shape)
    assert grad_check(lambda v: (stem(v) * r).sum(), t64(x)) < 1e-4
    worst, rows = grad_check_params(lambda: (stem(t64(x)) * r).sum(),
                                    {n: p for n, p in store.items() if "stem" in n}, n_samples=1000)
    assert worst < 1e-4 and len(rows) == (18 + 2) + (36 + 2)


# -- position --------------------------------------------------------------------

def test_position_gate_zero_is_identity():
    store = ParamStore(np.float64)
    pos = AbsolutePosition(store, "p", 6, (4, 5))
    pos.gate.data[...] = 0
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6))
    out = pos(t64(x))
    assert out.shape == x.shape
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("c", [4, 5, 8, 32])
def test_position_encoding_injective(c):
    table = sinusoidal_table(16, 16, c).reshape(256, c)
    d = np.abs(table[:, None, :] - table[None, :, :]).max(axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-6


# -- projection / expanding ------------------------------------------------------

def test_space_to_depth_distinct_values():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    out = space_to_depth(t64(x)).data
    assert out.shape == (1, 2, 2, 4)
    assert sorted(out.ravel().tolist()) == list(range(16))
    # top-left 2x2 block lands in one pixel, order (dy, dx)
    assert out[0, 0, 0].tolist() == [0, 1, 4, 5]


def test_patch_projection_identity_linear_is_normalized_rearrangement():
    rng = np.random.default_rng(3)
    proj = PatchProjection(ParamStore(np.float64), "p", 2, 4, rng)   # m = 4: square 8 -> 8
    proj.linear.identity_()
    x = rng.normal(size=(1, 4, 6, 2))
    s2d = space_to_depth(t64(x))
    expected = layer_norm(s2d, t64(np.ones(8)), t64(np.zeros(8))).data
    assert np.array_equal(proj(t64(x)).data, expected)


def test_patch_projection_odd_extent():
    proj = PatchProjection(ParamStore(np.float64), "p", 2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        proj(t64(np.zeros((1, 3, 4, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]),
       st.sampled_from([1, 2, 4]))
def test_projection_and_expanding_shape_laws(n, h, w, c, m):
    rng = np.random.default_rng(0)
    store = ParamStore(np.float64)
    x = t64(np.ones((n, 2 * h, 2 * w, c)))
    assert PatchProjection(store, "p", c, m, rng)(x).shape == (n, h, w, m * c)
    e = PatchExpanding(store, "e", m * c, m, rng)
    assert e(t64(np.ones((n, h, w, m * c)))).shape == (n, 2 * h, 2 * w, c)


def test_expanding_identity_inverts_rearrangement():
    rng = np.random.default_rng(4)
    e = PatchExpanding(ParamStore(np.float64), "e", 8, 4, rng)   # 8 -> 8, square
    e.linear.identity_()
    x = rng.normal(size=(2, 6, 4, 2))
    assert np.array_equal(e(space_to_depth(t64(x))).data, x)
    y = rng.normal(size=(2, 3, 2, 8))
    assert np.array_equal(space_to_depth(depth_to_space(t64(y))).data, y)


def test_expanding_divisibility():
    with pytest.raises(ValueError):
        PatchExpanding(ParamStore(), "e", 6, 4, np.random.default_rng(0))


def test_expanding_gradcheck():
    rng = np.random.default_rng(5)
    store = ParamStore(np.float64)
    e = PatchExpanding(store, "e", 8, 4, rng)
    e.linear.weight.data[...] = rng.normal(size=(8, 8))
    x = rng.normal(size=(1, 2, 2, 8))
    r = rng.normal(size=(1, 4, 4, 2))
    assert grad_check(lambda v: (e(v) * r).sum(), t64(x)) < 1e-4
    worst, _ = grad_check_params(lambda: (e(t64(x)) * r).sum(), dict(store.items()), n_samples=1000)
    assert worst < 1e-4


# -- encoder / decoder -----------------------------------------------------------

def _features(cfg, rng, n=1):
    return [t64(rng.normal(size=(n, c, h, w)))
            for c, (h, w) in zip(cfg.stage_channels(), (cfg.stage_size(i) for i in range(4)))]


def test_encoder_decoder_ladders():
    cfg = tiny()
    rng = np.random.default_rng(6)
    store = ParamStore(np.float64)
    enc, dec = Encoder(store, cfg, rng), Decoder(store, cfg, rng)
    e = enc(_features(cfg, rng))
    d = dec(e)
    ladder = [(h, w, c) for (h, w), c in zip((cfg.stage_size(i) for i in range(4)), cfg.stage_channels())]
    assert [tuple(t.shape[1:]) for t in e] == ladder
    assert [tuple(t.shape[1:]) for t in d] == ladder[::-1]


def test_encoder_with_fusion_zeroed_ignores_coarse_backbone():
    cfg = tiny()
    rng = np.random.default_rng(7)
    store = ParamStore(np.float64)
    enc = Encoder(store, cfg, rng)
    for lin in enc.fuse[1:]:
        lin.zero_()
    feats = _features(cfg, rng)
    out = enc(feats)

    # the pure projection/CAT pipeline driven by stage-1 features alone
    x = enc.positions[0](nchw_to_nhwc(feats[0]))
    ref = []
    for i in range(4):
        if i:
            x = enc.projections[i - 1](x)
        for block in enc.blocks[i]:
            x = block(x)
        ref.append(x.data)
    for a, b in zip(out, ref):
        assert np.array_equal(a.data, b)

    other = [feats[0]] + _features(cfg, np.random.default_rng(99))[1:]
    for a, b in zip(enc(other), out):
        assert np.array_equal(a.data, b.data)


def test_decoder_zero_skips_ignores_encoder_stages_1_to_3():
    cfg = tiny()
    rng = np.random.default_rng(8)
    store = ParamStore(np.float64)
    enc, dec = Encoder(store, cfg, rng), Decoder(store, cfg, rng)
    dec.zero_skips()
    e = enc(_features(cfg, rng))
    e2 = [t64(rng.normal(size=t.shape)) for t in e[:3]] + [e[3]]
    for a, b in zip(dec(e), dec(e2)):
        assert np.array_equal(a.data, b.data)


def test_gradient_reaches_every_encoder_stage():
    cfg = tiny()
    rng = np.random.default_rng(9)
    store = ParamStore(np.float64)
    enc, dec = Encoder(store, cfg, rng), Decoder(store, cfg, rng)
    e = [t64(rng.normal(size=t.shape), grad=True) for t in enc(_features(cfg, rng))]
    loss = ops.sum(ops.mul(dec(e)[-1], dec(e)[-1]))
    backward(loss)
    for t in e:
        assert t.grad is not None and np.any(t.grad)


# -- head ------------------------------------------------------------------------

def test_fpn_head_shapes():
    cfg = toy()
    rng = np.random.default_rng(10)
    head = FpnHead(ParamStore(), cfg, rng)
    assert head.conv.weight.shape == (34, 8 + 32 + 128 + 512, 3, 3)
    dec = [Tensor(np.zeros((1, h, w, c), np.float32))
           for (h, w), c in zip((cfg.stage_size(3 - j) for j in range(4)), cfg.stage_channels()[::-1])]
    assert head(dec).shape == (1, 34, 64, 64)
    single = FpnHead(ParamStore(), toy(head_mode="single"), rng)
    assert single.conv.weight.shape[1] == 8
    assert single(dec).shape == (1, 34, 64, 64)


def test_fpn_head_constant_maps_give_constant_logits():
    cfg = tiny()
    rng = np.random.default_rng(11)
    store = ParamStore(np.float64)
    head = FpnHead(store, cfg, rng)
    head.conv.bias.data[...] = rng.normal(size=4)
    dec = [t64(np.broadcast_to(rng.normal(size=c), (1, h, w, c)))
           for (h, w), c in zip((cfg.stage_size(3 - j) for j in range(4)), cfg.stage_channels()[::-1])]
    logits = head(dec).data
    assert np.allclose(logits, logits[:, :, :1, :1], rtol=0, atol=1e-12)


# -- full model ------------------------------------------------------------------

@settings(max_examples=6, deadline=None)
@given(st.sampled_from([32, 64]), st.sampled_from([32, 64]), st.sampled_from([2, 4]),
       st.sampled_from([2, 4]), st.integers(2, 6), st.sampled_from(["ifpn", "single"]))
def test_forward_shape_law(h, w, c, m, k, mode):
    cfg = HformerConfig(height=h, width=w, base_channels=c, stage_multiplier=m, num_classes=k,
                        head_mode=mode, patch_size=2)
    model = Hformer(cfg)
    assert model(np.zeros((2, 1, h, w), np.float32)).shape == (2, k, h, w)
    assert model.params.num_elements() == count_parameters(cfg)


@pytest.mark.parametrize("kw", [dict(), dict(position="none"), dict(position_all_stages=False),
                                dict(blocks_per_stage=2, mlp_layers=3, num_heads=2),
                                dict(head_mode="single", stage_multiplier=2)])
def test_parameter_count_closed_form(kw):
    cfg = tiny(**kw)
    assert Hformer(cfg).params.num_elements() == count_parameters(cfg)


def test_forward_deterministic():
    model = Hformer(tiny(), seed=3)
    x = np.random.default_rng(0).uniform(-np.pi, np.pi, size=(2, 1, 32, 32)).astype(np.float32)
    assert model.predict_logits(x).tobytes() == model.predict_logits(x).tobytes()
    assert Hformer(tiny(), seed=3).predict_logits(x).tobytes() == model.predict_logits(x).tobytes()


def test_parameter_names_unique_and_ordered():
    a, b = Hformer(tiny()), Hformer(tiny())
    assert a.params.names() == b.params.names()
    assert len(set(a.params.names())) == len(a.params)


def test_no_dead_parameters():
    model = Hformer(tiny(), dtype=np.float64)
    x = np.random.default_rng(12).uniform(-np.pi, np.pi, size=(2, 1, 32, 32))
    r = np.random.default_rng(13).normal(size=(2, 4, 32, 32))
    backward(ops.sum(ops.mul(model(x), r)))
    dead = [n for n, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_zero_branch_pipeline_superposition():
    # with zero-branch CAT blocks the decoder and head are affine in the encoder outputs
    cfg = tiny()
    model = Hformer(cfg, dtype=np.float64)
    model.zero_branches()
    rng = np.random.default_rng(14)
    for lin in model.decoder.merge[1:] + [e.linear for e in model.decoder.expand[1:]]:
        lin.bias.data[...] = rng.normal(size=lin.bias.shape)

    def f(enc):
        return model.head(model.decoder([t64(e) for e in enc])).data

    shapes = [t.shape for t in model.encoder(model.backbone(t64(np.zeros((1, 1, 32, 32)))))]
    a = [rng.normal(size=s) for s in shapes]
    b = [rng.normal(size=s) for s in shapes]
    zero = [np.zeros(s) for s in shapes]
    lhs = f([x + y for x, y in zip(a, b)])
    rhs = f(a) + f(b) - f(zero)
    assert np.abs(lhs - rhs).max() < 1e-4


def test_full_model_gradcheck():
    cfg = tiny()
    model = Hformer(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(15)
    x = rng.uniform(-np.pi, np.pi, size=(1, 1, 32, 32))
    labels = rng.integers(0, 4, size=(1, 32, 32))
    worst, rows = grad_check_params(lambda: cross_entropy(model(x), labels),
                                    dict(model.params.items()), n_samples=50, seed=0)
    assert len(rows) == 50
    assert worst < 1e-4
