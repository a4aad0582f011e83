import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amalgam import nets
from amalgam import tensor as T
from amalgam.errors import ConfigurationError, DimensionError
from gradcheck import check_gradients

WIDTHS = (16, 32, 64, 32, 16, 8)

# hand-frozen parameter counts for the default 6-block layout, 2 convs each:
# block n params = sum over convs of (out*in*9 + out)
BLOCK_COUNTS = [2768, 13888, 55424, 27712, 6944, 1744]
HEAD_COUNTS = {"seg": 365, "depth": 1168, "normal": 219}


def seg_spec():
    return nets.NetworkSpec(widths=WIDTHS, head=nets.SegHead(5)).validate()


def depth_spec():
    return nets.NetworkSpec(widths=WIDTHS, head=nets.DepthHead(16, 0.625)).validate()


def tiny_spec(head=None):
    return nets.NetworkSpec(widths=(4, 4), head=head or nets.SegHead(3)).validate()


def image(b=1, hw=64, seed=0):
    return T.constant(np.random.default_rng(seed).uniform(0, 1, (b, 3, hw, hw)))


# ---------------------------------------------------------------------------
# spec validation

def test_default_spec_passes_validation():
    seg_spec()
    depth_spec()


def test_odd_block_count_rejected():
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec(widths=(16, 32, 16), head=nets.SegHead(5)).validate()


def test_broken_width_mirror_rejected():
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec(widths=(16, 32, 64, 32, 8, 8), head=nets.SegHead(5)).validate()


def test_decoder_width_symmetry_holds_for_default():
    spec = seg_spec()
    n = spec.n_blocks
    for k in range(n // 2 + 1, n + 1):
        assert spec.block_in(k) == spec.widths[n - k]


def test_branch_outside_decoder_second_position_rejected():
    head = nets.MultiHead((nets.Branch("seg", 3, nets.SegHead(5)),))
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec(widths=WIDTHS, head=head).validate()


def test_feature_resolutions_for_default():
    spec = seg_spec()
    assert [spec.feature_hw(n, 64, 64)[0] for n in range(1, 7)] == [32, 16, 8, 16, 32, 64]


# ---------------------------------------------------------------------------
# parameter layout and counting

def test_block_param_counts_match_frozen_oracle():
    spec = nets.NetworkSpec(widths=WIDTHS, head=None)
    sizes = {}
    for key, shape in nets.param_specs(spec):
        n = int(key.split(".")[0][len("block"):])
        sizes[n] = sizes.get(n, 0) + int(np.prod(shape))
    assert [sizes[n] for n in range(1, 7)] == BLOCK_COUNTS


@pytest.mark.parametrize("task,head", [
    ("seg", nets.SegHead(5)), ("depth", nets.DepthHead(16, 0.625)), ("normal", nets.NormalHead())])
def test_head_param_counts(task, head):
    spec = nets.NetworkSpec(widths=WIDTHS, head=head)
    total = sum(int(np.prod(shape)) for key, shape in nets.param_specs(spec)
                if key.startswith("head."))
    assert total == HEAD_COUNTS[task]


def test_single_conv_param_formula():
    spec = nets.NetworkSpec(widths=(4, 4), convs_per_block=2, in_channels=2, head=None)
    first = dict(nets.param_specs(spec))
    w, b = first["block1.conv1.w"], first["block1.conv1.b"]
    assert int(np.prod(w)) + int(np.prod(b)) == 2 * 4 * 9 + 4 == 76


def test_coding_param_count_formula():
    assert nets.coding_param_count(8) == 42
    assert nets.coding_param_count(16) == 148
    assert nets.coding_param_count(32) == 552
    assert nets.coding_param_count(64) == 2128
    coding = nets.init_coding(8, seed=0, trainable=False)
    assert coding.param_count() == 42


def test_count_params_totals():
    total = sum(BLOCK_COUNTS)
    assert total == 108480
    for spec, head_n in [(seg_spec(), 365), (depth_spec(), 1168)]:
        state = nets.init_state(spec, seed=0)
        assert nets.count_params(spec, state) == total + head_n


def test_count_params_empty_spec_is_zero():
    spec = nets.NetworkSpec(widths=(), head=None)
    assert nets.count_params(spec, nets.ModelState({})) == 0


def test_count_params_rejects_mismatched_state():
    spec = seg_spec()
    state = nets.init_state(spec, seed=0)
    del state.params["head.w"]
    with pytest.raises(ConfigurationError):
        nets.count_params(spec, state)


def test_init_is_deterministic_and_per_key():
    a = nets.init_state(seg_spec(), seed=7)
    b = nets.init_state(seg_spec(), seed=7)
    assert a.sha256() == b.sha256()
    # same key, same seed -> same draw even under a different head
    c = nets.init_state(depth_spec(), seed=7)
    np.testing.assert_array_equal(a.params["block3.conv2.w"].data,
                                  c.params["block3.conv2.w"].data)
    assert a.sha256() != nets.init_state(seg_spec(), seed=8).sha256()


def test_bias_init_is_zero_weights_are_bounded():
    state = nets.init_state(seg_spec(), seed=3)
    for key, t in state.params.items():
        if key.endswith(".b"):
            assert not t.data.any()
        else:
            fan_in = int(np.prod(t.shape[1:]))
            assert np.abs(t.data).max() <= np.sqrt(6.0 / fan_in)


# ---------------------------------------------------------------------------
# forward / capture / injection

def test_forward_shapes_and_capture():
    spec = seg_spec()
    state = nets.init_state(spec, seed=0, trainable=False)
    pred, feats = nets.forward(spec, state, image())
    assert pred.shape == (1, 5, 64, 64)
    assert [f.shape for f in feats] == [
        (1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8),
        (1, 32, 16, 16), (1, 16, 32, 32), (1, 8, 64, 64)]


def test_forward_twice_is_bit_identical():
    spec = depth_spec()
    state = nets.init_state(spec, seed=1, trainable=False)
    p1, _ = nets.forward(spec, state, image(seed=5))
    p2, _ = nets.forward(spec, state, image(seed=5))
    assert p1.data.tobytes() == p2.data.tobytes()


def test_captured_final_feature_feeds_the_head():
    spec = seg_spec()
    state = nets.init_state(spec, seed=2, trainable=False)
    pred, feats = nets.forward(spec, state, image(seed=6))
    redo = T.conv2d(feats[-1], state.require("head.w"), state.require("head.b"),
                    stride=1, pad=1)
    assert pred.data.tobytes() == redo.data.tobytes()


def test_identity_graft_every_block():
    spec = depth_spec()
    state = nets.init_state(spec, seed=4, trainable=False)
    pred, feats = nets.forward(spec, state, image(seed=7))
    for n in range(1, spec.n_blocks + 1):
        re = nets.forward_from(spec, state, n, T.constant(feats[n - 1].data))
        assert re.data.tobytes() == pred.data.tobytes(), f"graft at block {n} diverged"


def test_forward_from_zero_features_matches_forced_zero_block():
    spec = seg_spec()
    state = nets.init_state(spec, seed=5, trainable=False)
    zero = T.constant(np.zeros((1, 32, 16, 16)))
    pred = nets.forward_from(spec, state, 4, zero)
    x = zero
    for n in (5, 6):
        x = nets._run_block(spec, state, "", n, x)
    manual = nets._run_head(state, "", x)
    assert pred.data.tobytes() == manual.data.tobytes()


def test_forward_from_rejects_wrong_channels():
    spec = seg_spec()
    state = nets.init_state(spec, seed=0, trainable=False)
    with pytest.raises(DimensionError, match="block 4"):
        nets.forward_from(spec, state, 4, T.constant(np.zeros((1, 16, 16, 16))))


def test_forward_rejects_indivisible_input():
    spec = seg_spec()
    state = nets.init_state(spec, seed=0, trainable=False)
    with pytest.raises(DimensionError):
        nets.forward(spec, state, T.constant(np.zeros((1, 3, 60, 60))))


def test_forward_from_gradient_matches_fd():
    spec = tiny_spec()
    state = nets.init_state(spec, seed=6, trainable=False)

    def build(injected):
        pred = nets.forward_from(spec, state, 1, injected)
        return T.sum_all(T.mul(pred, pred))

    feat = np.random.default_rng(8).uniform(-1, 1, (1, 4, 4, 4))
    assert check_gradients(build, [feat]) < 1e-5


# ---------------------------------------------------------------------------
# channel coding

def test_coding_zero_input_stays_zero():
    coding = nets.init_coding(8, seed=0, trainable=False)
    out = nets.channel_code(coding, T.constant(np.zeros((2, 8, 4, 4))))
    assert not out.data.any()


def test_coding_zero_weights_halve_features():
    c = 8
    coding = nets.ChannelCoding(
        T.constant(np.zeros((2, c, 1, 1))), T.constant(np.zeros((1, 2, 1, 1))),
        T.constant(np.zeros((c, 2, 1, 1))), T.constant(np.zeros((1, c, 1, 1))))
    f = np.random.default_rng(1).uniform(-1, 1, (1, c, 4, 4))
    out = nets.channel_code(coding, T.constant(f))
    np.testing.assert_array_equal(out.data, 0.5 * f)


def test_coding_matches_straight_line_oracle():
    coding = nets.init_coding(16, seed=9, trainable=False)
    f = np.random.default_rng(2).uniform(-2, 2, (3, 16, 8, 8))
    out = nets.channel_code(coding, T.constant(f))

    z = f.mean(axis=(2, 3))  # (B, C)
    w1 = coding.w1.data[..., 0, 0]
    w2 = coding.w2.data[..., 0, 0]
    h = np.maximum(z @ w1.T + coding.b1.data.reshape(1, -1), 0.0)
    s = 1.0 / (1.0 + np.exp(-(h @ w2.T + coding.b2.data.reshape(1, -1))))
    np.testing.assert_allclose(out.data, f * s[:, :, None, None], rtol=0, atol=1e-12)


def test_coding_preserves_shape_and_scales_in_unit_interval():
    coding = nets.init_coding(32, seed=3, trainable=False)
    f = np.abs(np.random.default_rng(3).uniform(0.5, 2, (2, 32, 4, 4)))
    out = nets.channel_code(coding, T.constant(f))
    assert out.shape == f.shape
    ratio = out.data / f
    assert (ratio > 0).all() and (ratio < 1).all()


def test_coding_channel_mismatch_rejected():
    coding = nets.init_coding(8, seed=0, trainable=False)
    with pytest.raises(DimensionError):
        nets.channel_code(coding, T.constant(np.zeros((1, 16, 4, 4))))


# ---------------------------------------------------------------------------
# depth decoding and one-hot supervision

def test_depth_decode_equal_logits_hits_middle():
    cfg = nets.DepthHead(bins=3, bin_len=1.0)
    d = nets.depth_decode(T.constant(np.zeros((1, 3, 2, 2))), cfg)
    np.testing.assert_allclose(d.data, 2.0, rtol=0, atol=1e-12)


def test_depth_decode_concentrated_bin():
    cfg = nets.DepthHead(bins=4, bin_len=0.5)
    logits = np.zeros((1, 4, 1, 1))
    logits[0, 1] = 50.0  # bin index 2 in 1-based numbering
    d = nets.depth_decode(T.constant(logits), cfg)
    np.testing.assert_allclose(d.data, 1.0, rtol=0, atol=1e-12)


def test_depth_decode_hand_expectation():
    cfg = nets.DepthHead(bins=3, bin_len=1.0)
    logits = np.log([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
    d = nets.depth_decode(T.constant(logits), cfg)
    np.testing.assert_allclose(d.data.reshape(()), 14.0 / 6.0, rtol=0, atol=1e-12)


def test_depth_decode_range_and_channel_check():
    cfg = nets.DepthHead(bins=16, bin_len=0.625)
    logits = np.random.default_rng(4).uniform(-5, 5, (2, 16, 4, 4))
    d = nets.depth_decode(T.constant(logits), cfg)
    assert (d.data > 0).all() and (d.data < 16 * 0.625).all()
    with pytest.raises(DimensionError):
        nets.depth_decode(T.constant(np.zeros((1, 8, 4, 4))), cfg)


def test_one_hot_supervision_argmax_and_ties():
    probs = np.array([0.1, 0.7, 0.2]).reshape(1, 3, 1, 1)
    assert nets.one_hot_supervision(probs)[0, 0, 0] == 1
    uniform = np.full((1, 4, 2, 2), 0.25)
    assert (nets.one_hot_supervision(uniform) == 0).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=3, max_size=3),
       st.floats(min_value=0.1, max_value=5.0))
def test_one_hot_invariant_to_monotone_rescale(probs, scale):
    p = np.array(probs).reshape(1, 3, 1, 1)
    a = nets.one_hot_supervision(p)
    b = nets.one_hot_supervision(p * scale)
    assert (a == b).all()


# ---------------------------------------------------------------------------
# multi-head assembly topology

def multi_spec():
    head = nets.MultiHead((
        nets.Branch("seg", 5, nets.SegHead(5)),
        nets.Branch("depth", 4, nets.DepthHead(16, 0.625))))
    return nets.NetworkSpec(widths=WIDTHS, head=head).validate()


def test_multi_head_param_total():
    spec = multi_spec()
    state = nets.init_state(spec, seed=0)
    trunk = sum(BLOCK_COUNTS[:5])
    seg_branch = nets.coding_param_count(16) + BLOCK_COUNTS[5] + HEAD_COUNTS["seg"]
    depth_branch = (nets.coding_param_count(32) + BLOCK_COUNTS[4] + BLOCK_COUNTS[5]
                    + HEAD_COUNTS["depth"])
    assert nets.count_params(spec, state) == trunk + seg_branch + depth_branch


def test_multi_head_forward_shapes():
    spec = multi_spec()
    state = nets.init_state(spec, seed=1, trainable=False)
    preds, feats = nets.forward(spec, state, image(b=2))
    assert set(preds) == {"seg", "depth"}
    assert preds["seg"].shape == (2, 5, 64, 64)
    assert preds["depth"].shape == (2, 16, 64, 64)
    assert len(feats) == 5  # trunk stops at the last branch entry


def test_multi_head_graft_into_trunk_is_identity():
    spec = multi_spec()
    state = nets.init_state(spec, seed=2, trainable=False)
    preds, feats = nets.forward(spec, state, image(seed=9))
    redo = nets.forward_from(spec, state, 3, T.constant(feats[2].data))
    for task in preds:
        assert redo[task].data.tobytes() == preds[task].data.tobytes()


def test_multi_head_graft_past_branch_runs_private_tail():
    spec = multi_spec()
    state = nets.init_state(spec, seed=3, trainable=False)
    preds, feats = nets.forward(spec, state, image(seed=10))
    redo = nets.forward_from(spec, state, 5, T.constant(feats[4].data))
    # seg branches at 5: recomputed exactly
    assert redo["seg"].data.tobytes() == preds["seg"].data.tobytes()
    # depth branched at 4: injection lands in its private block-6 tail
    y = nets._run_block(spec, state, "depth.", 6, T.constant(feats[4].data))
    manual = nets._run_head(state, "depth.", y)
    assert redo["depth"].data.tobytes() == manual.data.tobytes()
