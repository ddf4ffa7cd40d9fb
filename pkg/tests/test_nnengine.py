import numpy as np
import pytest

from nanoseg.nnengine import (
    Adam,
    BatchNorm2d,
    CheckpointFormatError,
    Conv2d,
    LeakyReLU,
    MaxPool2,
    ReLU,
    Sequential,
    Upsample2,
    concat_channels,
    cross_entropy_loss,
    load_tensors,
    save_tensors,
    softmax_channels,
    split_channels_grad,
)
from _gradcheck import check_layer
from _oracles import conv2d_loop


def rng_of(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# convolution

def test_conv_matches_loop_oracle():
    rng = rng_of(0)
    for n, ci, co, k, h, w in [(1, 1, 1, 3, 4, 5), (2, 3, 4, 1, 3, 3),
                               (2, 2, 3, 5, 6, 4)]:
        conv = Conv2d(ci, co, k, rng)
        x = rng.standard_normal((n, ci, h, w))
        want = conv2d_loop(x, conv.params["w"], conv.params["b"])
        np.testing.assert_allclose(conv.forward(x), want, atol=1e-12)


def test_conv_init_bounds_and_zero_bias():
    conv = Conv2d(3, 16, 5, rng_of(1))
    bound = np.sqrt(6.0 / (3 * 25))
    assert np.abs(conv.params["w"]).max() <= bound
    assert conv.params["w"].std() > bound / 4  # actually spread out
    assert not conv.params["b"].any()


def test_conv_gradients_fd():
    errs = check_layer(Conv2d(2, 3, 3, rng_of(2)), rng_of(3).standard_normal((2, 2, 5, 4)))
    assert max(errs.values()) <= 1e-6, errs


def test_conv_bias_gradient_is_spatial_sum():
    conv = Conv2d(1, 2, 3, rng_of(4))
    g = rng_of(5).standard_normal((2, 2, 4, 4))
    conv.forward(np.zeros((2, 1, 4, 4)))
    conv.backward(g)
    np.testing.assert_allclose(conv.grads["b"], g.sum(axis=(0, 2, 3)), atol=1e-12)


def test_conv_validation():
    with pytest.raises(ValueError, match="odd"):
        Conv2d(1, 1, 4, rng_of(0))
    conv = Conv2d(2, 1, 3, rng_of(0))
    with pytest.raises(ValueError, match="channels"):
        conv.forward(np.zeros((1, 3, 4, 4)))
    with pytest.raises(RuntimeError, match="before forward"):
        Conv2d(1, 1, 3, rng_of(0)).backward(np.zeros((1, 1, 4, 4)))
    conv.forward(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="does not match"):
        conv.backward(np.zeros((1, 1, 5, 5)))


# ---------------------------------------------------------------------------
# batch normalization

def test_batchnorm_normalizes_in_train_mode():
    bn = BatchNorm2d(3)
    x = rng_of(6).standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
    out = bn.forward(x, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    # eps in the denominator shaves the unit variance by about eps/var
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batchnorm_running_stats_seed_then_blend():
    bn = BatchNorm2d(1, momentum=0.1)
    x1 = np.arange(8.0).reshape(2, 1, 2, 2)
    bn.forward(x1, train=True)
    # first pass copies the batch statistics outright
    assert bn.buffers["running_mean"][0] == pytest.approx(x1.mean())
    assert bn.buffers["running_var"][0] == pytest.approx(x1.var())
    x2 = np.full((2, 1, 2, 2), 10.0)
    m1, v1 = x1.mean(), x1.var()
    bn.forward(x2, train=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.9 * m1 + 0.1 * 10.0)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 * v1 + 0.1 * 0.0)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm2d(1, eps=1e-5)
    bn.forward(np.arange(8.0).reshape(2, 1, 2, 2), train=True)
    mean = bn.buffers["running_mean"][0]
    var = bn.buffers["running_var"][0]
    x = np.full((1, 1, 2, 2), 5.0)
    want = (5.0 - mean) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(bn.forward(x, train=False), want)


def test_batchnorm_eval_before_train_raises():
    with pytest.raises(RuntimeError, match="before any training pass"):
        BatchNorm2d(2).forward(np.zeros((1, 2, 4, 4)), train=False)


def test_batchnorm_needs_two_values():
    with pytest.raises(ValueError, match=">= 2"):
        BatchNorm2d(1).forward(np.zeros((1, 1, 1, 1)), train=True)


def test_batchnorm_gradients_fd_train_and_eval():
    x = rng_of(7).standard_normal((3, 2, 4, 4)) * 2.0 + 1.0
    bn = BatchNorm2d(2)
    bn.params["gamma"][:] = [1.3, 0.7]
    bn.params["beta"][:] = [0.2, -0.4]
    assert max(check_layer(bn, x, train=True).values()) <= 1e-4
    bn.forward(x, train=True)  # ensure running stats exist for eval mode
    assert max(check_layer(bn, x, train=False).values()) <= 1e-6


def test_batchnorm_variance_is_biased():
    bn = BatchNorm2d(1)
    x = np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 1, 2, 2)
    bn.forward(x, train=True)
    assert bn.buffers["running_var"][0] == pytest.approx(np.var([0, 1, 2, 3]))


# ---------------------------------------------------------------------------
# activations, pooling, upsampling

def test_relu_values_and_zero_gradient_convention():
    x = np.array([[-1.0, 0.0], [2.0, -0.5]]).reshape(1, 1, 2, 2)
    relu = ReLU()
    np.testing.assert_array_equal(relu.forward(x).ravel(), [0, 0, 2, 0])
    grad = relu.backward(np.ones_like(x)).ravel()
    np.testing.assert_array_equal(grad, [0, 0, 1, 0])  # grad at exactly 0 is 0

    leaky = LeakyReLU(slope=0.1)
    np.testing.assert_allclose(leaky.forward(x).ravel(), [-0.1, 0.0, 2.0, -0.05])
    grad = leaky.backward(np.ones_like(x)).ravel()
    np.testing.assert_allclose(grad, [0.1, 0.1, 1.0, 0.1])  # grad at 0 is slope


def test_activations_propagate_non_finite_values():
    # divergence detection depends on NaN surviving to the loss
    x = np.array([np.nan, np.inf, -np.inf, 1.0]).reshape(1, 1, 1, 4)
    for layer in (ReLU(), LeakyReLU(slope=0.1)):
        out = layer.forward(x).ravel()
        assert np.isnan(out[0])
        assert out[1] == np.inf
        assert out[3] == 1.0


def test_activation_gradients_fd():
    x = rng_of(8).standard_normal((2, 3, 4, 4))
    x += np.sign(x) * 0.05  # keep clear of the kink
    assert check_layer(ReLU(), x)["input"] <= 1e-8
    assert check_layer(LeakyReLU(0.2), x)["input"] <= 1e-8


def test_maxpool_forward_and_tie_break():
    x = np.zeros((1, 1, 2, 4))
    x[0, 0] = [[3.0, 3.0, 1.0, 2.0], [0.0, 1.0, 2.0, 1.0]]
    pool = MaxPool2()
    out = pool.forward(x)
    np.testing.assert_array_equal(out[0, 0], [[3.0, 2.0]])
    grad = pool.backward(np.array([[[[1.0, 1.0]]]]))
    # both windows tie ([3,3,0,1] and [1,2,2,1] flattened): the first tied
    # element in row-major window order receives the whole gradient
    np.testing.assert_array_equal(
        grad[0, 0], [[1.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]])


def test_maxpool_matches_naive_and_fd():
    rng = rng_of(9)
    x = rng.standard_normal((2, 3, 6, 8))
    x += np.arange(x.size).reshape(x.shape) * 1e-3  # all values distinct
    pool = MaxPool2()
    out = pool.forward(x)
    want = x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, want)
    assert check_layer(MaxPool2(), x)["input"] <= 1e-8
    with pytest.raises(ValueError, match="even"):
        pool.forward(np.zeros((1, 1, 3, 4)))


def test_upsample_nearest_and_backward_sum():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    up = Upsample2()
    out = up.forward(x)
    np.testing.assert_array_equal(
        out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    grad = up.backward(np.ones((1, 1, 4, 4)))
    np.testing.assert_array_equal(grad[0, 0], [[4.0, 4.0], [4.0, 4.0]])
    assert check_layer(Upsample2(), rng_of(10).standard_normal((2, 2, 3, 5)))["input"] <= 1e-8


def test_sequential_composes_and_backprops():
    rng = rng_of(11)
    seq = Sequential([Conv2d(1, 2, 3, rng), ReLU(), Conv2d(2, 1, 3, rng)])
    x = rng.standard_normal((1, 1, 6, 6))
    out = seq.forward(x)
    assert out.shape == (1, 1, 6, 6)
    assert check_layer(seq, x)["input"] <= 1e-6
    seq.zero_grads()
    assert not any(g.any() for layer in seq.layers for g in layer.grads.values())


# ---------------------------------------------------------------------------
# channel utilities and softmax

def test_concat_split_roundtrip():
    a = rng_of(12).standard_normal((2, 3, 4, 4))
    b = rng_of(13).standard_normal((2, 2, 4, 4))
    cat = concat_channels(a, b)
    assert cat.shape == (2, 5, 4, 4)
    ga, gb = split_channels_grad(cat, 3)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)
    with pytest.raises(ValueError, match="concat"):
        concat_channels(a, rng_of(0).standard_normal((2, 2, 5, 4)))
    with pytest.raises(ValueError, match="split"):
        split_channels_grad(cat, 5)


def test_softmax_rows_sum_to_one_and_stability():
    x = rng_of(14).standard_normal((2, 4, 3, 3)) * 5
    s = softmax_channels(x)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert (s > 0).all()
    huge = np.zeros((1, 2, 1, 1))
    huge[0, 0] = 1e4
    s = softmax_channels(huge)
    assert np.isfinite(s).all() and s[0, 0, 0, 0] == pytest.approx(1.0)
    with pytest.raises(ValueError, match=">= 2 channels"):
        softmax_channels(np.zeros((1, 1, 2, 2)))


# ---------------------------------------------------------------------------
# loss

def test_cross_entropy_zero_logits_is_ln2():
    logits = np.zeros((2, 2, 3, 3))
    targets = rng_of(15).integers(0, 2, (2, 3, 3))
    loss, grad = cross_entropy_loss(logits, targets)
    assert abs(loss - np.log(2.0)) <= 1e-12
    # gradient is (0.5 - onehot) / count
    count = 2 * 3 * 3
    onehot = targets[:, None] == np.arange(2)[None, :, None, None]
    np.testing.assert_allclose(grad, (0.5 - onehot) / count, atol=1e-12)


def test_cross_entropy_tiny_case_by_hand():
    logits = np.array([2.0, -1.0]).reshape(1, 2, 1, 1)
    targets = np.array([[[1]]])
    loss, grad = cross_entropy_loss(logits, targets)
    z = np.exp(2.0) + np.exp(-1.0)
    assert loss == pytest.approx(-(-1.0) + np.log(z))
    np.testing.assert_allclose(
        grad.ravel(), [np.exp(2.0) / z, np.exp(-1.0) / z - 1.0], atol=1e-12)


def test_cross_entropy_accepts_bool_targets():
    logits = rng_of(16).standard_normal((1, 2, 2, 2))
    mask = np.array([[True, False], [False, True]])[None]
    loss_bool, _ = cross_entropy_loss(logits, mask)
    loss_int, _ = cross_entropy_loss(logits, mask.astype(np.int64))
    assert loss_bool == loss_int


def test_cross_entropy_gradient_fd():
    from _gradcheck import _fd_array

    logits = rng_of(17).standard_normal((2, 3, 2, 2))
    targets = rng_of(18).integers(0, 3, (2, 2, 2))
    _, grad = cross_entropy_loss(logits, targets)
    num = _fd_array(lambda: cross_entropy_loss(logits, targets)[0], logits, 1e-6)
    assert np.abs(grad - num).max() <= 1e-9


def test_cross_entropy_validation():
    with pytest.raises(ValueError, match="target shape"):
        cross_entropy_loss(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3), dtype=int))
    with pytest.raises(ValueError, match=r"classes must lie in"):
        cross_entropy_loss(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2))


def test_cross_entropy_saturated_logits_finite():
    logits = np.zeros((1, 2, 1, 2))
    logits[0, 0, 0, 0] = 1e4
    logits[0, 1, 0, 1] = -1e4
    loss, grad = cross_entropy_loss(logits, np.array([[[0, 0]]]))
    assert np.isfinite(loss) and np.isfinite(grad).all()


# ---------------------------------------------------------------------------
# optimizer

def test_adam_first_step_closed_form():
    # With zero-initialized moments, bias correction makes the first update
    # exactly lr * g / (|g| + eps) regardless of beta values.
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam({"p": p}, lr=0.1)
    g = np.array([0.5, -4.0, 0.0])
    opt.step({"p": g})
    want = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, want, atol=1e-15)


def test_adam_matches_reference_sequence():
    rng = rng_of(19)
    p = rng.standard_normal(7)
    ref = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    opt = Adam({"p": p}, lr=0.05, beta1=0.8, beta2=0.95, eps=1e-8)
    for t in range(1, 6):
        g = rng.standard_normal(7)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        ref -= 0.05 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
        opt.step({"p": g})
        np.testing.assert_allclose(p, ref, atol=1e-14)


def test_adam_updates_in_place_and_validates():
    p = np.ones(3)
    opt = Adam({"p": p}, lr=0.1)
    before = p
    opt.step({"p": np.ones(3)})
    assert p is before
    with pytest.raises(KeyError, match="missing gradients"):
        opt.step({})
    with pytest.raises(ValueError, match="shape"):
        opt.step({"p": np.ones(4)})
    with pytest.raises(ValueError, match="lr"):
        Adam({"p": p}, lr=0.0)
    with pytest.raises(ValueError, match="betas"):
        Adam({"p": p}, lr=0.1, beta1=1.0)


def test_adam_state_names_and_step_count():
    opt = Adam({"w": np.ones(2), "b": np.ones(1)}, lr=0.1)
    opt.step({"w": np.ones(2), "b": np.ones(1)})
    opt.step({"w": np.ones(2), "b": np.ones(1)})
    state = opt.state()
    assert set(state) == {"m.w", "m.b", "v.w", "v.b", "t"}
    assert float(state["t"]) == 2.0


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_golden_bytes(tmp_path):
    import struct

    path = tmp_path / "one.nseg"
    save_tensors(path, {"a": np.array([1.0, 2.0])})
    want = (b"NSEG1" + struct.pack("<Q", 1) + b"a" + struct.pack("<Q", 1)
            + struct.pack("<Q", 2) + struct.pack("<2d", 1.0, 2.0))
    assert path.read_bytes() == want


def test_checkpoint_roundtrip_preserves_order_shapes_values(tmp_path):
    rng = rng_of(20)
    tensors = {
        "w.conv": rng.standard_normal((2, 3, 3, 3)),
        "scalar": np.float64(4.25),
        "empty_rank1": np.zeros(0),
        "名前": rng.standard_normal(5),
    }
    path = tmp_path / "rt.nseg"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        got = back[name]
        assert got.shape == np.asarray(arr).shape
        np.testing.assert_array_equal(got, np.asarray(arr, dtype=np.float64))


def test_checkpoint_scalar_rank0(tmp_path):
    path = tmp_path / "s.nseg"
    save_tensors(path, {"t": 3.0})
    back = load_tensors(path)
    assert back["t"].shape == () and float(back["t"]) == 3.0


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.nseg"
    path.write_bytes(b"XSEG1" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_tensors(path)


def test_checkpoint_truncation_names_offset_and_field(tmp_path):
    path = tmp_path / "t.nseg"
    save_tensors(path, {"weights": np.ones((2, 2))})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(CheckpointFormatError, match=r"payload of 'weights' at offset"):
        load_tensors(path)
    path.write_bytes(data[:7])
    with pytest.raises(CheckpointFormatError, match="name"):
        load_tensors(path)


def test_checkpoint_duplicate_record(tmp_path):
    import struct

    record = (struct.pack("<Q", 1) + b"x" + struct.pack("<Q", 0)
              + struct.pack("<d", 1.0))
    path = tmp_path / "dup.nseg"
    path.write_bytes(b"NSEG1" + record + record)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        load_tensors(path)
