"""Tensor primitives against hand values and the naive six-loop oracle."""

import numpy as np
import pytest

from bevkit import (
    BatchNormSpec,
    ConvSpec,
    FormatError,
    GeometryError,
    NumericError,
    ShapeMismatchError,
    add,
    batchnorm_forward,
    conv2d_forward,
    load_tensor,
    relu,
    save_tensor,
    softmax_channel,
)


def conv2d_naive(x, conv):
    """Independent six-nested-loop cross-correlation in float64."""
    out_ch, in_ch, kh, kw = conv.weights.shape
    sh, sw = conv.stride
    ph, pw = conv.padding
    _, h, w = x.shape
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (w + 2 * pw - kw) // sw + 1
    xp = np.zeros((in_ch, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, ph : ph + h, pw : pw + w] = x
    wts = conv.weights.astype(np.float64)
    out = np.zeros((out_ch, out_h, out_w), dtype=np.float64)
    for o in range(out_ch):
        for i in range(out_h):
            for j in range(out_w):
                acc = float(conv.bias[o])
                for c in range(in_ch):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += wts[o, c, ki, kj] * xp[c, i * sh + ki, j * sw + kj]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_scaled_identity_1x1(self):
        conv = ConvSpec(np.array([[[[2.0]]]], np.float32), np.zeros(1, np.float32))
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
        np.testing.assert_array_equal(
            conv2d_forward(x, conv), [[[2.0, 4.0], [6.0, 8.0]]]
        )

    def test_all_ones_3x3_padded(self):
        conv = ConvSpec(
            np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), padding=(1, 1)
        )
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
        np.testing.assert_array_equal(
            conv2d_forward(x, conv), [[[10.0, 10.0], [10.0, 10.0]]]
        )

    def test_random_against_naive_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 8, 8)).astype(np.float32)
        conv = ConvSpec(
            rng.standard_normal((8, 4, 3, 3)).astype(np.float32),
            rng.standard_normal(8).astype(np.float32),
            padding=(1, 1),
        )
        got = conv2d_forward(x, conv)
        want = conv2d_naive(x, conv)
        assert np.abs(got - want).max() <= 1e-5

    @pytest.mark.parametrize("trial", range(20))
    def test_randomized_specs_match_oracle(self, trial):
        rng = np.random.default_rng(100 + trial)
        in_ch = int(rng.integers(1, 7))
        out_ch = int(rng.integers(1, 7))
        k = int(rng.choice([1, 3, 5]))
        h, w = (int(rng.integers(k, 13)) for _ in range(2))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        x = rng.uniform(-1, 1, (in_ch, h, w)).astype(np.float32)
        conv = ConvSpec(
            rng.uniform(-1, 1, (out_ch, in_ch, k, k)).astype(np.float32),
            rng.uniform(-1, 1, out_ch).astype(np.float32),
            stride=stride,
            padding=padding,
        )
        assert np.abs(conv2d_forward(x, conv) - conv2d_naive(x, conv)).max() <= 1e-5

    def test_linear_in_input_with_zero_bias(self):
        rng = np.random.default_rng(5)
        conv = ConvSpec(
            rng.uniform(-1, 1, (5, 3, 3, 3)).astype(np.float32),
            np.zeros(5, np.float32),
            padding=(1, 1),
        )
        x = rng.uniform(-1, 1, (3, 9, 9)).astype(np.float32)
        y = rng.uniform(-1, 1, (3, 9, 9)).astype(np.float32)
        a, b = np.float32(0.7), np.float32(-1.3)
        lhs = conv2d_forward(a * x + b * y, conv)
        rhs = a * conv2d_forward(x, conv) + b * conv2d_forward(y, conv)
        assert np.abs(lhs - rhs).max() <= 1e-4

    def test_channel_mismatch_raises(self):
        conv = ConvSpec(np.ones((1, 2, 1, 1), np.float32), np.zeros(1, np.float32))
        with pytest.raises(ShapeMismatchError):
            conv2d_forward(np.ones((3, 4, 4), np.float32), conv)

    def test_empty_output_raises(self):
        conv = ConvSpec(np.ones((1, 1, 5, 5), np.float32), np.zeros(1, np.float32))
        with pytest.raises(GeometryError):
            conv2d_forward(np.ones((1, 3, 3), np.float32), conv)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeMismatchError):
            ConvSpec(np.ones((1, 1, 2, 2), np.float32), np.zeros(1, np.float32))


class TestBatchNorm:
    def test_identity_statistics_bit_exact(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5, 7)).astype(np.float32)
        bn = BatchNormSpec.identity(3)
        np.testing.assert_array_equal(batchnorm_forward(x, bn), x)

    def test_worked_example(self):
        bn = BatchNormSpec(mean=[1.0], var=[4.0], gamma=[2.0], beta=[3.0], eps=0.0)
        x = np.full((1, 1, 1), 5.0, np.float32)
        np.testing.assert_allclose(batchnorm_forward(x, bn), 7.0)

    def test_constant_input_equal_to_mean_gives_beta(self):
        bn = BatchNormSpec(mean=[2.5, -1.0], var=[4.0, 9.0], gamma=[3.0, 5.0],
                           beta=[0.25, -0.75], eps=0.0)
        x = np.stack([np.full((4, 4), 2.5), np.full((4, 4), -1.0)]).astype(np.float32)
        out = batchnorm_forward(x, bn)
        np.testing.assert_array_equal(out[0], np.full((4, 4), 0.25, np.float32))
        np.testing.assert_array_equal(out[1], np.full((4, 4), -0.75, np.float32))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            batchnorm_forward(np.ones((2, 3, 3), np.float32), BatchNormSpec.identity(3))

    def test_negative_var_rejected(self):
        with pytest.raises(NumericError):
            BatchNormSpec(mean=[0.0], var=[-1.0], gamma=[1.0], beta=[0.0])


class TestElementwise:
    def test_add_zeros(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(add(x, np.zeros_like(x)), x)

    def test_add_values(self):
        np.testing.assert_array_equal(
            add(np.array([1.0, 2.0], np.float32), np.array([3.0, 4.0], np.float32)),
            [4.0, 6.0],
        )

    def test_add_negation_is_zero(self):
        x = np.linspace(-3, 3, 12, dtype=np.float32).reshape(3, 4)
        np.testing.assert_array_equal(add(x, -x), np.zeros_like(x))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            add(np.ones(3, np.float32), np.ones(4, np.float32))

    def test_relu(self):
        np.testing.assert_array_equal(
            relu(np.array([-1.0, 0.0, 2.0], np.float32)), [0.0, 0.0, 2.0]
        )
        np.testing.assert_array_equal(relu(np.array([-5.0, -0.5], np.float32)), [0.0, 0.0])
        x = np.array([0.0, 1.5, 7.0], np.float32)
        np.testing.assert_array_equal(relu(x), x)


class TestSoftmaxChannel:
    def test_single_bin_is_ones(self):
        out = softmax_channel(np.random.default_rng(2).standard_normal((1, 3, 3)))
        np.testing.assert_array_equal(out, np.ones((1, 3, 3), np.float32))

    def test_symmetric_logits(self):
        out = softmax_channel(np.zeros((2, 1, 1), np.float32))
        np.testing.assert_allclose(out, 0.5)

    def test_log_weights(self):
        logits = np.log(np.array([1.0, 3.0], np.float32)).reshape(2, 1, 1)
        np.testing.assert_allclose(softmax_channel(logits).ravel(), [0.25, 0.75], atol=1e-7)

    def test_columns_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(3)
        out = softmax_channel(rng.uniform(-30, 30, (16, 7, 5)).astype(np.float32))
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-5)

    def test_nonfinite_rejected(self):
        bad = np.array([[[np.inf]], [[0.0]]], np.float32)
        with pytest.raises(NumericError):
            softmax_channel(bad)


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        for shape in [(5,), (3, 4), (2, 3, 4), (2, 3, 4, 5)]:
            arr = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / "t.bevt"
            save_tensor(arr, path)
            back = load_tensor(path)
            assert back.shape == arr.shape
            np.testing.assert_array_equal(back, arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bevt"
        p.write_bytes(b"NOTMAGIC" + bytes(24))
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.bevt"
        save_tensor(np.ones((4, 4), np.float32), p)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(FormatError):
            load_tensor(p)
