"""Forward-pass contracts of the engine layers against independent oracles."""
import numpy as np
import pytest

from multicaps import nn
from multicaps.errors import ConfigurationError


def conv_reference(x, w, b=None, stride=1):
    """Triple-loop cross-correlation; the oracle the fast paths must match."""
    h, wd, c_in = x.shape
    k = w.shape[0]
    c_out = w.shape[3]
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((ho, wo, c_out))
    for oy in range(ho):
        for ox in range(wo):
            for oc in range(c_out):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        for ic in range(c_in):
                            acc += x[oy * stride + ky, ox * stride + kx, ic] * w[ky, kx, ic, oc]
                out[oy, ox, oc] = acc
    if b is not None:
        out += b
    return out


class TestConv2d:
    def test_36x36_with_9x9_stride1_gives_28x28(self):
        x = np.zeros((36, 36, 1))
        w = np.zeros((9, 9, 1, 4))
        out = nn.conv2d(x, w, stride=1)
        assert out.shape == (28, 28, 4)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.random((7, 7, 1))
        w = np.ones((1, 1, 1, 1))
        out = nn.conv2d(x, w, bias=np.zeros(1), stride=1)
        assert np.array_equal(out.data[:, :, 0], x[:, :, 0])

    def test_random_against_reference(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 5, 1))
        w = rng.standard_normal((3, 3, 1, 2))
        b = rng.standard_normal(2)
        out = nn.conv2d(x, w, bias=b, stride=1)
        assert np.allclose(out.data, conv_reference(x, w, b), atol=1e-12)

    def test_exhaustive_small_shapes_both_strides(self):
        # covers both the materialized-column and the shifted-matmul paths
        rng = np.random.default_rng(3)
        for h in range(3, 9):
            for c_in in (1, 2, 3):
                for stride in (1, 2):
                    for c_out in (1, 2):
                        x = rng.standard_normal((h, h, c_in))
                        w = rng.standard_normal((3, 3, c_in, c_out))
                        out = nn.conv2d(x, w, stride=stride)
                        assert np.allclose(
                            out.data, conv_reference(x, w, stride=stride), atol=1e-12
                        )

    def test_shifted_path_matches_reference(self):
        # patch length 3*3*200 > 1024 forces the shifted-matmul path
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 6, 200))
        w = rng.standard_normal((3, 3, 200, 2))
        out = nn.conv2d(x, w, stride=2)
        assert np.allclose(out.data, conv_reference(x, w, stride=2), atol=1e-10)

    def test_batched_matches_per_example(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        b = rng.standard_normal(4)
        out = nn.conv2d(x, w, bias=b, stride=1)
        for i in range(3):
            assert np.allclose(out.data[i], conv_reference(x[i], w, b), atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d(np.zeros((5, 5, 3)), np.zeros((3, 3, 2, 1)))

    def test_kernel_larger_than_input_raises(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d(np.zeros((5, 5, 1)), np.zeros((9, 9, 1, 1)))


class TestDense:
    def test_identity_weights(self):
        x = np.array([3.0, -1.0, 2.5])
        out = nn.dense(x, np.eye(3), np.zeros(3))
        assert np.array_equal(out.data, x)

    def test_hand_arithmetic(self):
        out = nn.dense(np.array([1.0, 2.0]), np.eye(2), np.array([1.0, 1.0]))
        assert np.array_equal(out.data, [2.0, 3.0])

    def test_random_against_matvec(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(8)
        w = rng.standard_normal((8, 4))
        b = rng.standard_normal(4)
        expected = np.array([x @ w[:, j] + b[j] for j in range(4)])
        out = nn.dense(x, w, b)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ConfigurationError):
            nn.dense(np.zeros(5), np.zeros((4, 2)))


class TestActivations:
    def test_leaky_relu_positive_passthrough(self):
        assert nn.leaky_relu(np.array(3.0), 0.2).item() == 3.0

    def test_leaky_relu_alpha_02(self):
        assert nn.leaky_relu(np.array(-1.0), 0.2).item() == pytest.approx(-0.2)

    def test_leaky_relu_alpha_015(self):
        assert nn.leaky_relu(np.array(-2.0), 0.15).item() == pytest.approx(-0.3)

    def test_leaky_relu_alpha_range(self):
        with pytest.raises(ConfigurationError):
            nn.leaky_relu(np.zeros(3), 1.0)

    def test_relu(self):
        out = nn.relu(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_stable_in_tails(self):
        out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[1] == pytest.approx(0.5)


class TestDropout:
    def test_eval_mode_is_bit_exact_identity(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((13, 7))
        out = nn.dropout(nn.Tensor(x), 0.5, train=False, rng=rng)
        assert out.data is x or np.array_equal(out.data, x)

    def test_rate_zero_identity_both_modes(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(50)
        for train in (True, False):
            out = nn.dropout(nn.Tensor(x), 0.0, train=train, rng=rng)
            assert np.array_equal(out.data, x)

    def test_inverted_scaling_statistics(self):
        n = 100_000
        rng = np.random.default_rng(9)
        out = nn.dropout(nn.Tensor(np.ones(n)), 0.5, train=True, rng=rng).data
        survivors = np.count_nonzero(out) / n
        sigma_frac = np.sqrt(0.25 / n)
        assert abs(survivors - 0.5) < 3 * sigma_frac
        assert abs(out.mean() - 1.0) < 3 * 2 * sigma_frac
        assert set(np.unique(out)) <= {0.0, 2.0}


class TestSoftmaxCrossEntropy:
    def test_uniform_gives_log10(self):
        loss = nn.softmax_cross_entropy(np.zeros(10), np.full(10, 0.1))
        assert loss.item() == pytest.approx(np.log(10.0), abs=1e-12)

    def test_dominant_logit_limit(self):
        logits = np.zeros(10)
        logits[3] = 1000.0
        target = np.zeros(10)
        target[3] = 1.0
        assert nn.softmax_cross_entropy(logits, target).item() < 1e-9

    def test_half_mass_target(self):
        target = np.zeros(10)
        target[[2, 7]] = 0.5
        loss = nn.softmax_cross_entropy(np.zeros(10), target)
        assert loss.item() == pytest.approx(np.log(10.0), abs=1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            logits = rng.standard_normal(10) * rng.uniform(0.1, 50)
            target = rng.random(10)
            target /= target.sum()
            assert nn.softmax_cross_entropy(logits, target).item() >= 0.0

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            nn.softmax_cross_entropy(np.zeros(10), np.full(10, 0.2))
