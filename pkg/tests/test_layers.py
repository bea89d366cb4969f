import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from endp import layers as L
from endp.errors import DimensionMismatch, EmptyList, GeometryMismatch, UnknownActivation
from endp.gaussian import GaussianVector
from endp.network import mnist_spec
from endp.oracle import compare_layer, mc_moments

# Rectified standard normal: E = 1/sqrt(2 pi), Var = 1/2 - 1/(2 pi).
# Frozen from scipy quadrature (see test_relu_constants_match_quadrature).
RELU_STD_MEAN = 0.3989422804014327
RELU_STD_VAR = 0.3408450569081046


def spd(d, seed, scale=1.0):
    a = np.random.default_rng(seed).standard_normal((d, d))
    return scale * (a @ a.T) / d


def kernel(P, seed, scale=0.3):
    r = np.random.default_rng(seed)
    return L.VariationalConvKernel(r.standard_normal(P), scale * np.tril(r.standard_normal((P, P))))


def naive_xcorr(img, w):
    c, h, wd = img.shape
    k = w.shape[-1]
    out = np.zeros((h - k + 1, wd - k + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = np.sum(img[:, i:i + k, j:j + k] * w)
    return out


# -- im2col --------------------------------------------------------------------

def test_im2col_one_by_one():
    img = np.arange(6.0).reshape(1, 2, 3)
    pm = L.im2col(img, 1)
    assert pm.X.shape == (6, 1)
    assert np.array_equal(pm.X[:, 0], img.reshape(-1))
    assert np.array_equal(pm.X @ [2.5], 2.5 * img.reshape(-1))


def test_im2col_3x3_by_hand():
    img = np.arange(1.0, 10.0).reshape(3, 3)
    pm = L.im2col(img, 2)
    expect = [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]]
    assert np.array_equal(pm.X, expect)
    assert pm.out_shape == (2, 2)


def test_im2col_matches_nested_loops():
    r = np.random.default_rng(0)
    img = r.standard_normal((2, 8, 8))
    w = r.standard_normal((2, 3, 3))
    pm = L.im2col(img, 3)
    assert np.max(np.abs(pm.X @ w.reshape(-1) - naive_xcorr(img, w).reshape(-1))) < 1e-12


def test_im2col_stride():
    img = np.arange(25.0).reshape(5, 5)
    pm = L.im2col(img, 3, stride=2)
    assert pm.out_shape == (2, 2)
    assert np.array_equal(pm.X[3], [12, 13, 14, 17, 18, 19, 22, 23, 24])
    with pytest.raises(GeometryMismatch):
        L.im2col(np.zeros((6, 6)), 3, stride=2)
    with pytest.raises(GeometryMismatch):
        L.im2col(np.zeros((2, 2)), 3)


# -- conv_forward --------------------------------------------------------------

def test_conv_zero_cov_is_plain_convolution():
    r = np.random.default_rng(1)
    img = r.standard_normal((1, 5, 5))
    w = r.standard_normal(9)
    g = L.conv_forward(L.im2col(img, 3), L.VariationalConvKernel(w, np.zeros((9, 9))))
    assert np.allclose(g.mean, naive_xcorr(img, w.reshape(1, 3, 3)).reshape(-1), atol=1e-12)
    assert not np.any(g.cov)


def test_conv_identity_patch_returns_kernel_distribution():
    k = L.VariationalConvKernel([0.7], [[0.2]])
    g = L.conv_forward(L.im2col(np.ones((1, 1, 1)), 1), k)
    assert g.mean[0] == 0.7
    assert g.cov[0, 0] == pytest.approx(0.04)


def test_conv_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        L.conv_forward(L.im2col(np.zeros((4, 4)), 3), kernel(4, 0))


def test_conv_matches_mc_oracle():
    r = np.random.default_rng(2)
    X = r.standard_normal((16, 9))
    kern = kernel(9, 3)
    lower = kern.cov_factor

    def sampler(rng, n):
        w = kern.mean + rng.standard_normal((n, 9)) @ lower.T
        return w @ X.T

    pm = L.PatchMatrix(X, (1, 6, 6), 3, 1)
    rep = compare_layer(L.conv_forward(pm, kern), mc_moments(sampler, 10 ** 6, 0))
    assert rep.passes(0.01), rep


# -- conv_forward_random_input ---------------------------------------------------

def test_random_input_with_zero_cov_reduces_to_conv():
    r = np.random.default_rng(4)
    img = r.standard_normal((2, 4, 4))
    kern = kernel(18, 5)
    a = L.conv_forward_random_input(GaussianVector.point(img.reshape(-1)), img.shape, kern, 3)
    b = L.conv_forward(L.im2col(img, 3), kern)
    assert np.allclose(a.mean, b.mean, atol=1e-12)
    assert np.allclose(a.cov, b.cov, atol=1e-12)


def test_random_input_with_fixed_kernel_is_linear_map():
    r = np.random.default_rng(6)
    shape = (1, 4, 4)
    x = GaussianVector(r.standard_normal(16), spd(16, 7))
    m = r.standard_normal(4)
    g = L.conv_forward_random_input(x, shape, L.VariationalConvKernel(m, np.zeros((4, 4))), 2)
    # the conv is a fixed linear map A; moments are (A mu, A S A^T)
    idx = L.patch_indices(shape, 2)
    A = np.zeros((idx.shape[0], 16))
    for q in range(idx.shape[0]):
        A[q, idx[q]] = m
    assert np.allclose(g.mean, A @ x.mean, atol=1e-12)
    assert np.allclose(g.cov, A @ x.cov @ A.T, atol=1e-10)


def test_random_input_scalar_product_variance():
    mx, sx, mw, sw = 0.8, 0.6, -1.3, 0.4
    x = GaussianVector([mx], [[sx ** 2]])
    g = L.conv_forward_random_input(x, (1, 1, 1), L.VariationalConvKernel([mw], [[sw]]), 1)
    assert g.mean[0] == pytest.approx(mx * mw)
    assert g.cov[0, 0] == pytest.approx(sw ** 2 * sx ** 2 + mw ** 2 * sx ** 2 + mx ** 2 * sw ** 2)


def test_random_input_matches_mc_oracle():
    r = np.random.default_rng(8)
    shape = (1, 3, 3)
    x = GaussianVector(r.standard_normal(9), spd(9, 9, 0.5))
    kern = kernel(4, 10, 0.4)
    lx = np.linalg.cholesky(x.cov + 1e-12 * np.eye(9))
    idx = L.patch_indices(shape, 2)

    def sampler(rng, n):
        xs = x.mean + rng.standard_normal((n, 9)) @ lx.T
        ws = kern.mean + rng.standard_normal((n, 4)) @ kern.cov_factor.T
        return np.einsum("nqp,np->nq", xs[:, idx], ws)

    rep = compare_layer(L.conv_forward_random_input(x, shape, kern, 2), mc_moments(sampler, 10 ** 6, 1))
    assert rep.passes(0.01), rep


# -- activations -----------------------------------------------------------------

def test_relu_constants_match_quadrature():
    pdf = stats.norm.pdf
    m = integrate.quad(lambda z: z * pdf(z), 0, np.inf)[0]
    s = integrate.quad(lambda z: z * z * pdf(z), 0, np.inf)[0]
    assert m == pytest.approx(RELU_STD_MEAN, abs=1e-12)
    assert s - m * m == pytest.approx(RELU_STD_VAR, abs=1e-12)


def test_relu_ensemble_approaches_rectified_gaussian():
    g = L.activation_endp(GaussianVector([0.0], [[1.0]]), "relu", 10 ** 5, seed=0)
    assert g.mean[0] == pytest.approx(RELU_STD_MEAN, abs=0.01)
    assert g.cov[0, 0] == pytest.approx(RELU_STD_VAR, abs=0.01)


def test_identity_ensemble_recovers_moments():
    mu = np.array([1.0, -0.5, 2.0])
    cov = spd(3, 11) + 0.5 * np.eye(3)
    g = L.activation_endp(GaussianVector(mu, cov), "identity", 10 ** 5, seed=2)
    assert np.linalg.norm(g.mean - mu) / np.linalg.norm(mu) < 0.02
    assert np.linalg.norm(g.cov - cov) / np.linalg.norm(cov) < 0.02


@pytest.mark.parametrize("act", sorted(L.ACTIVATIONS))
def test_point_mass_through_activation(act):
    mu = np.array([-1.2, 0.0, 0.7])
    g = L.activation_endp(GaussianVector.point(mu), act, 10, seed=3)
    assert np.allclose(g.mean, L.ACTIVATIONS[act](mu))
    assert not np.any(g.cov)


def test_unknown_activation():
    z = GaussianVector([0.0], [[1.0]])
    with pytest.raises(UnknownActivation):
        L.activation_endp(z, "tanh", 10, 0)
    with pytest.raises(UnknownActivation):
        L.activation_taylor(z, "gelu")


@pytest.mark.parametrize("act", sorted(L.ACTIVATIONS))
def test_derivatives_match_finite_differences(act):
    x = np.array([-2.0, -0.3, 0.4, 1.7])
    h = 1e-6
    fd = (L.ACTIVATIONS[act](x + h) - L.ACTIVATIONS[act](x - h)) / (2 * h)
    assert np.allclose(L.DERIVATIVES[act](x), fd, atol=1e-6)


def test_taylor_identity_and_linear_region():
    z = GaussianVector([1.0, 2.0], [[0.3, 0.1], [0.1, 0.2]])
    t = L.activation_taylor(z, "identity")
    assert np.array_equal(t.mean, z.mean) and np.allclose(t.cov, z.cov)
    small = GaussianVector([1.0, 2.0], 1e-6 * np.eye(2))
    r = L.activation_taylor(small, "relu")
    assert np.allclose(r.mean, small.mean) and np.allclose(r.cov, small.cov)


def test_taylor_gap_for_elu_is_reported(capsys):
    z = GaussianVector([-1.0], [[0.25]])
    ens = L.activation_endp(z, "elu", 10 ** 5, seed=4)
    tay = L.activation_taylor(z, "elu")
    gap_mean = abs(ens.mean[0] - tay.mean[0])
    gap_var = abs(ens.cov[0, 0] - tay.cov[0, 0])
    print(f"elu N(-1, 0.25): taylor mean gap {gap_mean:.4g}, variance gap {gap_var:.4g}")
    assert np.isfinite(gap_mean) and np.isfinite(gap_var)


# -- pooling ---------------------------------------------------------------------

def test_pool_single_window():
    cov = spd(4, 12)
    g, plan = L.maxpool_moments(GaussianVector([1, 4, 2, 3], cov), 2, 2)
    assert list(plan.kept_indices) == [1]
    assert g.mean[0] == 4 and g.cov[0, 0] == cov[1, 1]


def test_pool_ties_pick_lowest_index():
    plan = L.pool_plan(np.zeros((4, 4)), 2, 2)
    assert list(plan.kept_indices) == [0, 2, 8, 10]


def test_pool_random_4x4_gather():
    r = np.random.default_rng(13)
    mean = r.standard_normal(16)
    cov = spd(16, 14)
    g, plan = L.maxpool_moments(GaussianVector(mean, cov), 2, 2)
    assert plan.out_shape == (2, 2) == ((4 - 2) // 2 + 1,) * 2
    m = mean.reshape(4, 4)
    expect = []
    for i in range(2):
        for j in range(2):
            win = m[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            a, b = np.unravel_index(np.argmax(win), (2, 2))
            expect.append((2 * i + a) * 4 + 2 * j + b)
    assert list(plan.kept_indices) == expect
    assert np.array_equal(g.cov, cov[np.ix_(expect, expect)])


def test_pool_geometry_errors():
    with pytest.raises(GeometryMismatch):
        L.maxpool_moments(GaussianVector(np.zeros(25), np.eye(25)), 2, 2)
    with pytest.raises(GeometryMismatch):
        L.maxpool_moments(GaussianVector(np.zeros(6), np.eye(6)), 2, 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), side=st.sampled_from([2, 4, 6]))
def test_pool_preserves_psd(seed, side):
    d = side * side
    a = np.random.default_rng(seed).standard_normal((d, 3))
    g, _ = L.maxpool_moments(GaussianVector(np.random.default_rng(seed + 1).standard_normal(d), a @ a.T), 2, 2)
    assert g.is_valid()


# -- concatenation -------------------------------------------------------------

def test_concat_single_is_identity():
    g = GaussianVector([1.0, 2.0], spd(2, 15))
    c = L.concat_channels([g])
    assert np.array_equal(c.mean, g.mean) and np.array_equal(c.cov, g.cov)


def test_concat_two_scalars():
    c = L.concat_channels([GaussianVector([1.0], [[2.0]]), GaussianVector([3.0], [[4.0]])])
    assert np.array_equal(c.mean, [1, 3]) and np.array_equal(c.cov, [[2, 0], [0, 4]])


def test_concat_32_kernels_block_structure():
    parts = [GaussianVector(np.full(144, float(k)), np.eye(144) * (k + 1)) for k in range(32)]
    c = L.concat_channels(parts)
    assert c.dim == 4608
    for k in range(32):
        sl = slice(144 * k, 144 * (k + 1))
        block = c.cov[sl].copy()
        assert np.array_equal(block[:, sl], parts[k].cov)
        block[:, sl] = 0
        assert not np.any(block)


def test_concat_empty():
    with pytest.raises(EmptyList):
        L.concat_channels([])


# -- dense -----------------------------------------------------------------------

def test_dense_deterministic_reduction():
    r = np.random.default_rng(16)
    M = r.standard_normal((3, 4))
    b = GaussianVector.point(r.standard_normal(4))
    f = L.dense_forward(b, L.VariationalDenseWeight(M, np.zeros((3, 4, 4))))
    assert np.allclose(f.mean, M @ b.mean) and not np.any(f.cov)


def test_dense_scalar_product_variance():
    mb, sb, mw, sw = 0.5, 0.7, 2.0, 0.3
    f = L.dense_forward(GaussianVector([mb], [[sb ** 2]]), L.VariationalDenseWeight([[mw]], [[[sw]]]))
    assert f.cov[0, 0] == pytest.approx(sw ** 2 * sb ** 2 + mw ** 2 * sb ** 2 + mb ** 2 * sw ** 2)


def test_dense_matches_mc_oracle():
    r = np.random.default_rng(17)
    H, D = 3, 5
    b = GaussianVector(r.standard_normal(D), spd(D, 18))
    w = L.VariationalDenseWeight(r.standard_normal((H, D)), 0.5 * np.tril(r.standard_normal((H, D, D))))
    lb = np.linalg.cholesky(b.cov)

    def sampler(rng, n):
        bs = b.mean + rng.standard_normal((n, D)) @ lb.T
        ws = w.means + np.einsum("hij,nhj->nhi", w.factors, rng.standard_normal((n, H, D)))
        return np.einsum("nhd,nd->nh", ws, bs)

    rep = compare_layer(L.dense_forward(b, w), mc_moments(sampler, 10 ** 6, 2))
    assert rep.passes(0.01), rep


def test_dense_from_variances_matches_full():
    r = np.random.default_rng(19)
    M, V = r.standard_normal((2, 3)), r.uniform(0.1, 1, (2, 3))
    a = L.VariationalDenseWeight.from_variances(M, V)
    assert np.allclose(a.covs, np.stack([np.diag(v) for v in V]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), H=st.integers(1, 4), D=st.integers(1, 6))
def test_dense_diagonal_nonnegative(seed, H, D):
    r = np.random.default_rng(seed)
    b = GaussianVector(r.standard_normal(D), spd(D, seed))
    w = L.VariationalDenseWeight(r.standard_normal((H, D)), np.tril(r.standard_normal((H, D, D))))
    f = L.dense_forward(b, w)
    assert np.all(np.diag(f.cov) >= 0)
    assert f.is_valid()


def test_dense_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        L.dense_forward(GaussianVector.point([1.0, 2.0]), L.VariationalDenseWeight([[1.0]], [[[0.0]]]))


# -- softmax ---------------------------------------------------------------------

def test_softmax_uniform_and_zero_cov():
    y = L.softmax_taylor(GaussianVector(np.zeros(10), np.zeros((10, 10))), K=10)
    assert np.allclose(y.mean, 0.1) and not np.any(y.cov)


def test_softmax_jacobian_finite_differences():
    mu = np.random.default_rng(20).standard_normal(5)
    J = L.softmax_jacobian(mu)
    h = 1e-6
    fd = np.stack([(L.softmax(mu + h * e) - L.softmax(mu - h * e)) / (2 * h) for e in np.eye(5)], axis=1)
    assert np.max(np.abs(J - fd)) < 1e-6


def test_softmax_large_logits_stable():
    y = L.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0)


def test_softmax_class_count_checked():
    with pytest.raises(DimensionMismatch):
        L.softmax_taylor(GaussianVector.point([0.0, 1.0]), K=3)
    with pytest.raises(DimensionMismatch):
        L.softmax_taylor(GaussianVector.point([0.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), K=st.integers(2, 12))
def test_softmax_covariance_annihilates_ones(seed, K):
    r = np.random.default_rng(seed)
    y = L.softmax_taylor(GaussianVector(3 * r.standard_normal(K), spd(K, seed, 4.0)))
    norm = max(np.linalg.norm(y.cov), 1e-300)
    assert abs(y.mean.sum() - 1) < 1e-12
    assert np.all((y.mean > 0) & (y.mean < 1))
    assert np.max(np.abs(y.cov.sum(0))) <= 1e-8 * norm + 1e-300
    assert abs(np.ones(K) @ y.cov @ np.ones(K)) <= 1e-8 * norm + 1e-300


# -- shape contract ----------------------------------------------------------------

def test_mnist_pipeline_shapes():
    spec = mnist_spec(200)
    g = spec.geometry()[0]
    assert g["conv_shape"] == (24, 24)
    assert g["pooled_shape"] == (12, 12)
    assert spec.dense_in == 32 * 144 == 4608
    pm = L.im2col(np.zeros((1, 28, 28)), 5)
    assert pm.X.shape == (576, 25)
