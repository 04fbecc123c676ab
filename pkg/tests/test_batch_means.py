import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genis.batch_means import BatchMeansSpec, block_size, bm_cov, bm_variance
from genis.errors import InsufficientDataError


def test_block_size_default_rule():
    assert block_size(100, BatchMeansSpec()) == 10
    assert block_size(10**5, BatchMeansSpec()) == 316
    assert block_size(10**4, BatchMeansSpec(nu=0.25)) == 10


def test_block_size_clamps_to_two_blocks():
    # floor(4^0.9) = 3 would leave a single block; clamp to n // 2
    assert block_size(4, BatchMeansSpec(nu=0.9)) == 2
    assert block_size(5, BatchMeansSpec(explicit_b=17)) == 2


def test_block_size_explicit_override():
    assert block_size(1000, BatchMeansSpec(explicit_b=25)) == 25


def test_block_size_needs_four_points():
    with pytest.raises(InsufficientDataError):
        block_size(3, BatchMeansSpec())


def test_spec_validation():
    with pytest.raises(ValueError):
        BatchMeansSpec(nu=0.0)
    with pytest.raises(ValueError):
        BatchMeansSpec(nu=1.0)
    with pytest.raises(ValueError):
        BatchMeansSpec(explicit_b=0)


def test_iid_long_run_variance_replications():
    """For iid N(0,1) the long-run variance is 1.  With e = 316 blocks the
    estimator is sigma^2 * chi2_{e-1}/(e-1), relative sd about 8%, so a 15%
    window captures roughly 94% of draws; assert a 90% floor."""
    rng = np.random.default_rng(20240817)
    hits = 0
    reps = 200
    n = 100_000
    b = block_size(n, BatchMeansSpec())
    for _ in range(reps):
        est = bm_variance(rng.standard_normal(n), b)
        hits += 0.85 <= est <= 1.15
    assert hits / reps >= 0.90


def test_ar1_long_run_variance():
    """AR(1) with coefficient phi has long-run variance 1/(1-phi)^2 times
    the innovation variance."""
    phi = 0.5
    rng = np.random.default_rng(7)
    n = 200000
    innov = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = innov[0]
    for i in range(1, n):
        x[i] = phi * x[i - 1] + innov[i]
    truth = 1.0 / (1.0 - phi) ** 2
    est = bm_variance(x, block_size(n, BatchMeansSpec()))
    assert est == pytest.approx(truth, rel=0.15)


def test_trailing_remainder_dropped():
    # 10 points, b=3 -> e=3 covers 9 points; the 10th must not matter
    x = np.arange(10, dtype=float)
    y = x.copy()
    y[9] = 1e6
    assert bm_variance(x, 3) == bm_variance(y, 3)


def test_vector_and_scalar_paths_agree_bitwise():
    """The covariance of (x, x) must reproduce the variance of x exactly,
    entry for entry, or downstream dual-route checks cannot be exact."""
    rng = np.random.default_rng(11)
    x = rng.standard_normal(500)
    b = 22
    v = bm_variance(x, b)
    c = bm_cov(np.column_stack([x, x]), b)
    assert c[0, 0] == v
    assert c[0, 1] == v
    assert c[1, 0] == v
    assert c[1, 1] == v


def test_cov_shape_and_symmetry():
    rng = np.random.default_rng(3)
    mat = rng.standard_normal((300, 3))
    c = bm_cov(mat, 17)
    assert c.shape == (3, 3)
    np.testing.assert_array_equal(c, c.T)


def test_noncontiguous_input_same_answer():
    rng = np.random.default_rng(5)
    wide = rng.standard_normal((400, 6))
    view = wide[:, ::3]
    np.testing.assert_array_equal(bm_cov(view, 20), bm_cov(view.copy(), 20))


@given(
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    n=st.integers(min_value=8, max_value=400),
    p=st.integers(min_value=1, max_value=3),
)
@settings(max_examples=60, deadline=None)
def test_cov_psd(seed, n, p):
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((n, p))
    c = bm_cov(mat, block_size(n, BatchMeansSpec()))
    eigs = np.linalg.eigvalsh(c)
    assert eigs.min() >= -1e-10 * max(1.0, eigs.max())


@given(
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    shift=st.floats(min_value=-50, max_value=50),
    scale=st.floats(min_value=0.1, max_value=20),
)
@settings(max_examples=60, deadline=None)
def test_affine_equivariance(seed, shift, scale):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(240)
    b = 15
    base = bm_variance(x, b)
    assert bm_variance(scale * x + shift, b) == pytest.approx(
        scale**2 * base, rel=1e-9, abs=1e-12
    )


def test_constant_series_gives_zero():
    assert bm_variance(np.full(100, 3.7), 10) == pytest.approx(0.0, abs=1e-20)
