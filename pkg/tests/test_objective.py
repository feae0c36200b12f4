import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmoge import tensor as tn
from vmoge.checks import kl_monte_carlo, random_precision
from vmoge.graphprior import PriorSpec, precision_matrix
from vmoge.objective import classification_nll, clamp_events, combine, kl_gmrf


def kl_dense(mu, log_sigma, Q):
    """Textbook Gaussian KL with full covariances, one latent column at a time."""
    S = np.linalg.inv(Q)
    C = Q.shape[0]
    total = 0.0
    for j in range(mu.shape[1]):
        Sq = np.diag(np.exp(2 * log_sigma[:, j]))
        m = mu[:, j]
        total += 0.5 * (np.trace(np.linalg.solve(S, Sq)) + m @ Q @ m - C
                        + np.linalg.slogdet(S)[1] - np.linalg.slogdet(Sq)[1])
    return total


def test_kl_zero_at_matching_prior():
    assert float(kl_gmrf(np.zeros((3, 2)), np.zeros((3, 2)), np.eye(3)).data) == 0.0


def test_kl_univariate_q2():
    # 0.5 * (2 - 1 - log 2)
    val = float(kl_gmrf(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[2.0]])).data)
    assert val == pytest.approx(0.5 * (1 - math.log(2)), abs=1e-12)
    assert val == pytest.approx(0.15343, abs=1e-5)


def test_kl_k2_shift():
    Q = np.array([[1.1, -1.0], [-1.0, 1.1]])
    val = float(kl_gmrf(np.zeros((2, 1)), np.zeros((2, 1)), Q).data)
    assert val == pytest.approx(0.5 * (2.2 - 2 - math.log(0.21)), abs=1e-12)
    assert val == pytest.approx(0.8803, abs=1e-4)


def test_kl_accepts_precision_matrix():
    A = np.array([[0, 1.0], [1.0, 0]])
    pm = precision_matrix(A, PriorSpec("l-shift", 0.1))
    a = kl_gmrf(np.ones((2, 3)), np.zeros((2, 3)), pm).data
    b = kl_gmrf(np.ones((2, 3)), np.zeros((2, 3)), pm.Q).data
    assert a == pytest.approx(b)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), C=st.integers(1, 6), dz=st.integers(1, 3))
def test_kl_matches_dense_formula(seed, C, dz):
    rng = np.random.default_rng(seed)
    Q = random_precision(rng, C)
    mu, ls = rng.normal(size=(C, dz)), rng.uniform(-1, 1, (C, dz))
    val = float(kl_gmrf(mu, ls, Q).data)
    assert val == pytest.approx(kl_dense(mu, ls, Q), rel=1e-9, abs=1e-10)
    assert val >= -1e-9


def test_kl_monte_carlo_small():
    rng = np.random.default_rng(5)
    Q = random_precision(rng, 4)
    mu, ls = rng.normal(size=(4, 2)) * 0.5, rng.uniform(-0.5, 0.5, (4, 2))
    closed = float(kl_gmrf(mu, ls, Q).data)
    assert kl_monte_carlo(mu, ls, Q, 200_000, rng) == pytest.approx(closed, rel=0.02)


def test_paper_sign_differs_by_logdet():
    rng = np.random.default_rng(0)
    Q = random_precision(rng, 3)
    mu, ls = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)) * 0.1
    a = float(kl_gmrf(mu, ls, Q).data)
    b = float(kl_gmrf(mu, ls, Q, paper_sign=True).data)
    assert b - a == pytest.approx(2 * np.linalg.slogdet(Q)[1], rel=1e-10)


def test_kl_batched_shapes_and_gradient():
    rng = np.random.default_rng(1)
    Q = np.stack([[random_precision(rng, 3) for _ in range(4)] for _ in range(2)])
    store = tn.ParameterStore()
    mu = store.add("mu", rng.normal(size=(2, 4, 3, 2)))
    ls = store.add("ls", rng.normal(size=(2, 4, 3, 2)) * 0.3)
    out = kl_gmrf(mu, ls, Q)
    assert out.shape == (2, 4)
    assert tn.grad_check(lambda: tn.tsum(kl_gmrf(mu, ls, Q)), store) < 1e-6


def test_kl_shape_error():
    with pytest.raises(tn.ShapeError):
        kl_gmrf(np.zeros((3, 2)), np.zeros((3, 2)), np.eye(4))


def test_nll_clamps_and_counts():
    before = clamp_events["nll"]
    with pytest.warns(UserWarning):
        v = classification_nll(np.array([0.0, 1.0]), np.array([1, 0]))
    assert np.all(np.isfinite(v)) and clamp_events["nll"] == before + 2
    assert classification_nll(0.5, 1) == pytest.approx(math.log(2))


def test_combine_lambda_zero_is_nll():
    nll = tn.Tensor(np.array([0.3, 0.5]))
    kl = tn.Tensor(np.ones((2, 4)) * 7)
    total, br = combine(nll, kl, 0.0)
    assert float(total.data) == br.nll == pytest.approx(0.4)
    total, br = combine(nll, kl, 0.5)
    assert br.total == pytest.approx(0.4 + 0.5 * 28)
    assert list(br.kl) == [7.0] * 4
    with pytest.raises(ValueError):
        combine(nll, kl, -1.0)


def test_combine_without_prior():
    total, br = combine(tn.Tensor(np.array([1.0, 3.0])), None, 0.6)
    assert br.total == 2.0 and np.all(br.kl == 0)
    rec = br.as_record(3, fold=1)
    assert rec == {"step": 3, "nll": 2.0, "kl": [0.0] * 4, "total": 2.0, "fold": 1}


def test_combine_exposes_addends():
    total, _ = combine(tn.Tensor(np.array([0.3, 0.5])), tn.Tensor(np.ones((2, 4))), 0.5)
    assert total.terms == (pytest.approx(0.4), pytest.approx(2.0))
    assert sum(total.terms) == pytest.approx(float(total.data))
