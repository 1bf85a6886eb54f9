import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sfot import OTSequenceModel
from sfot.estimator import check_sequences

PAIRS_X = [[4, 5, 6], [6, 5], [7, 4, 4]]


def small(**kw):
    args = dict(embed_dim=8, hidden_size=8, batch_size=3, max_steps=5, epochs=10, ipot_iters=50)
    args.update(kw)
    return OTSequenceModel(**args)


def test_params_round_trip():
    est = small(lam=0.3, cost="vanilla")
    params = est.get_params()
    assert params["lam"] == 0.3 and params["cost"] == "vanilla"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lam=0.0)
    assert est.lam == 0.0


def test_fit_conditional_and_predict():
    est = small().fit(PAIRS_X, PAIRS_X)
    assert est.n_steps_ == 5 and len(est.log_) == 5
    out = est.predict(PAIRS_X)
    assert len(out) == 3 and all(isinstance(t, int) for seq in out for t in seq)
    assert 0.0 <= est.score(PAIRS_X, PAIRS_X) <= 1.0
    lp = est.log_prob(PAIRS_X, PAIRS_X)
    assert lp.shape == (3,) and np.all(lp <= 0)


def test_fit_unconditional():
    est = small(objective="mle").fit(PAIRS_X)
    assert not est.conditional_
    assert len(est.predict(4, max_len=6)) == 4


def test_fit_is_deterministic():
    a = small(seed=2).fit(PAIRS_X, PAIRS_X)
    b = small(seed=2).fit(PAIRS_X, PAIRS_X)
    assert a.log_ == b.log_


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(PAIRS_X)


@pytest.mark.parametrize("X", [[], [[]], [[-1, 4]]])
def test_invalid_sequences(X):
    with pytest.raises(ValueError):
        check_sequences(X)


def test_vocab_too_small():
    with pytest.raises(ValueError, match="vocab_size"):
        small(vocab_size=6).fit(PAIRS_X, PAIRS_X)


def test_length_mismatch():
    with pytest.raises(ValueError, match="lengths"):
        small().fit(PAIRS_X, PAIRS_X[:2])
