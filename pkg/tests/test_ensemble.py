import math

import numpy as np
import pytest

from abnnlab.ensemble import (
    EnsembleConfig,
    bundle_from_probs,
    entropy,
    export_logits_csv,
    mutual_information,
    predict,
)
from abnnlab.model import ArchSpec, HiddenSpec, build, convert_to_abnn
from abnnlab.train import ModeSet
from oracles import entropy_nats

SPEC = ArchSpec(2, [HiddenSpec(8, "batch"), HiddenSpec(8, "layer")], 3)
X = np.random.default_rng(0).normal(size=(10, 2))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_single_noise_free_member_is_its_softmax():
    net = convert_to_abnn(build(SPEC, 0), alpha=0.0)
    bundle = predict(ModeSet([net]), X, EnsembleConfig(L=1))
    np.testing.assert_array_equal(bundle.mean_probs, _softmax(net.predict_logits(X)))
    assert bundle.n_members == 1


def test_identical_members_average_to_any_member():
    net = convert_to_abnn(build(SPEC, 0), alpha=0.0)
    bundle = predict([net, net.clone(), net.clone()], X, EnsembleConfig(L=2))
    for p in bundle.member_probs:
        np.testing.assert_allclose(bundle.mean_probs, p, rtol=0, atol=1e-15)
    _, _, epi = mutual_information(bundle)
    assert np.all(np.abs(epi) <= 1e-12)


def test_mean_of_opposite_members():
    b = bundle_from_probs([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert b.mean_probs.tolist() == [[0.5, 0.5]]


def test_noise_draws_are_reproducible_and_distinct():
    net = convert_to_abnn(build(SPEC, 1), alpha=0.5)
    a = predict([net], X, EnsembleConfig(L=3, seed=7))
    b = predict([net.clone()], X, EnsembleConfig(L=3, seed=7))
    assert a.member_logits.tobytes() == b.member_logits.tobytes()
    assert not np.array_equal(a.member_logits[0], a.member_logits[1])


def test_member_ordering_is_mode_major():
    nets = [convert_to_abnn(build(SPEC, s), alpha=0.0) for s in (0, 1)]
    b = predict(nets, X, EnsembleConfig(L=2))
    np.testing.assert_array_equal(b.member_logits[2], nets[1].predict_logits(X))


def test_predict_validates_inputs():
    with pytest.raises(ValueError):
        predict([], X, EnsembleConfig())
    with pytest.raises(ValueError):
        predict([build(SPEC, 0)], np.zeros((3, 5)), EnsembleConfig())
    with pytest.raises(ValueError):
        EnsembleConfig(L=0)


# -- entropy / MI -----------------------------------------------------------------


def test_entropy_examples():
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert math.isclose(entropy([0.25] * 4), math.log(4), rel_tol=1e-15)
    assert round(entropy([0.75, 0.25]), 6) == 0.562335
    assert math.isclose(entropy([0.75, 0.25]), entropy_nats([0.75, 0.25]), rel_tol=1e-15)


def test_entropy_rejects_non_distributions():
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy([1.5, -0.5])


def test_maximal_disagreement():
    total, alea, epi = mutual_information(bundle_from_probs([[[1.0, 0.0]], [[0.0, 1.0]]]))
    assert math.isclose(total[0], math.log(2), rel_tol=1e-15)
    assert alea[0] == 0.0
    assert math.isclose(epi[0], math.log(2), rel_tol=1e-15)


def test_epistemic_hand_example():
    _, _, epi = mutual_information(bundle_from_probs([[[0.9, 0.1]], [[0.7, 0.3]]]))
    expected = entropy_nats([0.8, 0.2]) - (entropy_nats([0.9, 0.1]) + entropy_nats([0.7, 0.3])) / 2
    assert math.isclose(epi[0], expected, rel_tol=1e-12)
    # 0.500402 - (0.325083 + 0.610864) / 2
    assert round(expected, 6) == 0.032429


def test_decomposition_on_random_bundles():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k, n, c = rng.integers(1, 6), rng.integers(1, 8), rng.integers(2, 6)
        b = bundle_from_probs(rng.dirichlet(np.ones(c) * 0.5, size=(k, n)))
        total, alea, epi = mutual_information(b)
        assert np.all(np.abs(total - (alea + epi)) <= 1e-12)
        assert np.all(epi >= -1e-12)


def test_logits_csv(tmp_path):
    net = convert_to_abnn(build(SPEC, 0), alpha=0.1)
    b = predict([net], X[:2], EnsembleConfig(L=2))
    export_logits_csv(b, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "sample_id,member_id,logit_0,logit_1,logit_2"
    assert len(lines) == 1 + 2 * 2
    assert float(lines[1].split(",")[2]) == b.member_logits[0, 0, 0]
