from dataclasses import replace

import numpy as np
import pytest

from abnnlab.config import GradVarConfig, parse
from abnnlab.data import Split, gen_two_moons
from abnnlab.diagnostics import PooledVariance, gradient_variance, gradient_variance_suite, stability_protocol
from abnnlab.model import ArchSpec, HiddenSpec

SPEC = ArchSpec(2, [HiddenSpec(12, "batch"), HiddenSpec(10, "layer")], 2)


@pytest.fixture(scope="module")
def moons():
    return gen_two_moons(300, 0.2, seed=0)


def test_pooled_variance_matches_two_pass():
    rng = np.random.default_rng(0)
    chunks = [rng.normal(loc=rng.uniform(-5, 5), size=rng.integers(1, 50)) for _ in range(30)]
    acc = PooledVariance()
    for c in chunks:
        acc.update(c)
    flat = np.concatenate(chunks)
    assert abs(acc.variance - np.mean((flat - flat.mean()) ** 2)) < 1e-12
    assert np.isnan(PooledVariance().variance)


def test_group_membership(moons):
    widths = 2 * 12 + 12 * 10 + 10 * 2
    single = gradient_variance("single", moons, SPEC, 2, 0, 32)
    vi = gradient_variance("vi", moons, SPEC, 2, 0, 32)
    abnn = gradient_variance("abnn", moons, SPEC, 2, 0, 32)
    assert single.entries["weights"] == widths and single.designated_group == "weights"
    assert vi.entries["vi_mu"] == widths and vi.designated_group == "vi_mu"
    assert abnn.entries["norm"] == 2 * (12 + 10) and abnn.designated_group == "norm"
    assert all(v >= 0 for r in (single, vi, abnn) for v in r.variances.values())


def test_noise_free_abnn_matches_the_single_network(moons):
    single = gradient_variance("single", moons, SPEC, 5, 1, 32)
    abnn = gradient_variance("abnn", moons, SPEC, 5, 1, 32, alpha=0.0)
    assert abnn.variances["norm"] == single.variances["norm"]


def test_reports_are_deterministic(moons):
    a = gradient_variance("vi", moons, SPEC, 4, 2, 32)
    b = gradient_variance("vi", moons, SPEC, 4, 2, 32)
    assert a.to_dict() == b.to_dict()


def test_along_trajectory_changes_the_measurement(moons):
    fixed = gradient_variance("single", moons, SPEC, 6, 0, 32)
    moving = gradient_variance("single", moons, SPEC, 6, 0, 32, along_trajectory=True, lr=0.5)
    assert moving.variance != fixed.variance and moving.protocol["along_trajectory"]


def test_non_finite_gradient_names_the_step(moons):
    x = moons.train.x.copy()
    x[:] = np.nan
    bad = replace(moons, train=Split(x, moons.train.y))
    with pytest.raises(FloatingPointError, match="step 0"):
        gradient_variance("single", bad, SPEC, 2, 0, 32)


def test_unknown_kind(moons):
    with pytest.raises(ValueError):
        gradient_variance("laplace", moons, SPEC, 1, 0)


def _tiny_config(**gradvar):
    doc = {
        "dataset": {"kind": "two_moons", "n": 120, "noise_std": 0.2, "seed": 0},
        "arch": SPEC.to_dict(),
        "pretrain": {"epochs": 3, "batch_size": 20, "lr": 0.05, "seed": 0},
        "finetune": {"epochs": 1, "batch_size": 20, "lr": 0.01, "M": 2, "seed": 0},
        "ensemble": {"L": 2, "seed": 0},
    }
    if gradvar:
        doc["gradvar"] = gradvar
    return parse(doc)


def test_suite_reports_every_kind_and_seed(moons):
    cfg = _tiny_config(n_steps=2, batch_size=16, seeds=[0, 1])
    out = gradient_variance_suite(cfg, moons)
    assert [(r["seed"], r["kind"]) for r in out["runs"]] == [
        (0, "single"), (0, "vi"), (0, "abnn"), (1, "single"), (1, "vi"), (1, "abnn")]
    assert out["n_seeds"] == 2 and out["abnn_start"] == "checkpoint"
    assert out["runs"][2]["protocol"]["from_checkpoint"] and not out["runs"][1]["protocol"]["from_checkpoint"]
    assert GradVarConfig().abnn_start == "checkpoint"


def test_stability_with_identical_seeds_has_zero_spread():
    report = stability_protocol("multi-ckpt-abnn", 3, _tiny_config(), seeds=[4, 4, 4])
    assert all(v == 0.0 for v in report.std.values())


def test_stability_is_reproducible():
    cfg = _tiny_config()
    a = stability_protocol("one-ckpt-multi-abnn", 3, cfg, seeds=[0, 1, 2])
    b = stability_protocol("one-ckpt-multi-abnn", 3, cfg, seeds=[0, 1, 2])
    assert a.to_json() == b.to_json()
    assert all(v >= 0 for v in a.std.values())


def test_stability_preconditions():
    with pytest.raises(ValueError):
        stability_protocol("single", 2, _tiny_config())
    with pytest.raises(ValueError):
        stability_protocol("bagging", 3, _tiny_config())
