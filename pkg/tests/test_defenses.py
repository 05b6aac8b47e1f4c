import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advbreak import tensor as T
from advbreak.defenses import (LN2, DefensePipeline, Detector, NotCalibrated, calibrate_threshold, defend_classify,
                               detector_score, jsd, jsd_tensor, magnet_pipeline, write_calibration_csv)
from advbreak.models import Identity, LinearClassifier

from gradcheck import check


class ShiftAE(Identity):
    """Reconstruction = x + delta, so the recon score is delta**2."""

    def __init__(self, delta):
        self.delta = delta

    def __call__(self, x):
        return T.as_tensor(x) + self.delta

    def reconstruct(self, x, batch_size=0):
        return np.asarray(x) + self.delta


def linear(k=3, d=4, seed=0):
    r = np.random.default_rng(seed)
    return LinearClassifier.from_weights(r.standard_normal((d, k)), r.standard_normal(k))


def kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def test_jsd_direct_summation_oracle():
    p, q = [0.5, 0.5], [0.25, 0.75]
    m = [(a + b) / 2 for a, b in zip(p, q)]
    expected = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    assert abs(jsd(p, q) - expected) < 1e-12
    assert abs(expected - 0.0338220756) < 1e-9


def test_jsd_extremes():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0
    assert abs(jsd([1, 0], [0, 1]) - math.log(2)) < 1e-12


def test_jsd_rejects_non_distributions():
    with pytest.raises(ValueError):
        jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        jsd([-0.1, 1.1], [0.5, 0.5])


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(0, 1)), arrays(np.float64, 5, elements=st.floats(0, 1)))
def test_jsd_symmetric_and_bounded(a, b):
    if a.sum() < 1e-6 or b.sum() < 1e-6:
        return
    p, q = a / a.sum(), b / b.sum()
    v = jsd(p, q)
    assert 0 <= v <= LN2 + 1e-9
    assert abs(v - jsd(q, p)) < 1e-12


def test_jsd_rows_and_tensor_version(rng):
    p = rng.dirichlet(np.ones(4), size=6)
    q = rng.dirichlet(np.ones(4), size=6)
    rows = jsd(p, q)
    np.testing.assert_allclose(rows, [jsd(a, b) for a, b in zip(p, q)])
    np.testing.assert_allclose(jsd_tensor(T.Tensor(p), T.Tensor(q)).data, rows, atol=1e-12)
    za, zb = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    err = check(lambda a, b: T.sum(jsd_tensor(T.softmax(a, temperature=2.0), T.softmax(b, temperature=2.0))),
                [za, zb])
    assert err < 1e-4


def test_recon_score_of_identity_is_zero(rng):
    x = rng.uniform(0, 1, (3, 4))
    d = Detector("recon_error", Identity())
    np.testing.assert_array_equal(d.scores(x), 0)
    assert detector_score(Detector("recon_error", ShiftAE(0.1)), x[0]) == pytest.approx(0.01)


def test_jsd_score_of_identity_is_zero(rng):
    d = Detector("jsd", Identity(), temperature=10.0, classifier=linear())
    assert np.all(np.abs(d.scores(rng.uniform(0, 1, (5, 4)))) < 1e-12)


def test_detector_validation():
    with pytest.raises(ValueError):
        Detector("jsd", Identity(), temperature=None, classifier=linear())
    with pytest.raises(ValueError):
        Detector("jsd", Identity(), temperature=0.0, classifier=linear())
    with pytest.raises(ValueError):
        Detector("oracle", Identity())
    with pytest.raises(ValueError):
        Detector("recon_error", Identity(), threshold=-1.0)


def test_score_tensor_matches_numpy_scores(rng):
    x = rng.uniform(0, 1, (4, 4))
    for d in (Detector("recon_error", ShiftAE(0.05)),
              Detector("jsd", ShiftAE(0.3), temperature=10.0, classifier=linear())):
        with T.no_grad():
            np.testing.assert_allclose(d.score_tensor(T.Tensor(x)).data, d.scores(x), rtol=1e-6, atol=1e-12)


# --- calibration ------------------------------------------------------------


def sort_oracle(scores, fpr):
    s = sorted(scores)
    k = int(fpr * len(s) + 1e-9)
    return s[len(s) - 1 - k]


def test_calibration_examples():
    assert calibrate_threshold(np.arange(1, 1001), 0.01) == 990
    assert np.sum(np.arange(1, 1001) > 990) == 10
    assert calibrate_threshold([1, 2], 0.5) == 1
    assert calibrate_threshold([3.0] * 50, 0.1) == 3.0


def test_calibration_errors():
    with pytest.raises(ValueError):
        calibrate_threshold([], 0.1)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            calibrate_threshold([1, 2, 3], bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=200), st.floats(0.001, 0.999))
def test_threshold_is_largest_rate_within_budget(scores, fpr):
    tau = calibrate_threshold(scores, fpr)
    s = np.asarray(scores)
    assert tau == sort_oracle(scores, fpr)
    assert np.mean(s > tau) <= fpr + 1e-12
    smaller = s[s < tau]
    if len(smaller):  # lowering tau to the next observed score would exceed the budget
        assert np.mean(s > smaller.max()) > fpr


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=100),
       st.floats(0.001, 0.99), st.floats(0.001, 0.99))
def test_threshold_monotone_in_fpr(scores, a, b):
    lo, hi = sorted((a, b))
    assert calibrate_threshold(scores, lo) >= calibrate_threshold(scores, hi)


# --- pipeline ---------------------------------------------------------------


def pipeline(deltas, clf=None, seed=0):
    clf = clf or linear()
    aes = [ShiftAE(d) for d in deltas]
    return DefensePipeline([Detector("recon_error", a) for a in aes], aes, clf, seed)


def test_pipeline_needs_reformer_and_calibration(rng):
    with pytest.raises(ValueError):
        DefensePipeline([], [], linear())
    p = pipeline([0.1])
    with pytest.raises(NotCalibrated):
        defend_classify(p, rng.uniform(0, 1, 4))


def test_forced_detection_and_tie_rule():
    p = pipeline([0.1])
    p.detectors[0].threshold = 0.01 - 1  # score 0.01 = tau + 1
    v = defend_classify(p, np.full(4, 0.5))
    assert v.detected and v.detector_index == 0 and v.final_class is None
    p.detectors[0].threshold = float(p.detectors[0].scores(np.full((1, 4), 0.5))[0])
    v = defend_classify(p, np.full(4, 0.5))  # score == tau is benign
    assert not v.detected and v.final_class is not None


def test_defend_classify_deterministic_given_seed(rng):
    clf = linear()
    p = pipeline([0.0, 0.2, 0.4, -0.3], clf)
    for d in p.detectors:
        d.threshold = 1.0
    x = rng.uniform(0, 1, 4)
    a = [defend_classify(p, x, np.random.default_rng(s)).final_class for s in range(20)]
    b = [defend_classify(p, x, np.random.default_rng(s)).final_class for s in range(20)]
    assert a == b
    fired, classes = p.classify(np.repeat(x[None], 20, 0), [np.random.default_rng(s) for s in range(20)])
    assert list(classes) == a and np.all(fired == -1)


def test_reformer_choice_is_uniform():
    p = pipeline([0.0] * 4)
    picks = [np.random.default_rng([0, i]).integers(4) for i in range(4000)]
    counts = np.bincount(picks, minlength=4)
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)
    assert len(p.reformers) == 4


def test_zero_detectors_identity_reformer_matches_classifier(rng):
    clf = linear(k=5, d=6)
    p = DefensePipeline([], [Identity()], clf)
    x = rng.uniform(0, 1, (200, 6))
    fired, classes = p.classify(x, range(200))
    np.testing.assert_array_equal(classes, clf.predict(x))
    assert p.rejection_rate(x) == 0


def test_detection_uses_raw_input():
    clf = linear()
    p = pipeline([0.5], clf)
    p.detectors[0].threshold = 0.3  # score 0.25 passes; the reformed input is never scored
    assert not defend_classify(p, np.zeros(4)).detected


def test_calibrate_rows_and_csv(tmp_path, rng):
    p = pipeline([0.1, 0.2])
    val = rng.uniform(0, 1, (1000, 4))
    rows = p.calibrate(val, 0.01)
    assert [r["detector"] for r in rows] == [0, 1] and all(r["empirical_fpr"] <= 0.01 for r in rows)
    write_calibration_csv(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "detector,kind,T,tau,empirical_fpr"


class NoisyAE(Identity):
    def __init__(self, seed):
        self.seed = seed

    def reconstruct(self, x, batch_size=0):
        x = np.asarray(x)
        noise = np.random.default_rng([self.seed, len(x)]).standard_normal(x.shape) * 0.1
        return x + noise * x.sum(axis=tuple(range(1, x.ndim)), keepdims=True)


def test_shared_budget_bounds_union_rate(rng):
    aes = [NoisyAE(s) for s in range(8)]
    p = DefensePipeline([Detector("recon_error", a) for a in aes], aes, linear())
    val = rng.uniform(0, 1, (2000, 4))
    p.calibrate(val, 0.01, budget="per_detector")
    union_independent = p.rejection_rate(val)
    p.calibrate(val, 0.01, budget="shared")
    union_shared = p.rejection_rate(val)
    assert union_shared <= 0.01 < union_independent
    assert union_shared > 0.005
    with pytest.raises(ValueError):
        p.calibrate(val, 0.01, budget="global")


def test_magnet_pipeline_layout():
    clf = linear()
    aes = [ShiftAE(0.1), ShiftAE(0.2)]
    p = magnet_pipeline(clf, aes, seed=3, jsd_temperatures=(10, 40))
    assert [d.kind for d in p.detectors] == ["recon_error", "recon_error", "jsd", "jsd"]
    assert [d.temperature for d in p.detectors[2:]] == [10.0, 40.0]
    assert p.reformers == aes and p.seed == 3
