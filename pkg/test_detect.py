#!/usr/bin/env python3
"""
Tests for the EWMA, PCA and KOAD congestion detectors
"""

import math

import numpy as np
import pytest

from detect import (BUILTIN_DETECTORS, FEATURE_DIM, VERDICT_COLUMNS, DetectorError, EwmaDetector, EwmaState,
                    FeatureVector, KoadDetector, KoadState, PcaDetector, VerdictLevel, classify, ewma_update,
                    gaussian_kernel, koad_projection_error, koad_update, pca_fit, pca_score)
from metrics import DelayRecord


def fv(mean_delay=0.01, jitter=0.001, loss=0.0, throughput=1e6) -> FeatureVector:
    return FeatureVector(mean_delay, jitter, loss, throughput)


def line_window(n: int = 20):
    """Training windows that lie on one line in feature space"""
    return [fv(0.01 + 0.001 * t, 0.002 + 0.0002 * t, 0.01 * t, 1e6 + 1e4 * t) for t in range(n)]


# -- features and classification -------------------------------------------

def test_feature_vector_from_window():
    records = [DelayRecord("m", k, k * 1_000_000 - 500_000, k * 1_000_000, 1000) for k in range(3)]
    x = FeatureVector.from_window(records, lost_frames=1)
    assert x.mean_delay == pytest.approx(0.0005)
    assert x.delay_jitter == pytest.approx(0.0)
    assert x.loss_fraction == pytest.approx(0.25)
    assert x.throughput == pytest.approx(8e6)


def test_feature_vector_rejects_bad_values():
    with pytest.raises(DetectorError):
        fv(mean_delay=math.nan)
    with pytest.raises(DetectorError):
        fv(loss=1.5)
    with pytest.raises(DetectorError):
        FeatureVector.from_window([])


def test_classify_levels():
    assert classify(0.1, 0.2, 0.5).level == VerdictLevel.NORMAL
    assert classify(0.2, 0.2, 0.5).level == VerdictLevel.NORMAL
    assert classify(0.3, 0.2, 0.5).level == VerdictLevel.ORANGE
    assert classify(0.6, 0.2, 0.5).level == VerdictLevel.RED
    assert classify(0.6, 0.2, 0.5).thresholds == (0.2, 0.5)


def test_classify_is_monotone_in_score():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        orange, red = sorted(rng.uniform(0.0, 10.0, 2))
        scores = np.sort(rng.uniform(0.0, 12.0, 5))
        levels = [classify(s, orange, red).level.severity for s in scores]
        assert levels == sorted(levels)


# -- EWMA --------------------------------------------------------------------

def test_ewma_warmup_is_normal():
    state = EwmaState()
    rng = np.random.default_rng(3)
    for _ in range(9):
        verdict = ewma_update(state, fv(mean_delay=float(rng.uniform(0.0, 10.0))))
        assert verdict.level == VerdictLevel.NORMAL


def test_ewma_constant_stream_stays_normal():
    state = EwmaState()
    for _ in range(200):
        assert ewma_update(state, fv()).level == VerdictLevel.NORMAL


def test_ewma_step_change_turns_red():
    state = EwmaState()
    for k in range(50):
        ewma_update(state, fv(mean_delay=0.01 + (0.001 if k % 2 else -0.001)))
    sigma = float(state.sigma[0])
    assert sigma > 0
    jump = float(state.mean[0]) + 10 * sigma
    levels = [ewma_update(state, fv(mean_delay=jump)).level for _ in range(3)]
    assert VerdictLevel.RED in levels


def test_ewma_parameter_validation():
    with pytest.raises(DetectorError):
        EwmaState(alpha=0.0)
    with pytest.raises(DetectorError):
        EwmaState(kappa=1.0)


# -- PCA ---------------------------------------------------------------------

def test_pca_rank_one_training_data():
    state = pca_fit(line_window())
    assert state.k == 1
    assert float(state.training_residuals.max()) < 1e-20
    assert state.flagged == ()


def test_pca_isotropic_noise_keeps_every_component():
    rng = np.random.default_rng(42)
    window = [FeatureVector(float(a), float(b), float(c), float(d))
              for a, b, c, d in zip(rng.standard_normal(2000), rng.standard_normal(2000),
                                    rng.uniform(0.0, 1.0, 2000), rng.standard_normal(2000))]
    state = pca_fit(window, variance_target=0.95)
    assert state.k == FEATURE_DIM
    data = np.vstack([x.as_array() for x in window])
    oracle = np.sort(np.linalg.eigvalsh(np.corrcoef(data.T)))[::-1]
    np.testing.assert_allclose(state.eigenvalues, oracle, atol=1e-9)
    np.testing.assert_allclose(state.basis.T @ state.basis, np.eye(state.k), atol=1e-9)


def test_pca_window_too_short():
    with pytest.raises(DetectorError):
        pca_fit(line_window(2 * FEATURE_DIM - 1))


def test_pca_zero_variance_feature_is_flagged():
    window = [fv(0.01 + 0.001 * (t % 3), 0.001 * (t % 5), 0.0, 1e6 + 100.0 * t) for t in range(20)]
    state = pca_fit(window)
    assert state.flagged == ("loss_fraction",)
    assert state.scale[2] == 1.0


def test_pca_mean_scores_zero():
    state = pca_fit(line_window())
    verdict = pca_score(state, FeatureVector.from_array(state.mean))
    assert verdict.score == pytest.approx(0.0, abs=1e-20)
    assert verdict.level == VerdictLevel.NORMAL


def test_pca_point_in_subspace_scores_zero():
    state = pca_fit(line_window())
    direction = state.basis[:, 0] * state.scale
    inside = FeatureVector.from_array(state.mean + 3.0 * direction)
    assert pca_score(state, inside).score < 1e-9


def test_pca_orthogonal_offset_is_red():
    state = pca_fit(line_window())
    basis = state.basis[:, 0]
    e = np.array([1.0, -1.0, 0.0, 0.0])
    u = e - basis * float(basis @ e)
    u /= np.linalg.norm(u)
    x = FeatureVector.from_array(state.mean + state.scale * (10.0 * u))
    verdict = pca_score(state, x)
    assert verdict.score == pytest.approx(100.0, rel=1e-9)
    assert verdict.level == VerdictLevel.RED
    assert pca_score(state, x).score == verdict.score


def test_pca_training_points_within_limit():
    rng = np.random.default_rng(8)
    window = [fv(float(rng.uniform(0.01, 0.02)), float(rng.uniform(0, 0.002)),
                 float(rng.uniform(0, 0.1)), float(rng.uniform(9e5, 1.1e6))) for _ in range(40)]
    state = pca_fit(window, variance_target=0.5)
    worst = float(state.training_residuals.max())
    for x in window:
        assert pca_score(state, x).score <= worst + 1e-12


# -- KOAD --------------------------------------------------------------------

def unit_koad(**params) -> KoadState:
    return KoadState(feature_scale=np.ones(FEATURE_DIM), **params)


def test_koad_first_observation_joins_dictionary():
    state = unit_koad()
    verdict = koad_update(state, fv())
    assert verdict.level == VerdictLevel.NORMAL
    assert len(state.dictionary) == 1


def test_koad_known_point_scores_zero():
    state = unit_koad()
    koad_update(state, fv(0.0, 0.0, 0.0, 0.0))
    verdict = koad_update(state, fv(0.0, 0.0, 0.0, 0.0))
    assert verdict.score == pytest.approx(0.0, abs=1e-9)
    assert verdict.level == VerdictLevel.NORMAL


def test_koad_far_point_is_red():
    state = unit_koad()
    for a in (0.0, 0.5, 1.0):
        state.dictionary.append(np.array([a, 0.0, 0.0, 0.0]))
    verdict = koad_update(state, fv(100.0, 0.0, 0.0, 0.0))
    assert verdict.score == pytest.approx(1.0, abs=1e-9)
    assert verdict.level == VerdictLevel.RED


def test_koad_matches_brute_force_projection():
    rng = np.random.default_rng(5)
    for _ in range(200):
        dictionary = [rng.normal(0.0, 1.0, FEATURE_DIM) for _ in range(3)]
        z = rng.normal(0.0, 1.0, FEATURE_DIM)
        gram = np.array([[gaussian_kernel(a, b, 1.0) for b in dictionary] for a in dictionary])
        k_vec = np.array([gaussian_kernel(d, z, 1.0) for d in dictionary])
        expected = 1.0 - float(k_vec @ np.linalg.solve(gram, k_vec))
        assert koad_projection_error(dictionary, z, 1.0) == pytest.approx(min(1.0, max(0.0, expected)), abs=1e-9)


def test_koad_projection_error_bounds():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        size = int(rng.integers(1, 6))
        dictionary = [rng.normal(0.0, 2.0, FEATURE_DIM) for _ in range(size)]
        z = rng.normal(0.0, 2.0, FEATURE_DIM)
        delta = koad_projection_error(dictionary, z, float(rng.uniform(0.2, 3.0)))
        assert -1e-9 <= delta <= 1.0 + 1e-9


def test_koad_stream_scores_stay_in_unit_interval():
    rng = np.random.default_rng(10_000)
    state = unit_koad(nu1=0.3, nu2=0.6, max_dictionary=10)
    levels = set()
    for _ in range(10_000):
        delay, jitter, throughput = rng.uniform(0.0, 3.0, 3)
        verdict = koad_update(state, fv(delay, jitter, float(rng.uniform(0.0, 1.0)), throughput))
        assert -1e-9 <= verdict.score <= 1.0 + 1e-9
        assert len(state.dictionary) <= 10
        levels.add(verdict.level)
    assert state.evictions > 0
    assert VerdictLevel.NORMAL in levels


def test_koad_dictionary_cap_evicts_oldest():
    state = unit_koad(nu1=0.5, nu2=0.9, sparsify=0.0, max_dictionary=3)
    for k in range(10):
        assert koad_update(state, fv(0.7 * k, 0.0, 0.0, 0.0)).level == VerdictLevel.NORMAL
        assert len(state.dictionary) <= 3
    assert state.evictions == 7
    assert state.dictionary[0][0] == pytest.approx(0.7 * 7)


@pytest.mark.parametrize("params", [
    {"sigma": 0.0},
    {"nu1": 0.3, "nu2": 0.3},
    {"sparsify": 0.1},
    {"max_dictionary": 0},
    {"feature_scale": [1.0, 1.0]},
])
def test_koad_parameter_validation(params):
    with pytest.raises(DetectorError):
        KoadState(**params)


# -- detector interface -------------------------------------------------------

def test_builtin_detector_names():
    assert set(BUILTIN_DETECTORS) == {"ewma", "pca", "koad"}


def test_unknown_parameters_rejected():
    with pytest.raises(DetectorError):
        EwmaDetector({"alpah": 0.1})
    with pytest.raises(DetectorError):
        PcaDetector({"training_windows": 3})


def test_pca_detector_trains_then_scores():
    detector = PcaDetector({"training_windows": 20})
    for x in line_window():
        assert detector.observe(x).level == VerdictLevel.NORMAL
    assert detector.state is not None
    assert detector.observe(FeatureVector.from_array(detector.state.mean)).level == VerdictLevel.NORMAL


def test_detectors_are_deterministic():
    rng = np.random.default_rng(21)
    stream = [fv(float(rng.uniform(0.001, 0.05)), float(rng.uniform(0, 0.01)),
                 float(rng.uniform(0, 0.2)), float(rng.uniform(5e5, 2e6))) for _ in range(60)]
    for cls in BUILTIN_DETECTORS.values():
        a, b = cls(), cls()
        assert [a.observe(x) for x in stream] == [b.observe(x) for x in stream]
        assert len(a.history) == len(stream)


def test_verdict_history_and_export(tmp_path):
    detector = KoadDetector({"feature_scale": [1.0, 1.0, 1.0, 1.0]})
    detector.observe(fv(0.0, 0.0, 0.0, 0.0), closed_ns=1_000)
    detector.observe(fv(50.0, 0.0, 0.0, 0.0), closed_ns=2_500)
    assert [row.window_index for row in detector.history] == [0, 1]
    assert detector.first_red_ns() == 2_500
    lines = detector.export_verdicts(tmp_path / "verdicts.csv").read_text().splitlines()
    assert lines[0] == ",".join(VERDICT_COLUMNS)
    assert lines[1].endswith("Normal,1.000")
    assert lines[2].endswith("Red,2.500")
