#!/usr/bin/env python3
"""
Congestion Detectors for the Smart Meter Network Simulator

Online classifiers over per-window delivery features. Each detector turns a
FeatureVector into a Normal/Orange/Red verdict:

* EWMA threshold on mean delay (baseline)
* PCA subspace method scoring the squared prediction error
* KOAD, the kernel projection error onto a sparse dictionary
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from metrics import DelayRecord, export_table, format_us, percentile

logger = logging.getLogger(__name__)

FEATURE_NAMES: Tuple[str, ...] = ("mean_delay", "delay_jitter", "loss_fraction", "throughput")
FEATURE_DIM = len(FEATURE_NAMES)
VERDICT_COLUMNS = ["window_index", "score", "level", "closed_us"]


class DetectorError(ValueError):
    """Raised for invalid detector parameters or unmet preconditions"""


@dataclass(frozen=True)
class FeatureVector:
    """Observation aggregated over one feedback window"""
    mean_delay: float
    delay_jitter: float
    loss_fraction: float
    throughput: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise DetectorError(f"non-finite feature in {values.tolist()}")
        if not 0.0 <= self.loss_fraction <= 1.0:
            raise DetectorError(f"loss_fraction {self.loss_fraction} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_delay, self.delay_jitter, self.loss_fraction, self.throughput],
                        dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        return cls(*(float(v) for v in values))

    @classmethod
    def from_window(cls, records: Sequence[DelayRecord], lost_frames: int = 0,
                    sent_frames: Optional[int] = None) -> "FeatureVector":
        """Summarize delivered packets plus the frames declared lost meanwhile"""
        if not records:
            raise DetectorError("empty feedback window")
        delays = np.array([r.delay for r in records])
        sent = sent_frames if sent_frames is not None else len(records) + lost_frames
        loss = min(1.0, lost_frames / sent) if sent else 0.0
        span = (records[-1].recv_ns - records[0].recv_ns) / 1e9
        bits = sum(r.size_bytes for r in records) * 8
        if span > 0:
            # Packets after the first arrived within the span.
            throughput = (bits - records[0].size_bytes * 8) / span
        else:
            throughput = 0.0
        return cls(float(delays.mean()), float(delays.std()), loss, float(throughput))


class VerdictLevel(Enum):
    NORMAL = "Normal"
    ORANGE = "Orange"
    RED = "Red"

    @property
    def severity(self) -> int:
        return {"Normal": 0, "Orange": 1, "Red": 2}[self.value]


@dataclass(frozen=True)
class DetectorVerdict:
    level: VerdictLevel
    score: float
    thresholds: Tuple[float, float]  # (orange, red)


def classify(score: float, orange: float, red: float) -> DetectorVerdict:
    """Red above the upper threshold, Orange above the lower one"""
    if score > red:
        level = VerdictLevel.RED
    elif score > orange:
        level = VerdictLevel.ORANGE
    else:
        level = VerdictLevel.NORMAL
    return DetectorVerdict(level, float(score), (float(orange), float(red)))


# ---------------------------------------------------------------------------
# EWMA
# ---------------------------------------------------------------------------

@dataclass
class EwmaState:
    alpha: float = 0.125
    kappa: float = 3.0
    warmup: int = 10
    min_sigma: float = 1e-9
    count: int = 0
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DetectorError("alpha must be within (0, 1]")
        if self.kappa <= 1:
            raise DetectorError("kappa must exceed 1")
        if self.warmup < 0 or self.min_sigma <= 0:
            raise DetectorError("warmup must be non-negative and min_sigma positive")

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var) if self.var is not None else np.zeros(FEATURE_DIM)


def ewma_update(state: EwmaState, x: FeatureVector) -> DetectorVerdict:
    """Score against the running statistics, then fold x into them"""
    values = x.as_array()
    red = state.kappa
    orange = state.kappa - 1.0

    if state.mean is None:
        score = 0.0
    else:
        sigma = max(float(state.sigma[0]), state.min_sigma)
        score = max(0.0, (values[0] - float(state.mean[0])) / sigma)
    verdict = classify(score, orange, red)
    if state.count < state.warmup:
        verdict = DetectorVerdict(VerdictLevel.NORMAL, verdict.score, verdict.thresholds)

    if state.mean is None:
        state.mean = values.copy()
        state.var = np.zeros(FEATURE_DIM)
    else:
        diff = values - state.mean
        increment = state.alpha * diff
        state.mean = state.mean + increment
        state.var = (1.0 - state.alpha) * (state.var + diff * increment)
    state.count += 1
    return verdict


# ---------------------------------------------------------------------------
# PCA subspace
# ---------------------------------------------------------------------------

@dataclass
class PcaState:
    mean: np.ndarray
    scale: np.ndarray
    flagged: Tuple[str, ...]
    basis: np.ndarray  # dim x k, orthonormal columns
    eigenvalues: np.ndarray
    variance_captured: float
    q_threshold: float
    training_residuals: np.ndarray

    @property
    def k(self) -> int:
        return int(self.basis.shape[1])


def _residual(state: PcaState, values: np.ndarray) -> np.ndarray:
    z = (values - state.mean) / state.scale
    return z - state.basis @ (state.basis.T @ z)


def pca_fit(window: Sequence[FeatureVector], variance_target: float = 0.95,
            q_percentile: float = 99.0, q_floor: float = 1e-12) -> PcaState:
    """Fit the normal subspace and the squared-prediction-error limit"""
    if len(window) < 2 * FEATURE_DIM:
        raise DetectorError(f"PCA needs at least {2 * FEATURE_DIM} windows, got {len(window)}")
    if not 0 < variance_target <= 1:
        raise DetectorError("variance_target must be within (0, 1]")

    data = np.vstack([x.as_array() for x in window])
    mean = data.mean(axis=0)
    scale = data.std(axis=0, ddof=1)
    tolerance = 1e-12 * np.maximum(1.0, np.abs(mean))
    zero_variance = scale <= tolerance
    scale = np.where(zero_variance, 1.0, scale)
    flagged = tuple(name for name, flag in zip(FEATURE_NAMES, zero_variance) if flag)
    if flagged:
        logger.debug("PCA: zero-variance features %s left unscaled", flagged)

    z = (data - mean) / scale
    covariance = z.T @ z / (data.shape[0] - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]

    total = float(eigenvalues.sum())
    if total <= 0.0:
        k = 1
    else:
        cumulative = np.cumsum(eigenvalues) / total
        k = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
        k = min(max(k, 1), FEATURE_DIM)
    basis = eigenvectors[:, :k]

    state = PcaState(mean=mean, scale=scale, flagged=flagged, basis=basis, eigenvalues=eigenvalues,
                     variance_captured=float(eigenvalues[:k].sum() / total) if total > 0 else 1.0,
                     q_threshold=0.0, training_residuals=np.zeros(0))
    residuals = np.array([float(r @ r) for r in (_residual(state, row) for row in data)])
    state.training_residuals = residuals
    state.q_threshold = max(q_floor, percentile(residuals, q_percentile))
    return state


def pca_score(state: PcaState, x: FeatureVector) -> DetectorVerdict:
    """Squared norm of the part of x outside the principal subspace"""
    r = _residual(state, x.as_array())
    return classify(float(r @ r), 0.5 * state.q_threshold, state.q_threshold)


# ---------------------------------------------------------------------------
# KOAD
# ---------------------------------------------------------------------------

def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    diff = a - b
    return float(np.exp(-float(diff @ diff) / (2.0 * sigma * sigma)))


@dataclass
class KoadState:
    sigma: float = 1.0
    nu1: float = 0.05
    nu2: float = 0.3
    sparsify: float = 0.01
    max_dictionary: int = 50
    feature_scale: np.ndarray = field(default_factory=lambda: np.array([1e-3, 1e-3, 1e-2, 1e6]))
    dictionary: List[np.ndarray] = field(default_factory=list)
    evictions: int = 0

    def __post_init__(self):
        self.feature_scale = np.asarray(self.feature_scale, dtype=float)
        if not self.sigma > 0:
            raise DetectorError(f"kernel bandwidth must be positive, got {self.sigma}")
        if not self.nu1 < self.nu2:
            raise DetectorError(f"need nu1 < nu2, got {self.nu1} and {self.nu2}")
        if not 0 <= self.sparsify <= self.nu1:
            raise DetectorError("sparsify threshold must lie within [0, nu1]")
        if self.max_dictionary < 1:
            raise DetectorError("dictionary cap must be at least 1")
        if self.feature_scale.shape != (FEATURE_DIM,) or np.any(self.feature_scale <= 0):
            raise DetectorError("feature_scale needs one positive entry per feature")

    def scaled(self, x: Union[FeatureVector, np.ndarray]) -> np.ndarray:
        values = x.as_array() if isinstance(x, FeatureVector) else np.asarray(x, dtype=float)
        return values / self.feature_scale


def koad_projection_error(dictionary: Sequence[np.ndarray], z: np.ndarray, sigma: float) -> float:
    """delta = k(z,z) - k^T K^+ k for the Gaussian kernel, clipped to [0, 1]"""
    if not dictionary:
        return 1.0
    gram = np.array([[gaussian_kernel(a, b, sigma) for b in dictionary] for a in dictionary])
    k_vec = np.array([gaussian_kernel(d, z, sigma) for d in dictionary])
    coefficients, *_ = np.linalg.lstsq(gram, k_vec, rcond=None)
    delta = 1.0 - float(k_vec @ coefficients)
    return min(1.0, max(0.0, delta))


def koad_update(state: KoadState, x: FeatureVector) -> DetectorVerdict:
    """Classify by projection error; representable-but-novel normals join the dictionary"""
    z = state.scaled(x)
    if not state.dictionary:
        state.dictionary.append(z)
        return classify(0.0, state.nu1, state.nu2)

    delta = koad_projection_error(state.dictionary, z, state.sigma)
    verdict = classify(delta, state.nu1, state.nu2)
    if verdict.level == VerdictLevel.NORMAL and delta > state.sparsify:
        state.dictionary.append(z)
        if len(state.dictionary) > state.max_dictionary:
            state.dictionary.pop(0)
            state.evictions += 1
    return verdict


# ---------------------------------------------------------------------------
# Detector interface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerdictRow:
    window_index: int
    score: float
    level: VerdictLevel
    closed_ns: int


class Detector(ABC):
    """Stateful online detector fed one feature vector per window"""

    name: str = "detector"

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        self.params = dict(params or {})
        self.history: List[VerdictRow] = []

    @abstractmethod
    def update(self, x: FeatureVector) -> DetectorVerdict:
        """Advance the detector state by one observation"""

    def observe(self, x: FeatureVector, closed_ns: int = 0) -> DetectorVerdict:
        verdict = self.update(x)
        self.history.append(VerdictRow(len(self.history), verdict.score, verdict.level, closed_ns))
        return verdict

    def export_verdicts(self, path: Union[str, Path]) -> Path:
        rows = [(row.window_index, repr(row.score), row.level.value, format_us(row.closed_ns))
                for row in self.history]
        return export_table(rows, VERDICT_COLUMNS, path)

    def first_red_ns(self) -> Optional[int]:
        for row in self.history:
            if row.level == VerdictLevel.RED:
                return row.closed_ns
        return None


def _checked(params: Dict[str, Any], allowed: Sequence[str], name: str) -> Dict[str, Any]:
    unknown = set(params) - set(allowed)
    if unknown:
        raise DetectorError(f"unknown {name} parameters: {sorted(unknown)}")
    return params


class EwmaDetector(Detector):
    name = "ewma"

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        super().__init__(params)
        self.state = EwmaState(**_checked(self.params, ("alpha", "kappa", "warmup", "min_sigma"), self.name))

    def update(self, x: FeatureVector) -> DetectorVerdict:
        return ewma_update(self.state, x)


class PcaDetector(Detector):
    """Collects a training set of presumed-normal windows, then scores"""
    name = "pca"

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        super().__init__(params)
        _checked(self.params, ("variance_target", "q_percentile", "q_floor", "training_windows"), self.name)
        self.training_windows = int(self.params.get("training_windows", 20))
        if self.training_windows < 2 * FEATURE_DIM:
            raise DetectorError(f"training_windows must be at least {2 * FEATURE_DIM}")
        self.variance_target = float(self.params.get("variance_target", 0.95))
        self.q_percentile = float(self.params.get("q_percentile", 99.0))
        self.q_floor = float(self.params.get("q_floor", 1e-12))
        self.training: List[FeatureVector] = []
        self.state: Optional[PcaState] = None

    def update(self, x: FeatureVector) -> DetectorVerdict:
        if self.state is None:
            self.training.append(x)
            if len(self.training) >= self.training_windows:
                self.state = pca_fit(self.training, self.variance_target, self.q_percentile, self.q_floor)
                logger.debug("PCA fitted: k=%d, Q=%.3g", self.state.k, self.state.q_threshold)
            return DetectorVerdict(VerdictLevel.NORMAL, 0.0, (math.inf, math.inf))
        return pca_score(self.state, x)


class KoadDetector(Detector):
    name = "koad"

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        super().__init__(params)
        allowed = ("sigma", "nu1", "nu2", "sparsify", "max_dictionary", "feature_scale")
        self.state = KoadState(**_checked(self.params, allowed, self.name))

    def update(self, x: FeatureVector) -> DetectorVerdict:
        return koad_update(self.state, x)


BUILTIN_DETECTORS = {
    EwmaDetector.name: EwmaDetector,
    PcaDetector.name: PcaDetector,
    KoadDetector.name: KoadDetector,
}
