"""Constant-velocity Kalman filter for VRU tracks and the NIS innovation gate.

The state is (px, py, vx, vy).  The measurement model is linear, so the
"extended" filter reduces to the classic one; ``ekf_update`` accepts any
measurement matrix so non-linear models can plug in their Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from ..errors import NonPositiveDefinite, SingularInnovation
from ..messages import Classification, CpmPayload
from .reports import Anomaly, DetectionReport, Detector, Source

H_POS = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0]])
H_FULL = np.eye(4)
SYM_TOL = 1e-9


@lru_cache(maxsize=None)
def nis_threshold(confidence: float = 0.99, dof: int = 2) -> float:
    """Upper ``confidence`` quantile of the chi-square law with ``dof`` degrees."""
    return float(chi2.ppf(confidence, dof))


@dataclass(frozen=True)
class GateConfig:
    confidence: float = 0.99
    window_k: int = 3
    q: float = 0.5
    nis_threshold: Optional[float] = None

    def __post_init__(self):
        if self.window_k < 1:
            raise ValueError("window_k must be at least 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.nis_threshold is not None and self.nis_threshold <= 0.0:
            raise ValueError("nis_threshold must be positive")

    def threshold(self, dof: int = 2) -> float:
        """Gate for a ``dof``-dimensional measurement.

        An explicit ``nis_threshold`` applies to 2-dof measurements only; other
        dimensions always use the matching chi-square quantile.
        """
        if self.nis_threshold is not None and dof == 2:
            return self.nis_threshold
        return nis_threshold(self.confidence, dof)


@dataclass
class EkfState:
    x: np.ndarray
    P: np.ndarray
    last_time: int

    def copy(self) -> "EkfState":
        return EkfState(self.x.copy(), self.P.copy(), self.last_time)

    @classmethod
    def from_measurement(cls, time_ms: int, pos: Sequence[float], vel: Sequence[float] = (0.0, 0.0),
                         pos_var: float = 1.0, vel_var: float = 4.0) -> "EkfState":
        x = np.array([pos[0], pos[1], vel[0], vel[1]], dtype=float)
        return cls(x, np.diag([pos_var, pos_var, vel_var, vel_var]), int(time_ms))


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    """White-noise-acceleration covariance for one axis pair."""
    a, b, c = dt ** 3 / 3.0, dt ** 2 / 2.0, dt
    return q * np.array([[a, 0, b, 0],
                         [0, a, 0, b],
                         [b, 0, c, 0],
                         [0, b, 0, c]])


def _repair(P: np.ndarray) -> np.ndarray:
    if np.max(np.abs(P - P.T)) > 1e-6 * max(1.0, np.max(np.abs(P))):
        raise NonPositiveDefinite("covariance lost symmetry")
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NonPositiveDefinite("covariance is not positive definite") from None
    return P


def ekf_predict(state: EkfState, to_time: int, q: float = 0.5) -> EkfState:
    if to_time < state.last_time:
        raise ValueError(f"cannot predict backwards ({to_time} < {state.last_time})")
    dt = (to_time - state.last_time) / 1000.0
    if dt == 0.0:
        return state.copy()
    F = transition(dt)
    P = F @ state.P @ F.T + process_noise(dt, q)
    return EkfState(F @ state.x, _repair(P), int(to_time))


def innovation(state: EkfState, z, R, H=H_POS) -> Tuple[np.ndarray, np.ndarray, float]:
    """Innovation y, its covariance S and the NIS y' S^-1 y."""
    z = np.asarray(z, dtype=float)
    R = np.asarray(R, dtype=float)
    y = z - H @ state.x
    S = H @ state.P @ H.T + R
    if abs(np.linalg.det(S)) < 1e-12 or np.linalg.cond(S) > 1e12:
        raise SingularInnovation("innovation covariance is singular")
    nis = float(y @ np.linalg.solve(S, y))
    return y, S, nis


def ekf_update(state: EkfState, z, R, H=H_POS) -> Tuple[EkfState, float]:
    """Kalman update (Joseph form); returns the new state and the NIS."""
    H = np.asarray(H, dtype=float)
    R = np.asarray(R, dtype=float)
    y, S, nis = innovation(state, z, R, H)
    K = np.linalg.solve(S, H @ state.P).T
    I_KH = np.eye(4) - K @ H
    P = I_KH @ state.P @ I_KH.T + K @ R @ K.T
    return EkfState(state.x + K @ y, _repair(0.5 * (P + P.T)), state.last_time), nis


class NisGate:
    """Consecutive-exceedance counter for one (track, source) stream."""

    def __init__(self, threshold: float, window_k: int = 3):
        self.threshold = threshold
        self.window_k = window_k
        self.run = 0
        self.fired = False

    def observe(self, nis: float) -> bool:
        """Feed one NIS value; True exactly once, when the window first fills."""
        self.run = self.run + 1 if nis > self.threshold else 0
        if self.run >= self.window_k and not self.fired:
            self.fired = True
            return True
        return False


def ekf_gate(nis_sequence: Iterable[float], cfg: GateConfig = GateConfig(), dof: int = 2, *,
             source: Source = Source.CPM, offender: int = 0, evidence: Tuple[bytes, ...] = (b"\x00" * 32,),
             sim_time_ms: int = 0, subject=None) -> Optional[DetectionReport]:
    """Report when ``window_k`` consecutive NIS values exceed the gate."""
    gate = NisGate(cfg.threshold(dof), cfg.window_k)
    for i, nis in enumerate(nis_sequence):
        if gate.observe(nis):
            return DetectionReport(Detector.EKF_GATE, Anomaly.INCONSISTENT_STREAM, offender, evidence,
                                   sim_time_ms, source=source, subject=subject,
                                   details={"update_index": i, "nis": nis, "threshold": gate.threshold})
    return None


# --- multi-source VRU monitor -----------------------------------------------

VRU_CLASSES = (Classification.PEDESTRIAN, Classification.CYCLIST)


@dataclass(frozen=True)
class OnboardFix:
    """Own-sensor measurement of a VRU: local id, position and velocity."""

    local_id: int
    x: float
    y: float
    vx: float
    vy: float


@dataclass
class _VruTrack:
    ekf: EkfState
    gates: Dict[tuple, NisGate] = field(default_factory=dict)
    own_rejections: int = 0


class VruEkfMonitor:
    """Per-vehicle VRU filter fusing own sensing with CPM-reported VRUs.

    Tracks are anchored on the ego sensor.  Every measurement is gated before
    it is fused, so a falsified stream cannot drag the estimate along with it.
    Remote (CPM) streams that stay outside the gate for ``window_k``
    consecutive updates are reported; own-sensor rejections only trigger a
    re-initialisation.
    """

    STALE_MS = 1000
    REINIT_AFTER = 10
    ASSOC_GATE = 3.0
    MIN_CONFIDENCE = 0.9

    def __init__(self, cfg: GateConfig = GateConfig(), own_sigma_pos: float = 0.3, own_sigma_vel: float = 0.2,
                 cpm_sigma_pos: float = 0.5, cpm_sigma_vel: float = 0.15):
        self.cfg = cfg
        self.R_own = np.diag([own_sigma_pos ** 2] * 2 + [own_sigma_vel ** 2] * 2)
        self.R_cpm = np.diag([cpm_sigma_pos ** 2] * 2 + [cpm_sigma_vel ** 2] * 2)
        self.tracks: Dict[int, _VruTrack] = {}
        self.nis_log: List[Tuple[int, int, str, float]] = []

    def _init(self, time_ms: int, fix: OnboardFix) -> _VruTrack:
        ekf = EkfState(np.array([fix.x, fix.y, fix.vx, fix.vy]), self.R_own.copy(), time_ms)
        return _VruTrack(ekf)

    def observe(self, time_ms: int, own: Sequence[OnboardFix],
                cpms: Sequence[Tuple[CpmPayload, bytes]] = ()) -> List[DetectionReport]:
        """Process all measurements taken at ``time_ms``."""
        thr = self.cfg.threshold(4)
        for fix in sorted(own, key=lambda f: f.local_id):
            trk = self.tracks.get(fix.local_id)
            if trk is None or time_ms - trk.ekf.last_time > self.STALE_MS or time_ms < trk.ekf.last_time:
                self.tracks[fix.local_id] = self._init(time_ms, fix)
                continue
            pred = ekf_predict(trk.ekf, time_ms, self.cfg.q)
            z = (fix.x, fix.y, fix.vx, fix.vy)
            _, _, nis = innovation(pred, z, self.R_own, H_FULL)
            self.nis_log.append((time_ms, fix.local_id, Source.ONBOARD.value, nis))
            if nis > thr:
                trk.own_rejections += 1
                trk.ekf = pred
                if trk.own_rejections >= self.REINIT_AFTER:
                    self.tracks[fix.local_id] = self._init(time_ms, fix)
                continue
            trk.own_rejections = 0
            trk.ekf, _ = ekf_update(pred, z, self.R_own, H_FULL)

        reports = []
        fresh = {lid: t for lid, t in self.tracks.items() if t.ekf.last_time == time_ms}
        for cpm, digest in sorted(cpms, key=lambda c: c[0].sender):
            if cpm.gen_time != time_ms:
                continue
            for obj in sorted(cpm.objects, key=lambda o: o.object_id):
                if obj.classification not in VRU_CLASSES or obj.confidence < self.MIN_CONFIDENCE:
                    continue
                s = obj.state
                lid = self._associate(fresh, s.x, s.y)
                if lid is None:
                    continue
                trk = fresh[lid]
                z = (s.x, s.y, s.vx, s.vy)
                _, _, nis = innovation(trk.ekf, z, self.R_cpm, H_FULL)
                self.nis_log.append((time_ms, lid, Source.CPM.value, nis))
                key = (Source.CPM, cpm.sender)
                gate = trk.gates.setdefault(key, NisGate(thr, self.cfg.window_k))
                if gate.observe(nis):
                    reports.append(DetectionReport(
                        Detector.EKF_GATE, Anomaly.INCONSISTENT_STREAM, cpm.sender, (digest,), time_ms,
                        source=Source.CPM, subject=(cpm.sender, obj.object_id),
                        details={"nis": nis, "threshold": thr, "consecutive": gate.run}))
                if nis <= thr:
                    trk.ekf, _ = ekf_update(trk.ekf, z, self.R_cpm, H_FULL)
        return reports

    def _associate(self, tracks: Dict[int, _VruTrack], x: float, y: float) -> Optional[int]:
        best, best_d = None, self.ASSOC_GATE
        for lid in sorted(tracks):
            t = tracks[lid].ekf.x
            d = math.hypot(t[0] - x, t[1] - y)
            if d <= best_d:
                best, best_d = lid, d
        return best
