"""Validity checks on broadcast signal phase and timing."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

from ..errors import UnknownSignalGroup
from ..geometry import ConflictMatrix
from ..messages import SignalState, SpatPayload
from .reports import Anomaly, DetectionReport, Detector, Source

# early red->green tolerated relative to the announced change time
TRANSITION_SLACK_MS = 100


class SpatHistory:
    """Last announced (state, absolute change time) per signal group."""

    def __init__(self):
        self.last: Dict[int, Tuple[SignalState, int]] = {}

    def update(self, spat: SpatPayload) -> None:
        for ph in spat.phases:
            self.last[ph.signal_group] = (ph.state, spat.gen_time + ph.time_to_change)


def check_spat_conflicts(spat: SpatPayload, cm: ConflictMatrix, history: Optional[SpatHistory] = None,
                         digest: bytes = b"\x00" * 32) -> Optional[DetectionReport]:
    """Flag conflicting simultaneous greens and premature red-to-green switches.

    ``history`` is read, then updated with this message.

    Raises:
        UnknownSignalGroup: a phase names a group absent from ``cm``.
    """
    for ph in spat.phases:
        if ph.signal_group not in cm:
            raise UnknownSignalGroup(f"signal group {ph.signal_group} is not in the MAP")
    greens = sorted(ph.signal_group for ph in spat.phases if ph.state == SignalState.GREEN)
    pairs = [(a, b) for i, a in enumerate(greens) for b in greens[i + 1:] if cm.conflict(a, b)]

    illegal = []
    if history is not None:
        for ph in spat.phases:
            prev = history.last.get(ph.signal_group)
            if prev is None or ph.state != SignalState.GREEN or prev[0] != SignalState.RED:
                continue
            if spat.gen_time < prev[1] - TRANSITION_SLACK_MS:
                illegal.append(ph.signal_group)
        history.update(spat)

    if not pairs and not illegal:
        return None
    return DetectionReport(Detector.SPAT_CONFLICT, Anomaly.CONFLICTING_GREENS, spat.sender, (digest,),
                           spat.gen_time, source=Source.SPAT,
                           details={"conflicting_pairs": tuple(pairs), "illegal_transitions": tuple(illegal)})
