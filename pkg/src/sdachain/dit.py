"""Per-object sustainability scores computed from settled chain history.

Every object in the catalog earns three numbers in [0, 1], in the spirit
of detectability/trackability/identifiability rating systems:

  detectability    D = min(1, N/10) * min(1, sites/3)
  trackability     T = min(1, days_with_verified / 30)
  identifiability  I = clamp(1 - median_rms / theta_verify, 0, 1)

where N counts verified tracks of the object inside the scoring window,
sites counts the distinct ground stations among them, days bins track
start epochs into 86400 s buckets, and median_rms is taken over the same
verified tracks (I = 0 when there are none). The composite is the plain
mean (D + T + I) / 3.

Scores are pure functions of the chain prefix: replaying the same blocks
on any machine yields byte-identical leaderboards, so any party can audit
a published rating. Rejected (slashed) tracks are deliberately ignored;
only quorum-verified observations count toward an object's rating.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass

from .astro import Epoch
from .errors import SdaError
from .ledger import LedgerState

__all__ = [
    "DAY_S",
    "D_SAT_SITES",
    "D_SAT_TRACKS",
    "T_WINDOW_DAYS",
    "DitError",
    "DitScore",
    "default_window",
    "dit_leaderboard",
    "dit_score",
    "leaderboard_csv",
    "leaderboard_json",
]

DAY_S = 86400.0

# saturation constants: tracks, distinct sites, and coverage days at
# which each component reaches 1
D_SAT_TRACKS = 10
D_SAT_SITES = 3
T_WINDOW_DAYS = 30


class DitError(SdaError):
    """Scoring failed (unknown object, malformed window)."""


@dataclass(frozen=True)
class DitScore:
    """One object's rating at a fixed chain height."""

    object_id: str
    detectability: float
    trackability: float
    identifiability: float
    composite: float
    window: tuple
    as_of_block: int

    def __post_init__(self) -> None:
        for name in ("detectability", "trackability", "identifiability",
                     "composite"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DitError(f"{name} out of [0,1]: {v}")
        lo, hi = self.window
        if not (isinstance(lo, Epoch) and isinstance(hi, Epoch) and lo.t < hi.t):
            raise DitError("window must be an (Epoch, Epoch) pair, start < end")
        if self.as_of_block < 0:
            raise DitError("as_of_block must be nonnegative")

    def row(self) -> str:
        """CSV row matching the leaderboard header (repr floats, so the
        text is exactly reproducible)."""
        return (f"{self.object_id},{self.detectability!r},"
                f"{self.trackability!r},{self.identifiability!r},"
                f"{self.composite!r},{self.as_of_block}")


def default_window(state: LedgerState) -> tuple:
    """Trailing 30 days ending at the chain clock."""
    return (Epoch(state.time - T_WINDOW_DAYS * DAY_S), Epoch(state.time))


def _check_window(window: tuple) -> tuple:
    try:
        lo, hi = window
    except (TypeError, ValueError):
        raise DitError("window must be an (Epoch, Epoch) pair") from None
    if not (isinstance(lo, Epoch) and isinstance(hi, Epoch)):
        raise DitError("window bounds must be Epoch instances")
    if not lo.t < hi.t:
        raise DitError(f"empty window: [{lo.t}, {hi.t}]")
    return lo, hi


def _verified_in_window(state: LedgerState, object_id: str,
                        window: tuple) -> list:
    lo, hi = window
    return [s for s in state.settlements
            if s.verdict == "verified" and s.object_id == object_id
            and lo.t <= s.first_epoch_t <= hi.t]


def _score_from_records(object_id: str, records: list, theta_verify: float,
                        window: tuple, height: int) -> DitScore:
    if records:
        n = len(records)
        sites = len({s.site_id for s in records})
        days = len({int(s.first_epoch_t // DAY_S) for s in records})
        d = min(1.0, n / D_SAT_TRACKS) * min(1.0, sites / D_SAT_SITES)
        t = min(1.0, days / T_WINDOW_DAYS)
        med = statistics.median(s.rms for s in records)
        i = min(1.0, max(0.0, 1.0 - med / theta_verify))
    else:
        d = t = i = 0.0
    return DitScore(object_id=object_id, detectability=d, trackability=t,
                    identifiability=i, composite=(d + t + i) / 3.0,
                    window=window, as_of_block=height)


def dit_score(object_id: str, state: LedgerState,
              window: tuple = None) -> DitScore:
    """Rate one cataloged object over the window (default: trailing 30
    days up to the chain clock)."""
    if object_id not in state.catalog:
        raise DitError(f"object not on chain: {object_id}")
    window = _check_window(window if window is not None
                           else default_window(state))
    records = _verified_in_window(state, object_id, window)
    # state.height is the next block to produce; scores are "as of" the
    # last block actually applied
    return _score_from_records(object_id, records,
                               state.vparams.theta_verify, window,
                               max(0, state.height - 1))


def dit_leaderboard(state: LedgerState, window: tuple = None) -> list:
    """Score every cataloged object, best composite first, ties broken
    by object id."""
    window = _check_window(window if window is not None
                           else default_window(state))
    scores = [dit_score(oid, state, window) for oid in sorted(state.catalog)]
    scores.sort(key=lambda s: (-s.composite, s.object_id))
    return scores


LEADERBOARD_HEADER = "object_id,D,T,I,composite,as_of_block"


def leaderboard_csv(scores: list) -> str:
    """Render scores as CSV, one header line plus one row per object."""
    return "\n".join([LEADERBOARD_HEADER] + [s.row() for s in scores]) + "\n"


def leaderboard_json(scores: list) -> str:
    """Render scores as a JSON array (sorted keys, no float rounding)."""
    payload = [{"object_id": s.object_id, "D": s.detectability,
                "T": s.trackability, "I": s.identifiability,
                "composite": s.composite, "as_of_block": s.as_of_block}
               for s in scores]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
