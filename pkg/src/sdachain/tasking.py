"""Prioritized observation task queue and sensor assignment.

Tasks are observation requests carried on the ledger: external requests
paid by a requester, internal follow-ups spawned when validation leaves
an orbit unresolved, and calibration passes injected by scenario config.
A task targets either a cataloged object (by id) or an element-space
region around an initial orbit estimate. Priority is an explicit
weighted sum so scenarios can study alternative weightings; ordering is
a strict total order (score, then task_id bytes) so queue pops are
deterministic everywhere.
"""

import dataclasses
import math
from dataclasses import dataclass

from .astro import (
    Epoch,
    GroundSite,
    J2_EARTH,
    KeplerianElements,
    DecayError,
    propagate_j2,
    topocentric_angles,
)
from .errors import SdaError
from .iod import IodSolution
from .tdm import ELEVATION_MASK_RAD
from .validation import ValidationReport
from .wire import Reader, Writer, sha256

TASK_ORIGINS = ("external", "internal", "calibration")
TASK_STATUSES = ("open", "assigned", "fulfilled", "expired")

TASK_EXPIRY_S = 48.0 * 3600.0
INTERNAL_TASK_FEE = 10          # tokens, funded from protocol subsidy

# priority(task) = 2.0*urgency + 1.5*followup + 1.0*min(age/7d, 1) + 0.5*fee/(fee+100)
URGENCY_WEIGHT = 2.0
FOLLOWUP_WEIGHT = 1.5
AGE_WEIGHT = 1.0
AGE_SATURATION_DAYS = 7.0
FEE_WEIGHT = 0.5
FEE_SOFTENER = 100.0

MIN_VISIBLE_EPOCHS = 3
MIN_EPOCH_SPACING_S = 60.0
MAX_WINDOW_S = 24.0 * 3600.0

# follow-up region bounds: 3 * (angular rms scaled into each element) + floor
REGION_RMS_FACTOR = 3.0
REGION_FLOOR_A_KM = 1.0
REGION_FLOOR_E = 1e-3
REGION_FLOOR_ANGLE_RAD = 1e-3


class TaskingError(SdaError):
    """Raised for malformed tasks, windows, or precondition violations."""


def _wrapped_diff(x: float, y: float) -> float:
    d = abs(x - y) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


@dataclass(frozen=True)
class IodRegion:
    """Element-space box around an orbit estimate, for UCT follow-up.

    Tolerances cover a, e, i, and raan only: for the near-circular
    orbits that dominate the catalog, argp and M are individually
    ill-defined, so membership tests skip them (matching the element
    distance used for track association).
    """

    elements: KeplerianElements
    tol_a: float        # km
    tol_e: float
    tol_i: float        # rad
    tol_raan: float     # rad

    def __post_init__(self):
        for name in ("tol_a", "tol_e", "tol_i", "tol_raan"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise TaskingError(f"{name} must be positive and finite: {v}")

    def contains(self, el: KeplerianElements) -> bool:
        """True when el falls inside the box (raan compared wrapped).

        The caller is responsible for supplying elements osculating at
        an epoch comparable to the region's own.
        """
        return (abs(el.a - self.elements.a) <= self.tol_a
                and abs(el.e - self.elements.e) <= self.tol_e
                and abs(el.i - self.elements.i) <= self.tol_i
                and _wrapped_diff(el.raan, self.elements.raan) <= self.tol_raan)


def region_from_solution(sol: IodSolution) -> IodRegion:
    """Follow-up region sized from an IOD solution's angular residual."""
    s = REGION_RMS_FACTOR * sol.rms_residual
    return IodRegion(
        elements=sol.elements,
        tol_a=s * sol.elements.a + REGION_FLOOR_A_KM,
        tol_e=s + REGION_FLOOR_E,
        tol_i=s + REGION_FLOOR_ANGLE_RAD,
        tol_raan=s + REGION_FLOOR_ANGLE_RAD,
    )


@dataclass(frozen=True)
class Sensor:
    """A ground site plus its observing mode.

    Optical sensors report angles only; radar sensors add slant range.
    """

    site: GroundSite
    mode: str = "optical"

    def __post_init__(self):
        if self.mode not in ("optical", "radar"):
            raise TaskingError(f"unknown sensor mode {self.mode!r}")


@dataclass(frozen=True)
class Task:
    """A prioritized observation request.

    target is either an object_id string (cataloged target) or an
    IodRegion (follow-up on an uncataloged estimate). Status changes
    produce new instances via with_status; task_id never includes the
    status, so a task keeps its identity across transitions.
    """

    task_id: bytes
    target: object      # str | IodRegion
    fee: int            # tokens
    urgency: bool
    origin: str
    created_at: Epoch
    status: str = "open"

    def __post_init__(self):
        if len(self.task_id) != 32:
            raise TaskingError("task_id must be a 32-byte digest")
        if isinstance(self.target, str):
            if not self.target:
                raise TaskingError("object target must be nonempty")
        elif not isinstance(self.target, IodRegion):
            raise TaskingError(f"bad target type {type(self.target).__name__}")
        if not isinstance(self.fee, int) or self.fee < 0:
            raise TaskingError(f"fee must be a nonnegative integer: {self.fee}")
        if self.origin not in TASK_ORIGINS:
            raise TaskingError(f"unknown origin {self.origin!r}")
        if self.status not in TASK_STATUSES:
            raise TaskingError(f"unknown status {self.status!r}")

    def is_followup(self) -> bool:
        return isinstance(self.target, IodRegion)

    def with_status(self, status: str) -> "Task":
        return dataclasses.replace(self, status=status)


def _write_elements(w: Writer, el: KeplerianElements) -> None:
    for v in (el.a, el.e, el.i, el.raan, el.argp, el.M, el.epoch.t):
        w.f64(v)


def _read_elements(r: Reader) -> KeplerianElements:
    vals = [r.f64() for _ in range(7)]
    return KeplerianElements(a=vals[0], e=vals[1], i=vals[2], raan=vals[3],
                             argp=vals[4], M=vals[5], epoch=Epoch(vals[6]))


def _write_target(w: Writer, target) -> None:
    if isinstance(target, str):
        w.u8(0).string(target)
    else:
        w.u8(1)
        _write_elements(w, target.elements)
        for v in (target.tol_a, target.tol_e, target.tol_i, target.tol_raan):
            w.f64(v)


def _read_target(r: Reader):
    tag = r.u8()
    if tag == 0:
        return r.string()
    if tag == 1:
        el = _read_elements(r)
        tols = [r.f64() for _ in range(4)]
        return IodRegion(el, *tols)
    raise TaskingError(f"unknown target tag {tag}")


def task_identity(target, fee: int, urgency: bool, origin: str,
                  created_at: Epoch, ref: bytes = b"") -> bytes:
    """Deterministic 32-byte task_id from the task's identity payload.

    ref distinguishes otherwise-identical requests: the posting account
    and nonce for external tasks, the validation report hash for
    internal follow-ups (so identical reports spawn the identical task).
    """
    w = Writer().raw(b"TASK")
    _write_target(w, target)
    w.u64(fee).u8(1 if urgency else 0).string(origin).f64(created_at.t)
    w.blob(ref)
    return sha256(w.bytes())


def write_task(w: Writer, task: Task) -> None:
    w.digest(task.task_id)
    _write_target(w, task.target)
    w.u64(task.fee).u8(1 if task.urgency else 0)
    w.string(task.origin).f64(task.created_at.t).string(task.status)


def read_task(r: Reader) -> Task:
    task_id = r.digest()
    target = _read_target(r)
    fee = r.u64()
    urgency = r.u8() != 0
    origin = r.string()
    created_at = Epoch(r.f64())
    status = r.string()
    return Task(task_id=task_id, target=target, fee=fee, urgency=urgency,
                origin=origin, created_at=created_at, status=status)


def priority(task: Task, catalog: dict, now: Epoch) -> float:
    """Score an open task; higher means observe sooner.

    Age counts days since the target's elements were last confirmed
    (the catalog record's epoch for cataloged targets, the estimate
    epoch for follow-up regions); targets missing from the catalog are
    maximally stale.
    """
    if task.status != "open":
        raise TaskingError(f"priority is defined for open tasks, not {task.status!r}")
    score = URGENCY_WEIGHT if task.urgency else 0.0
    if task.is_followup():
        score += FOLLOWUP_WEIGHT
        ref_epoch = task.target.elements.epoch
    else:
        rec = catalog.get(task.target)
        ref_epoch = rec.elements.epoch if rec is not None else None
    if ref_epoch is None:
        age_days = AGE_SATURATION_DAYS
    else:
        age_days = max(0.0, (now.t - ref_epoch.t) / 86400.0)
    score += AGE_WEIGHT * min(age_days / AGE_SATURATION_DAYS, 1.0)
    score += FEE_WEIGHT * task.fee / (task.fee + FEE_SOFTENER)
    return score


def order_queue(tasks, catalog: dict, now: Epoch) -> list:
    """Open tasks sorted by descending score, ties broken by task_id."""
    opened = [t for t in tasks if t.status == "open"]
    return sorted(opened, key=lambda t: (-priority(t, catalog, now), t.task_id))


def is_expired(task: Task, now: Epoch) -> bool:
    """True when an unfulfilled task has outlived the 48 h service window."""
    if task.status not in ("open", "assigned"):
        return False
    return now.t - task.created_at.t > TASK_EXPIRY_S


def visible_epochs(elements: KeplerianElements, bstar: float, site: GroundSite,
                   window, *, step_s: float = 30.0, cadence_s: float = 60.0,
                   j2: float = J2_EARTH) -> tuple:
    """Epochs in the window where the orbit clears the elevation mask.

    Samples every cadence_s seconds, so returned epochs are spaced at
    least that far apart. A decayed target is simply never visible.
    """
    if cadence_s < MIN_EPOCH_SPACING_S:
        raise TaskingError(f"cadence_s must be >= {MIN_EPOCH_SPACING_S}")
    t0, t1 = window
    out = []
    k = 0
    while True:
        t = t0.t + k * cadence_s
        if t > t1.t:
            break
        epoch = Epoch(t)
        try:
            sv = propagate_j2(elements, bstar, epoch, step_s=step_s, j2=j2)
        except DecayError:
            break
        _, el, _ = topocentric_angles(sv, site)
        if el > ELEVATION_MASK_RAD:
            out.append(epoch)
        k += 1
    return tuple(out)


def assign(queue, sensor: Sensor, window, catalog: dict, *,
           step_s: float = 30.0, cadence_s: float = 60.0,
           j2: float = J2_EARTH):
    """Pick the highest-priority open task visible from the sensor.

    Returns (task marked assigned, observation epochs) or None when no
    target clears the elevation mask for at least three epochs in the
    window. Pure over its inputs: the caller writes the returned task
    back into its queue.
    """
    t0, t1 = window
    if t1.t < t0.t or t1.t - t0.t > MAX_WINDOW_S:
        raise TaskingError("window must be forward and at most 24 h long")
    for task in order_queue(queue, catalog, t0):
        if task.is_followup():
            el, bstar = task.target.elements, 0.0
        else:
            rec = catalog.get(task.target)
            if rec is None:
                continue    # nothing to point at yet
            el, bstar = rec.elements, rec.bstar
        epochs = visible_epochs(el, bstar, sensor.site, window,
                                step_s=step_s, cadence_s=cadence_s, j2=j2)
        if len(epochs) >= MIN_VISIBLE_EPOCHS:
            return task.with_status("assigned"), epochs
    return None


def spawn_internal_retask(report: ValidationReport, iod: IodSolution) -> Task:
    """Follow-up task for an orbit that validation could not resolve.

    Identical reports spawn byte-identical tasks, so replaying a chain
    reproduces the queue exactly.
    """
    if report.verdict not in ("ambiguous", "uct"):
        raise TaskingError(
            f"retask requires an ambiguous or uct report, got {report.verdict!r}")
    region = region_from_solution(iod)
    created_at = iod.elements.epoch
    ref = bytes.fromhex(report.report_hash)
    task_id = task_identity(region, INTERNAL_TASK_FEE, False, "internal",
                            created_at, ref)
    return Task(task_id=task_id, target=region, fee=INTERNAL_TASK_FEE,
                urgency=False, origin="internal", created_at=created_at)
