"""Validator pipeline: catalog correlation, claim checking, UCT mining.

Every function here is pure given its inputs, which is what lets
independent validators reach byte-identical verdicts and attest to the
same report hash.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .astro import (
    DecayError,
    Epoch,
    GroundSite,
    J2_EARTH,
    KeplerianElements,
    OrbitRecord,
    angular_separation,
    propagate_j2,
    state_to_kepler,
    topocentric_angles,
    topocentric_radec,
)
from .errors import SdaError
from .fedprop import ResidualModel, corrected_propagate
from .iod import IodError, IodSolution, iod_from_tdm, refine_elements
from .tdm import Tdm
from .wire import Writer, sha256

VERDICTS = ("verified", "rejected", "ambiguous", "uct")
UNKNOWN_CLAIM = "UNKNOWN"


class ValidationError(SdaError):
    pass


@dataclass(frozen=True)
class ValidationParams:
    """Genesis-configurable thresholds, all angles in radians."""

    theta_verify: float = math.radians(0.1)
    theta_reject: float = math.radians(0.5)
    theta_gate: float = math.radians(1.0)
    d_assoc: float = 0.05
    w_a_per_km: float = 1.0 / 100.0
    w_e: float = 1.0 / 0.01
    w_i_per_deg: float = 1.0 / 0.5
    w_raan_per_deg: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.theta_verify < self.theta_reject <= self.theta_gate):
            raise ValidationError("need 0 < theta_verify < theta_reject <= theta_gate")
        for name in ("d_assoc", "w_a_per_km", "w_e", "w_i_per_deg", "w_raan_per_deg"):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"{name} must be positive")

    def canonical_bytes(self) -> bytes:
        w = Writer()
        for v in (self.theta_verify, self.theta_reject, self.theta_gate,
                  self.d_assoc, self.w_a_per_km, self.w_e, self.w_i_per_deg,
                  self.w_raan_per_deg):
            w.f64(v)
        return w.bytes()


def _encode_elements(w: Writer, el: KeplerianElements) -> None:
    w.f64(el.a).f64(el.e).f64(el.i).f64(el.raan).f64(el.argp).f64(el.M)
    w.f64(el.epoch.t)


def _decode_elements(r) -> KeplerianElements:
    a, e, i, raan, argp, M = (r.f64() for _ in range(6))
    return KeplerianElements(a=a, e=e, i=i, raan=raan, argp=argp, M=M,
                             epoch=Epoch(r.f64()))


@dataclass(frozen=True)
class ValidationReport:
    """Deterministic verdict a validator attests to on chain."""

    tdm_hash: str
    verdict: str
    matched_object: Optional[str]
    rms_residual: float          # rad; inf when no residual could be formed
    candidates_checked: int
    proposed_elements: Optional[KeplerianElements] = None
    uct_matches: tuple = ()      # tdm hashes folded into a mining proposal
    notes: tuple = ()
    report_hash: str = field(init=False)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValidationError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "verified":
            if self.matched_object is None:
                raise ValidationError("verified report needs matched_object")
            if math.isinf(self.rms_residual):
                raise ValidationError("verified report needs a finite rms")
        if self.rms_residual < 0.0:
            raise ValidationError("rms_residual must be nonnegative")
        object.__setattr__(self, "report_hash",
                           sha256(self.canonical_bytes()).hex())

    def canonical_bytes(self) -> bytes:
        w = Writer().string(self.tdm_hash).string(self.verdict)
        w.u8(1 if self.matched_object is not None else 0)
        if self.matched_object is not None:
            w.string(self.matched_object)
        w.f64(self.rms_residual)
        w.u32(self.candidates_checked)
        w.u8(1 if self.proposed_elements is not None else 0)
        if self.proposed_elements is not None:
            _encode_elements(w, self.proposed_elements)
        w.u32(len(self.uct_matches))
        for h in self.uct_matches:
            w.string(h)
        w.u32(len(self.notes))
        for n in self.notes:
            w.string(n)
        return w.bytes()


def read_report(r) -> ValidationReport:
    """Decode a report from its canonical_bytes layout."""
    tdm_hash = r.string()
    verdict = r.string()
    matched = r.string() if r.u8() else None
    rms = r.f64()
    checked = r.u32()
    elements = _decode_elements(r) if r.u8() else None
    uct_matches = tuple(r.string() for _ in range(r.u32()))
    notes = tuple(r.string() for _ in range(r.u32()))
    return ValidationReport(tdm_hash=tdm_hash, verdict=verdict,
                            matched_object=matched, rms_residual=rms,
                            candidates_checked=checked,
                            proposed_elements=elements,
                            uct_matches=uct_matches, notes=notes)


def _predicted_angles(el: KeplerianElements, bstar: float, t: Epoch,
                      site: GroundSite, mode: str, model: ResidualModel,
                      step_s: float, j2: float) -> tuple:
    sv = corrected_propagate(el, bstar, t, model, step_s=step_s, j2=j2)
    if mode == "AZEL":
        a1, a2, _ = topocentric_angles(sv, site)
        return a1, a2
    return topocentric_radec(sv, site)


def _candidate_rms(cand: OrbitRecord, obs: list, sites: dict,
                   model: ResidualModel, step_s: float, j2: float) -> float:
    """RMS angular separation over (record, site_id, mode) triples."""
    acc = 0.0
    for rec, site_id, mode in obs:
        site = sites[site_id]
        p1, p2 = _predicted_angles(cand.elements, cand.bstar, rec.epoch, site,
                                   mode, model, step_s, j2)
        sep = angular_separation(rec.angle1, rec.angle2, p1, p2)
        acc += sep * sep
    return math.sqrt(acc / len(obs))


def _tdm_obs(tdm: Tdm) -> list:
    return [(rec, tdm.meta.site_id, tdm.meta.mode) for rec in tdm.records]


def _refined_iod(tdm: Tdm, site: GroundSite, step_s: float,
                 j2: float) -> Optional[IodSolution]:
    """Best per-track orbit estimate, or None when geometry defeats IOD."""
    try:
        sol = iod_from_tdm(tdm, site)
    except IodError:
        return None
    if len(tdm.records) >= 6:
        try:
            return refine_elements(sol.elements, [tdm],
                                   {tdm.meta.site_id: site}, bstar=0.0,
                                   step_s=step_s, j2=j2)
        except (IodError, DecayError):
            # a refinement step that wanders below the decay altitude is
            # a failed fit, not a validator crash
            pass
    return sol


def validate_tdm(tdm: Tdm, catalog: list, sites: dict,
                 params: ValidationParams,
                 model: ResidualModel = ResidualModel(),
                 prior_obs: Optional[dict] = None, *,
                 step_s: float = 10.0, j2: float = J2_EARTH) -> ValidationReport:
    """Correlate one TDM against the catalog and issue a verdict.

    prior_obs maps object_id to a list of (Tdm, site_id) pairs whose
    records are folded into that candidate's RMS (the back-propagation
    check against earlier on-chain tracks of the same object).
    """
    if tdm.meta.site_id not in sites:
        raise ValidationError(f"unregistered site {tdm.meta.site_id!r}")
    site = sites[tdm.meta.site_id]
    obs_self = _tdm_obs(tdm)
    first = tdm.records[0]
    notes = []

    claim = tdm.meta.participant
    catalog_ids = {c.object_id for c in catalog}
    claim_in_catalog = claim != UNKNOWN_CLAIM and claim in catalog_ids

    gated = []          # (rms, object_id)
    claim_rms = None
    for cand in sorted(catalog, key=lambda c: c.object_id):
        is_claim = cand.object_id == claim
        try:
            p1, p2 = _predicted_angles(cand.elements, cand.bstar, first.epoch,
                                       site, tdm.meta.mode, model, step_s, j2)
            gate_sep = angular_separation(first.angle1, first.angle2, p1, p2)
            if gate_sep > params.theta_gate and not is_claim:
                continue
            obs = list(obs_self)
            if prior_obs and cand.object_id in prior_obs:
                for p_tdm, p_site_id in prior_obs[cand.object_id]:
                    if p_site_id not in sites:
                        raise ValidationError(f"unregistered site {p_site_id!r}")
                    obs.extend(_tdm_obs(p_tdm))
            rms = _candidate_rms(cand, obs, sites, model, step_s, j2)
        except DecayError:
            notes.append(f"candidate {cand.object_id} decayed; skipped")
            continue
        if is_claim:
            claim_rms = rms
        if gate_sep <= params.theta_gate:
            gated.append((rms, cand.object_id))

    gated.sort()
    best = gated[0] if gated else None

    if claim_in_catalog and claim_rms is not None and claim_rms > params.theta_reject:
        return ValidationReport(
            tdm_hash=tdm.hex_hash(), verdict="rejected",
            matched_object=claim, rms_residual=claim_rms,
            candidates_checked=len(gated), notes=tuple(notes))

    if best is not None and best[0] <= params.theta_verify:
        return ValidationReport(
            tdm_hash=tdm.hex_hash(), verdict="verified",
            matched_object=best[1], rms_residual=best[0],
            candidates_checked=len(gated), notes=tuple(notes))

    if best is not None:
        # closest-but-unconfirmed candidate rides along so settlement can
        # retask follow-up observations of it
        return ValidationReport(
            tdm_hash=tdm.hex_hash(), verdict="ambiguous",
            matched_object=best[1], rms_residual=best[0],
            candidates_checked=len(gated), notes=tuple(notes))

    sol = _refined_iod(tdm, site, step_s, j2)
    if sol is None:
        notes.append("orbit fit failed; retask needed")
        return ValidationReport(
            tdm_hash=tdm.hex_hash(), verdict="ambiguous",
            matched_object=None, rms_residual=math.inf,
            candidates_checked=0, notes=tuple(notes))
    return ValidationReport(
        tdm_hash=tdm.hex_hash(), verdict="uct", matched_object=None,
        rms_residual=sol.rms_residual, candidates_checked=0,
        proposed_elements=sol.elements, notes=tuple(notes))


def element_distance(a: KeplerianElements, b: KeplerianElements,
                     params: ValidationParams, *, step_s: float = 10.0,
                     j2: float = J2_EARTH) -> float:
    """Weighted element-space distance with both orbits at b's epoch.

    Osculating elements drift secularly under J2, so a is propagated to
    b's epoch before differencing; raises DecayError if it decays first.
    """
    if a.epoch.t != b.epoch.t:
        sv = propagate_j2(a, 0.0, b.epoch, step_s=step_s, j2=j2)
        a = state_to_kepler(sv)
    d_raan = abs((a.raan - b.raan + math.pi) % (2.0 * math.pi) - math.pi)
    return (params.w_a_per_km * abs(a.a - b.a)
            + params.w_e * abs(a.e - b.e)
            + params.w_i_per_deg * abs(math.degrees(a.i - b.i))
            + params.w_raan_per_deg * math.degrees(d_raan))


def associate_uct(new_sol: IodSolution, uct_pool: list,
                  params: ValidationParams, *, step_s: float = 10.0,
                  j2: float = J2_EARTH) -> list:
    """Pool entries matching the new track, as (tdm_hash, distance).

    uct_pool holds (tdm_hash, IodSolution) pairs. Sorted ascending by
    distance, ties broken by hash; entries the comparison orbit decays
    against are unmatched.
    """
    matches = []
    for tdm_hash, sol in uct_pool:
        try:
            d = element_distance(new_sol.elements, sol.elements, params,
                                 step_s=step_s, j2=j2)
        except DecayError:
            continue
        if d <= params.d_assoc:
            matches.append((d, tdm_hash))
    matches.sort()
    return [(h, d) for d, h in matches]


def mine_object(tdms: list, sites: dict, params: ValidationParams, *,
                step_s: float = 10.0, j2: float = J2_EARTH) -> Optional[OrbitRecord]:
    """Fit one orbit to associated UCT tracks; None when the fit fails.

    The object_id is derived from the chronologically first track's
    hash, so re-mining the same inputs names the same object.
    """
    if len(tdms) < 2:
        raise ValidationError("mining needs at least two associated TDMs")
    for t in tdms:
        if t.meta.site_id not in sites:
            raise ValidationError(f"unregistered site {t.meta.site_id!r}")
    ordered = sorted(tdms, key=lambda t: (t.records[0].epoch.t, t.hex_hash()))
    # A start seeded from one end of a long gap can phase-slip into a
    # local minimum, so both end tracks are tried and the better fit kept.
    best = None
    for pick in (ordered[0], ordered[-1]):
        try:
            start = iod_from_tdm(pick, sites[pick.meta.site_id])
            sol = refine_elements(start.elements, list(ordered), sites,
                                  bstar=0.0, step_s=step_s, j2=j2)
        except (IodError, DecayError):
            continue
        if best is None or sol.rms_residual < best.rms_residual:
            best = sol
    if best is None or best.rms_residual > params.theta_verify:
        return None
    return OrbitRecord(object_id=f"MINED-{ordered[0].hex_hash()[:8]}",
                       elements=best.elements, bstar=0.0, source="mined")
