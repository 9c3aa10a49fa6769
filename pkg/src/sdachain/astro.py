"""Time, frames, Keplerian machinery, and the reference orbit propagator.

Everything downstream (sensor synthesis, orbit determination, validation)
builds on the primitives here: epochs on a uniform leap-second-free
timescale, ECI state vectors, classical element sets, and a fixed-step
RK4 propagator with two-body + J2 + exponential-atmosphere drag forces.

Conventions:
  * distances in km, velocities in km/s, angles in radians, time in
    seconds since the J2000 epoch (2000-01-01T12:00:00).
  * ECI is the inertial frame of the J2000 epoch; ECEF rotates with a
    linear GMST model (no precession/nutation/polar motion).
  * the Earth is treated as a sphere of radius R_EARTH for site
    geometry, so the local zenith is exactly radial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta

from .errors import SdaError

# Geophysical constants (WGS-84 / EGM96 values).  Immutable for a run and
# echoed into every scenario report for provenance.
MU_EARTH = 398600.4418        # km^3/s^2
J2_EARTH = 1.08262668e-3      # oblateness coefficient, dimensionless
R_EARTH = 6378.137            # km, equatorial radius
EARTH_ROT = 7.2921159e-5      # rad/s, sidereal rotation rate
GMST_J2000 = 4.894961212823   # rad, Greenwich mean sidereal angle at J2000

# Exponential atmosphere used by the drag force (simulation-defined proxy).
DRAG_RHO0 = 1e-4              # kg/km^3 at the reference altitude
DRAG_H0 = 400.0               # km, reference altitude
DRAG_SCALE_H = 60.0           # km, scale height

DECAY_ALTITUDE = 100.0        # km, integration aborts below this
MIN_STEP_S = 1.0
MAX_STEP_S = 60.0
MAX_SPAN_S = 30 * 86400.0     # propagation span limit

TWO_PI = 2.0 * math.pi

_J2000_DATETIME = datetime(2000, 1, 1, 12, 0, 0)


def constants_dict() -> dict:
    """Constants and force-model settings, echoed into scenario reports."""
    return {
        "mu_km3_s2": MU_EARTH,
        "j2": J2_EARTH,
        "re_km": R_EARTH,
        "earth_rot_rad_s": EARTH_ROT,
        "gmst_j2000_rad": GMST_J2000,
        "drag_rho0_kg_km3": DRAG_RHO0,
        "drag_h0_km": DRAG_H0,
        "drag_scale_height_km": DRAG_SCALE_H,
        "decay_altitude_km": DECAY_ALTITUDE,
    }


class AstroError(SdaError):
    pass


class KeplerConvergenceError(AstroError):
    """Kepler-equation Newton solve failed to converge."""


class UnsupportedRegimeError(AstroError):
    """State is hyperbolic/parabolic/rectilinear; only bound ellipses are handled."""


class DecayError(AstroError):
    """Trajectory dropped below the decay altitude during integration."""


def wrap_two_pi(angle: float) -> float:
    """Normalize an angle to [0, 2*pi)."""
    a = math.fmod(angle, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    return a if a < TWO_PI else 0.0


@dataclass(frozen=True, order=True)
class Epoch:
    """Seconds since J2000 on a uniform timescale (no leap seconds)."""

    t: float

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("epoch must be finite")

    def plus(self, seconds: float) -> "Epoch":
        return Epoch(self.t + seconds)

    def iso(self) -> str:
        """ISO-8601 text with microsecond resolution (the canonical form)."""
        dt = _J2000_DATETIME + timedelta(seconds=self.t)
        return dt.isoformat(timespec="microseconds")

    @classmethod
    def from_iso(cls, text: str) -> "Epoch":
        dt = datetime.fromisoformat(text)
        return cls((dt - _J2000_DATETIME).total_seconds())

    def quantized(self) -> "Epoch":
        """Round to the microsecond grid the ISO text form can represent."""
        return Epoch(round(self.t * 1e6) / 1e6)


@dataclass(frozen=True)
class StateVector:
    """ECI position (km) and velocity (km/s) at an epoch."""

    epoch: Epoch
    r: tuple
    v: tuple

    def __post_init__(self):
        if len(self.r) != 3 or len(self.v) != 3:
            raise ValueError("r and v must be 3-vectors")
        if not all(math.isfinite(c) for c in (*self.r, *self.v)):
            raise ValueError("state components must be finite")


@dataclass(frozen=True)
class KeplerianElements:
    """Osculating elements of a bound elliptic orbit at an epoch.

    Angles are radians; raan/argp/M are normalized to [0, 2*pi) on
    construction.  This element set is the simulator's TLE analogue.
    """

    a: float       # semi-major axis, km
    e: float       # eccentricity
    i: float       # inclination, rad
    raan: float    # right ascension of ascending node, rad
    argp: float    # argument of perigee, rad
    M: float       # mean anomaly at epoch, rad
    epoch: Epoch

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.a, self.e, self.i, self.raan, self.argp, self.M)):
            raise ValueError("elements must be finite")
        if self.a <= 0.0:
            raise ValueError(f"semi-major axis must be positive, got {self.a}")
        if not 0.0 <= self.e < 1.0:
            raise ValueError(f"eccentricity must be in [0, 1), got {self.e}")
        if not 0.0 <= self.i <= math.pi:
            raise ValueError(f"inclination must be in [0, pi], got {self.i}")
        object.__setattr__(self, "raan", wrap_two_pi(self.raan))
        object.__setattr__(self, "argp", wrap_two_pi(self.argp))
        object.__setattr__(self, "M", wrap_two_pi(self.M))

    def mean_motion(self) -> float:
        return math.sqrt(MU_EARTH / self.a**3)

    def period(self) -> float:
        return TWO_PI / self.mean_motion()

    def key(self) -> tuple:
        """Hashable identity used for caching and canonical serialization."""
        return (self.a, self.e, self.i, self.raan, self.argp, self.M, self.epoch.t)


@dataclass(frozen=True)
class OrbitRecord:
    """Catalog entry: elements plus a ballistic coefficient (drag proxy)."""

    object_id: str
    elements: KeplerianElements
    bstar: float = 0.0    # 1/km
    source: str = "cataloged"    # cataloged | mined | calibration

    def __post_init__(self):
        if not self.object_id:
            raise ValueError("object_id must be nonempty")
        if self.source not in ("cataloged", "mined", "calibration"):
            raise ValueError(f"unknown source {self.source!r}")
        if not math.isfinite(self.bstar):
            raise ValueError("bstar must be finite")


@dataclass(frozen=True)
class GroundSite:
    """Sensor location: geodetic latitude/longitude (rad) and altitude (km)."""

    site_id: str
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not self.site_id:
            raise ValueError("site_id must be nonempty")
        if abs(self.lat) > math.pi / 2:
            raise ValueError(f"latitude out of range: {self.lat}")
        if self.alt < 0.0:
            raise ValueError(f"altitude must be nonnegative: {self.alt}")


# --- small 3-vector helpers (tuples keep the hot paths allocation-light) ---

def dot(a, b) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def cross(a, b) -> tuple:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def norm(a) -> float:
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def unit(a) -> tuple:
    n = norm(a)
    return (a[0] / n, a[1] / n, a[2] / n)


# --- Kepler machinery ---

def solve_kepler(M: float, e: float, tol: float = 1e-14, max_iter: int = 50) -> float:
    """Solve M = E - e*sin(E) for E by Newton iteration."""
    E = M if e < 0.8 else math.pi
    for _ in range(max_iter):
        f = E - e * math.sin(E) - M
        dE = f / (1.0 - e * math.cos(E))
        E -= dE
        if abs(dE) < tol:
            return E
    raise KeplerConvergenceError(
        f"Kepler solve did not converge in {max_iter} iterations (M={M!r}, e={e!r})"
    )


def kepler_to_state(el: KeplerianElements, t: Epoch) -> StateVector:
    """Unperturbed two-body state at t for the orbit defined by el."""
    dt = t.t - el.epoch.t
    M = wrap_two_pi(el.M + el.mean_motion() * dt)
    try:
        E = solve_kepler(M, el.e)
    except KeplerConvergenceError as exc:
        raise KeplerConvergenceError(f"{exc}; elements={el!r}") from exc

    cosE, sinE = math.cos(E), math.sin(E)
    one_m_e2 = 1.0 - el.e * el.e
    r_mag = el.a * (1.0 - el.e * cosE)
    # Perifocal (PQW) coordinates.
    xp = el.a * (cosE - el.e)
    yp = el.a * math.sqrt(one_m_e2) * sinE
    coeff = math.sqrt(MU_EARTH * el.a) / r_mag
    vxp = -coeff * sinE
    vyp = coeff * math.sqrt(one_m_e2) * cosE

    cO, sO = math.cos(el.raan), math.sin(el.raan)
    co, so = math.cos(el.argp), math.sin(el.argp)
    ci, si = math.cos(el.i), math.sin(el.i)
    # Rz(-raan) Rx(-i) Rz(-argp) rotation, rows applied to (xp, yp).
    r11 = cO * co - sO * so * ci
    r12 = -cO * so - sO * co * ci
    r21 = sO * co + cO * so * ci
    r22 = -sO * so + cO * co * ci
    r31 = so * si
    r32 = co * si

    r = (r11 * xp + r12 * yp, r21 * xp + r22 * yp, r31 * xp + r32 * yp)
    v = (r11 * vxp + r12 * vyp, r21 * vxp + r22 * vyp, r31 * vxp + r32 * vyp)
    return StateVector(epoch=t, r=r, v=v)


def state_to_kepler(s: StateVector) -> KeplerianElements:
    """Osculating elements from an ECI state; inverse of kepler_to_state."""
    r_vec, v_vec = s.r, s.v
    r = norm(r_vec)
    v2 = dot(v_vec, v_vec)
    h_vec = cross(r_vec, v_vec)
    h = norm(h_vec)
    if h < 1e-9:
        raise UnsupportedRegimeError("rectilinear state (|r x v| ~ 0)")

    energy = 0.5 * v2 - MU_EARTH / r
    rv = dot(r_vec, v_vec)
    e_vec = (
        ((v2 - MU_EARTH / r) * r_vec[0] - rv * v_vec[0]) / MU_EARTH,
        ((v2 - MU_EARTH / r) * r_vec[1] - rv * v_vec[1]) / MU_EARTH,
        ((v2 - MU_EARTH / r) * r_vec[2] - rv * v_vec[2]) / MU_EARTH,
    )
    e = norm(e_vec)
    if e >= 1.0 or energy >= 0.0:
        raise UnsupportedRegimeError(f"non-elliptic state (e={e:.6f})")
    a = -MU_EARTH / (2.0 * energy)

    i = math.acos(max(-1.0, min(1.0, h_vec[2] / h)))
    n_vec = (-h_vec[1], h_vec[0], 0.0)    # node vector = z x h
    n = norm(n_vec)

    equatorial = n < 1e-12 * h
    circular = e < 1e-12

    if equatorial:
        raan = 0.0
        node_ref = (1.0, 0.0, 0.0)
    else:
        raan = wrap_two_pi(math.atan2(n_vec[1], n_vec[0]))
        node_ref = (n_vec[0] / n, n_vec[1] / n, 0.0)

    if circular:
        argp = 0.0
        # True anomaly measured from the node reference direction.
        cos_nu = max(-1.0, min(1.0, dot(node_ref, r_vec) / r))
        nu = math.acos(cos_nu)
        if dot(cross(node_ref, r_vec), h_vec) < 0.0:
            nu = TWO_PI - nu
    else:
        e_hat = (e_vec[0] / e, e_vec[1] / e, e_vec[2] / e)
        cos_w = max(-1.0, min(1.0, dot(node_ref, e_hat)))
        argp = math.acos(cos_w)
        if dot(cross(node_ref, e_vec), h_vec) < 0.0:
            argp = TWO_PI - argp
        cos_nu = max(-1.0, min(1.0, dot(e_hat, r_vec) / r))
        nu = math.acos(cos_nu)
        if rv < 0.0:
            nu = TWO_PI - nu

    # Eccentric and mean anomaly from the true anomaly.
    E = math.atan2(math.sqrt(1.0 - e * e) * math.sin(nu), e + math.cos(nu))
    M = wrap_two_pi(E - e * math.sin(E))
    return KeplerianElements(a=a, e=e, i=i, raan=wrap_two_pi(raan),
                             argp=wrap_two_pi(argp), M=M, epoch=s.epoch)


# --- numerical propagation: two-body + J2 + exponential drag, fixed-step RK4 ---
#
# States are advanced along an absolute step grid anchored at the element
# epoch (grid point k sits at epoch + k*step), with one partial RK4 step from
# the last grid point to the target.  Propagating to t2 therefore passes
# through exactly the same intermediate states as propagating to any t1
# between the anchor and t2, which makes the per-orbit grid cacheable without
# changing results.


def _deriv(x, y, z, vx, vy, vz, bstar, j2):
    r2 = x * x + y * y + z * z
    r = math.sqrt(r2)
    c = -MU_EARTH / (r2 * r)
    ax = c * x
    ay = c * y
    az = c * z
    if j2 != 0.0:
        k = -1.5 * j2 * MU_EARTH * R_EARTH * R_EARTH / (r2 * r2 * r)
        five_z2_r2 = 5.0 * z * z / r2
        ax += k * x * (1.0 - five_z2_r2)
        ay += k * y * (1.0 - five_z2_r2)
        az += k * z * (3.0 - five_z2_r2)
    if bstar != 0.0:
        rho = DRAG_RHO0 * math.exp(-((r - R_EARTH) - DRAG_H0) / DRAG_SCALE_H)
        rvx = vx + EARTH_ROT * y
        rvy = vy - EARTH_ROT * x
        vr = math.sqrt(rvx * rvx + rvy * rvy + vz * vz)
        d = -bstar * rho * vr
        ax += d * rvx
        ay += d * rvy
        az += d * vz
    return ax, ay, az


def _rk4_step(state, h, bstar, j2):
    x, y, z, vx, vy, vz = state
    ax1, ay1, az1 = _deriv(x, y, z, vx, vy, vz, bstar, j2)

    h2 = 0.5 * h
    x2 = x + h2 * vx
    y2 = y + h2 * vy
    z2 = z + h2 * vz
    vx2 = vx + h2 * ax1
    vy2 = vy + h2 * ay1
    vz2 = vz + h2 * az1
    ax2, ay2, az2 = _deriv(x2, y2, z2, vx2, vy2, vz2, bstar, j2)

    x3 = x + h2 * vx2
    y3 = y + h2 * vy2
    z3 = z + h2 * vz2
    vx3 = vx + h2 * ax2
    vy3 = vy + h2 * ay2
    vz3 = vz + h2 * az2
    ax3, ay3, az3 = _deriv(x3, y3, z3, vx3, vy3, vz3, bstar, j2)

    x4 = x + h * vx3
    y4 = y + h * vy3
    z4 = z + h * vz3
    vx4 = vx + h * ax3
    vy4 = vy + h * ay3
    vz4 = vz + h * az3
    ax4, ay4, az4 = _deriv(x4, y4, z4, vx4, vy4, vz4, bstar, j2)

    k = h / 6.0
    return (
        x + k * (vx + 2.0 * (vx2 + vx3) + vx4),
        y + k * (vy + 2.0 * (vy2 + vy3) + vy4),
        z + k * (vz + 2.0 * (vz2 + vz3) + vz4),
        vx + k * (ax1 + 2.0 * (ax2 + ax3) + ax4),
        vy + k * (ay1 + 2.0 * (ay2 + ay3) + ay4),
        vz + k * (az1 + 2.0 * (az2 + az3) + az4),
    )


def _check_altitude(state, epoch_t):
    r = math.sqrt(state[0] ** 2 + state[1] ** 2 + state[2] ** 2)
    alt = r - R_EARTH
    if alt < DECAY_ALTITUDE:
        raise DecayError(
            f"altitude {alt:.1f} km below {DECAY_ALTITUDE:.0f} km at t={epoch_t:.1f}"
        )


class _GridEntry:
    __slots__ = ("anchor", "forward", "backward", "decay_fwd", "decay_bwd")

    def __init__(self, anchor):
        self.anchor = anchor        # 6-tuple at the element epoch
        self.forward = [anchor]     # grid states at epoch + k*step
        self.backward = [anchor]    # grid states at epoch - k*step
        self.decay_fwd = None       # grid index at which decay was hit
        self.decay_bwd = None


class _GridCache:
    """LRU cache of per-orbit step grids, bounded by total grid points."""

    def __init__(self, max_points: int = 2_500_000):
        self.max_points = max_points
        self._entries: dict = {}
        self._points = 0

    def clear(self):
        self._entries.clear()
        self._points = 0

    def get(self, key, anchor) -> _GridEntry:
        entry = self._entries.pop(key, None)
        if entry is None:
            entry = _GridEntry(anchor)
            self._points += 2
        self._entries[key] = entry    # reinsert = mark most recent
        while self._points > self.max_points and len(self._entries) > 1:
            oldest_key = next(iter(self._entries))
            old = self._entries.pop(oldest_key)
            self._points -= len(old.forward) + len(old.backward)
        return entry

    def grew(self, n: int):
        self._points += n


_grid_cache = _GridCache()


def clear_propagation_cache():
    """Drop all cached step grids (results are unaffected, only speed)."""
    _grid_cache.clear()


def propagate_j2(el: KeplerianElements, bstar: float, t: Epoch,
                 step_s: float = 10.0, *, j2: float = J2_EARTH,
                 use_cache: bool = True) -> StateVector:
    """Numerically propagated state at t: two-body + J2 + drag, RK4.

    The force model is the chain's reference propagator; j2 is exposed as
    a test hook to recover the pure two-body limit.  Deterministic for
    fixed inputs whether or not the grid cache is used.
    """
    if not MIN_STEP_S <= step_s <= MAX_STEP_S:
        raise ValueError(f"step_s must be in [{MIN_STEP_S}, {MAX_STEP_S}], got {step_s}")
    dt = t.t - el.epoch.t
    if abs(dt) > MAX_SPAN_S:
        raise ValueError(f"span {dt / 86400.0:.1f} days exceeds {MAX_SPAN_S / 86400.0:.0f}-day limit")

    anchor_sv = kepler_to_state(el, el.epoch)
    anchor = (*anchor_sv.r, *anchor_sv.v)
    _check_altitude(anchor, el.epoch.t)

    n_full = int(abs(dt) // step_s)
    rem = abs(dt) - n_full * step_s
    sign = 1.0 if dt >= 0.0 else -1.0
    h = sign * step_s

    if use_cache:
        key = (el.key(), bstar, step_s, j2)
        entry = _grid_cache.get(key, anchor)
        states = entry.forward if dt >= 0.0 else entry.backward
        decay_at = entry.decay_fwd if dt >= 0.0 else entry.decay_bwd
        if decay_at is not None and n_full >= decay_at:
            raise DecayError(
                f"altitude below {DECAY_ALTITUDE:.0f} km at grid step {decay_at} "
                f"(t={el.epoch.t + sign * decay_at * step_s:.1f})"
            )
        while len(states) <= n_full:
            k = len(states)
            nxt = _rk4_step(states[-1], h, bstar, j2)
            try:
                _check_altitude(nxt, el.epoch.t + sign * k * step_s)
            except DecayError:
                if dt >= 0.0:
                    entry.decay_fwd = k
                else:
                    entry.decay_bwd = k
                raise
            states.append(nxt)
            _grid_cache.grew(1)
        state = states[n_full]
    else:
        state = anchor
        for k in range(1, n_full + 1):
            state = _rk4_step(state, h, bstar, j2)
            _check_altitude(state, el.epoch.t + sign * k * step_s)

    if rem > 0.0:
        state = _rk4_step(state, sign * rem, bstar, j2)
        _check_altitude(state, t.t)

    return StateVector(epoch=t, r=state[:3], v=state[3:])


def propagate_record(record: OrbitRecord, t: Epoch, step_s: float = 10.0) -> StateVector:
    """Propagate a catalog record with its own ballistic coefficient."""
    return propagate_j2(record.elements, record.bstar, t, step_s)


# --- observation geometry ---

def gmst(epoch: Epoch) -> float:
    """Greenwich mean sidereal angle, linear model."""
    return wrap_two_pi(GMST_J2000 + EARTH_ROT * epoch.t)


def site_eci(site: GroundSite, epoch: Epoch) -> tuple:
    """ECI position of a ground site (spherical Earth)."""
    radius = R_EARTH + site.alt
    lam = site.lon + gmst(epoch)
    cphi = math.cos(site.lat)
    return (
        radius * cphi * math.cos(lam),
        radius * cphi * math.sin(lam),
        radius * math.sin(site.lat),
    )


def _enu_basis(site: GroundSite, epoch: Epoch):
    lam = site.lon + gmst(epoch)
    sl, cl = math.sin(lam), math.cos(lam)
    sp, cp = math.sin(site.lat), math.cos(site.lat)
    east = (-sl, cl, 0.0)
    north = (-sp * cl, -sp * sl, cp)
    up = (cp * cl, cp * sl, sp)
    return east, north, up


def topocentric_angles(s: StateVector, site: GroundSite) -> tuple:
    """(azimuth, elevation, slant range) of a state as seen from a site.

    Azimuth is clockwise from north in [0, 2*pi); elevation in
    [-pi/2, pi/2]; range in km.
    """
    rs = site_eci(site, s.epoch)
    rho = (s.r[0] - rs[0], s.r[1] - rs[1], s.r[2] - rs[2])
    east, north, up = _enu_basis(site, s.epoch)
    e = dot(rho, east)
    n = dot(rho, north)
    u = dot(rho, up)
    rng = math.sqrt(e * e + n * n + u * u)
    az = wrap_two_pi(math.atan2(e, n))
    el = math.asin(max(-1.0, min(1.0, u / rng)))
    return az, el, rng


def topocentric_radec(s: StateVector, site: GroundSite) -> tuple:
    """(right ascension, declination, slant range) of the line of sight."""
    rs = site_eci(site, s.epoch)
    rho = (s.r[0] - rs[0], s.r[1] - rs[1], s.r[2] - rs[2])
    rng = norm(rho)
    ra = wrap_two_pi(math.atan2(rho[1], rho[0]))
    dec = math.asin(max(-1.0, min(1.0, rho[2] / rng)))
    return ra, dec, rng


def angles_to_unit_vector(az: float, el: float, site: GroundSite, epoch: Epoch) -> tuple:
    """ECI line-of-sight unit vector for an az/el observation."""
    ce = math.cos(el)
    u_enu = (ce * math.sin(az), ce * math.cos(az), math.sin(el))
    east, north, up = _enu_basis(site, epoch)
    return (
        u_enu[0] * east[0] + u_enu[1] * north[0] + u_enu[2] * up[0],
        u_enu[0] * east[1] + u_enu[1] * north[1] + u_enu[2] * up[1],
        u_enu[0] * east[2] + u_enu[1] * north[2] + u_enu[2] * up[2],
    )


def radec_to_unit_vector(ra: float, dec: float) -> tuple:
    """ECI line-of-sight unit vector for an RA/DEC observation."""
    cd = math.cos(dec)
    return (cd * math.cos(ra), cd * math.sin(ra), math.sin(dec))


def angular_separation(az1: float, el1: float, az2: float, el2: float) -> float:
    """Great-circle separation of two directions, haversine form.

    Stable for very small separations; result in [0, pi].  Works for
    az/el and ra/dec pairs alike.
    """
    sde = math.sin(0.5 * (el2 - el1))
    sda = math.sin(0.5 * (az2 - az1))
    h = sde * sde + math.cos(el1) * math.cos(el2) * sda * sda
    return 2.0 * math.asin(min(1.0, math.sqrt(h)))
