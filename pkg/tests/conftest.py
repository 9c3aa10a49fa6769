"""Shared helpers for building observable geometries in tests."""
import math
import random

from sdachain.astro import (
    Epoch,
    GroundSite,
    KeplerianElements,
    OrbitRecord,
    R_EARTH,
    gmst,
    norm,
    propagate_j2,
)


def site_under(record: OrbitRecord, t: Epoch, site_id: str = "SITE",
               lon_off_deg: float = 3.0, j2: float = None) -> GroundSite:
    """Ground site directly beneath the object at time t, nudged in longitude.

    The offset keeps the object away from zenith so azimuth stays well
    conditioned while elevation remains high for the whole arc. Pass
    j2=0.0 when the observations themselves are two-body so placement
    and data share the same dynamics.
    """
    if j2 is None:
        sv = propagate_j2(record.elements, record.bstar, t)
    else:
        sv = propagate_j2(record.elements, record.bstar, t, j2=j2)
    lat = math.asin(max(-1.0, min(1.0, sv.r[2] / norm(sv.r))))
    lon = math.atan2(sv.r[1], sv.r[0]) - gmst(t) + math.radians(lon_off_deg)
    lon = (lon + math.pi) % (2.0 * math.pi) - math.pi
    return GroundSite(site_id=site_id, lat=lat, lon=lon)


def leo_record(rng: random.Random, object_id: str = "LEO") -> OrbitRecord:
    """Random LEO record with perigee kept safely above the atmosphere model."""
    a = rng.uniform(7000.0, 7600.0)
    e_max = min(0.02, 1.0 - (R_EARTH + 250.0) / a)
    el = KeplerianElements(
        a=a,
        e=rng.uniform(0.001, e_max),
        i=rng.uniform(0.1, 1.6),
        raan=rng.uniform(0.0, 2.0 * math.pi),
        argp=rng.uniform(0.0, 2.0 * math.pi),
        M=rng.uniform(0.0, 2.0 * math.pi),
        epoch=Epoch(0.0),
    )
    return OrbitRecord(object_id=object_id, elements=el)
