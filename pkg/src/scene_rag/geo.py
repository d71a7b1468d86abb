"""Great-circle distance and initial bearing on a spherical Earth."""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_KM = 6371.0
"""Mean Earth radius used by every distance in the package, in kilometres."""


class GeoDomainError(ValueError):
    """Coordinate outside the valid latitude/longitude range."""


@dataclass(frozen=True)
class GeoPoint:
    """A GPS fix in decimal degrees.  Altitude is carried, never used in the math."""

    lat_deg: float
    lon_deg: float
    alt_m: float | None = None

    def __post_init__(self):
        for name in ("lat_deg", "lon_deg"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise GeoDomainError(f"{name} must be a number, got {value!r}")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise GeoDomainError(f"lat_deg {self.lat_deg!r} outside [-90, 90]")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise GeoDomainError(f"lon_deg {self.lon_deg!r} outside [-180, 180]")
        if self.alt_m is not None:
            if isinstance(self.alt_m, bool) or not isinstance(self.alt_m, (int, float)):
                raise GeoDomainError(f"alt_m must be a number, got {self.alt_m!r}")
            if not math.isfinite(self.alt_m):
                raise GeoDomainError(f"alt_m must be finite, got {self.alt_m!r}")


def _as_point(p) -> GeoPoint:
    if isinstance(p, GeoPoint):
        return p
    return GeoPoint(*p)


def haversine_distance(p1, p2, radius_km: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance between two points, in kilometres.

    ``p1`` and ``p2`` may be :class:`GeoPoint` instances or ``(lat, lon)``
    tuples in degrees.

    >>> round(haversine_distance((0.0, 0.0), (0.0, 1.0)), 6)
    111.194927
    """
    if not radius_km > 0:
        raise ValueError(f"radius_km must be positive, got {radius_km!r}")
    a_pt, b_pt = _as_point(p1), _as_point(p2)
    phi1 = math.radians(a_pt.lat_deg)
    phi2 = math.radians(b_pt.lat_deg)
    dphi = phi2 - phi1
    dlam = math.radians(b_pt.lon_deg) - math.radians(a_pt.lon_deg)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    a = min(max(a, 0.0), 1.0)
    return 2 * radius_km * math.atan2(math.sqrt(a), math.sqrt(1 - a))


def initial_bearing(p1, p2) -> float:
    """Compass bearing from ``p1`` towards ``p2`` in degrees, within [0, 360).

    Coincident points have no direction; 0.0 is returned for them.
    """
    a_pt, b_pt = _as_point(p1), _as_point(p2)
    if (a_pt.lat_deg, a_pt.lon_deg) == (b_pt.lat_deg, b_pt.lon_deg):
        return 0.0
    phi1 = math.radians(a_pt.lat_deg)
    phi2 = math.radians(b_pt.lat_deg)
    dlam = math.radians(b_pt.lon_deg) - math.radians(a_pt.lon_deg)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    bearing = (math.degrees(math.atan2(y, x)) + 360.0) % 360.0
    # (tiny negative + 360) can round up to exactly 360.0
    return 0.0 if bearing >= 360.0 else bearing
