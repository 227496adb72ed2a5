"""Hexagonal spatial binning on a local flat-top axial lattice, plus census-zone lookup.

Cells form an aperture-7 hierarchy: edge lengths shrink by sqrt(7) per level,
anchored at 530 m for level 8. Points are projected with a local
equirectangular map around a configured origin; the distortion is below
0.5% for cities under ~100 km across, which is all this lattice is meant for.
Exact H3 ids are not reproduced, only the role of an equal-size hex binning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from shapely import STRtree
from shapely.geometry import Point, Polygon

from .validation import ParameterError, check_finite

EARTH_RADIUS_M = 6_371_008.8
LEVEL8_EDGE_M = 530.0
MIN_LEVEL = 4
MAX_LEVEL = 10
SQRT3 = math.sqrt(3.0)
SQRT7 = math.sqrt(7.0)

# Axial neighbor offsets of a flat-top hexagon, in (q, r) lexicographic order
# so that equidistant candidates resolve to the smaller (q, r).
_NEIGHBOR_OFFSETS = np.array(
    [(-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0)], dtype=np.int64
)

_KEY_OFFSET = 1 << 25
_KEY_BASE = 1 << 26


def edge_length_m(level: int) -> float:
    """Hex edge length in meters at a level (level 8 = 530 m, sqrt(7) per step)."""
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ParameterError(f"level must be in {MIN_LEVEL}..{MAX_LEVEL}, got {level}")
    return LEVEL8_EDGE_M * SQRT7 ** (8 - level)


@dataclass(frozen=True, order=True)
class CellId:
    """A hex cell: resolution level plus axial (q, r) lattice coordinates."""

    level: int
    q: int
    r: int

    def key(self) -> int:
        return cell_key(self.q, self.r)

    def __str__(self) -> str:
        return f"{self.level}:{self.q}:{self.r}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        try:
            level, q, r = (int(part) for part in text.split(":"))
        except ValueError as exc:
            raise ParameterError(f"bad cell id {text!r}") from exc
        return cls(level, q, r)


def cell_key(q, r):
    """Pack axial coordinates into one int64, monotone in (q, r) lex order."""
    q = np.asarray(q, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    if np.any(np.abs(q) >= _KEY_OFFSET) or np.any(np.abs(r) >= _KEY_OFFSET):
        raise ParameterError("axial coordinates out of packable range")
    return (q + _KEY_OFFSET) * _KEY_BASE + (r + _KEY_OFFSET)


def key_to_qr(key):
    key = np.asarray(key, dtype=np.int64)
    q = key // _KEY_BASE - _KEY_OFFSET
    r = key % _KEY_BASE - _KEY_OFFSET
    return q, r


class HexGrid:
    """Deterministic hex binning anchored at an origin latitude/longitude.

    All binning is nearest-center over the flat-top lattice; boundary ties
    resolve toward the lexicographically smaller (q, r).
    """

    def __init__(self, origin_lat: float, origin_lon: float):
        check_finite("grid origin", origin_lat, origin_lon)
        self.origin_lat = float(origin_lat)
        self.origin_lon = float(origin_lon)
        self._coslat0 = math.cos(math.radians(self.origin_lat))

    # -- projection -------------------------------------------------------

    def project(self, lat, lon):
        """Lat/lon degrees to local equirectangular (x, y) meters."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        x = np.radians(lon - self.origin_lon) * self._coslat0 * EARTH_RADIUS_M
        y = np.radians(lat - self.origin_lat) * EARTH_RADIUS_M
        return x, y

    def unproject(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        lat = self.origin_lat + np.degrees(y / EARTH_RADIUS_M)
        lon = self.origin_lon + np.degrees(x / (EARTH_RADIUS_M * self._coslat0))
        return lat, lon

    # -- binning ----------------------------------------------------------

    def bin_points_xy(self, x, y, level: int):
        """Vectorized binning of projected points; returns (q, r) int64 arrays."""
        edge = edge_length_m(level)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ParameterError("coordinates must be finite")
        qf = x / (1.5 * edge)
        rf = y / (SQRT3 * edge) - qf / 2.0
        q0, r0 = _cube_round(qf, rf)
        # Candidate refinement makes the boundary tie rule explicit: among the
        # rounded cell and its six neighbors, take the nearest center, ties to
        # the smaller (q, r).
        qc = q0[:, None] + _NEIGHBOR_OFFSETS[:, 0][None, :]
        rc = r0[:, None] + _NEIGHBOR_OFFSETS[:, 1][None, :]
        cx = 1.5 * edge * qc
        cy = SQRT3 * edge * (rc + qc / 2.0)
        d2 = (cx - x[:, None]) ** 2 + (cy - y[:, None]) ** 2
        pick = np.argmin(d2, axis=1)
        rows = np.arange(len(x))
        return qc[rows, pick], rc[rows, pick]

    def bin_points(self, lats, lons, level: int):
        x, y = self.project(lats, lons)
        return self.bin_points_xy(x, y, level)

    def bin_point(self, lat: float, lon: float, level: int) -> CellId:
        q, r = self.bin_points([lat], [lon], level)
        return CellId(level, int(q[0]), int(r[0]))

    def bin_keys(self, lats, lons, level: int) -> np.ndarray:
        q, r = self.bin_points(lats, lons, level)
        return cell_key(q, r)

    # -- centers and hierarchy ---------------------------------------------

    def cell_center_xy(self, cell: CellId):
        edge = edge_length_m(cell.level)
        return 1.5 * edge * cell.q, SQRT3 * edge * (cell.r + cell.q / 2.0)

    def cell_center(self, cell: CellId):
        x, y = self.cell_center_xy(cell)
        lat, lon = self.unproject(x, y)
        return float(lat), float(lon)

    def key_centers_xy(self, keys, level: int):
        q, r = key_to_qr(keys)
        edge = edge_length_m(level)
        return 1.5 * edge * q, SQRT3 * edge * (r + q / 2.0)

    def key_centers(self, keys, level: int):
        x, y = self.key_centers_xy(keys, level)
        return self.unproject(x, y)

    def parent_cell(self, cell: CellId, coarser_level: int) -> CellId:
        """The cell containing this cell's center at a coarser level."""
        if coarser_level >= cell.level:
            raise ParameterError(
                f"coarser_level must be < cell level ({cell.level}), got {coarser_level}"
            )
        lat, lon = self.cell_center(cell)
        return self.bin_point(lat, lon, coarser_level)


def _cube_round(qf, rf):
    sf = -qf - rf
    q = np.round(qf)
    r = np.round(rf)
    s = np.round(sf)
    dq = np.abs(q - qf)
    dr = np.abs(r - rf)
    ds = np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


@dataclass
class CensusZone:
    """A census-style polygonal zone with its income and population summary."""

    zone_id: str
    median_income: float
    population: int
    rings: list  # list of vertex lists [(lat, lon), ...]; ring 0 outer, rest holes


class ZoneIndex:
    """Point-in-polygon lookup over census zones.

    Points on a shared edge resolve to the lexicographically smallest zone_id.
    """

    def __init__(self, zones: list[CensusZone]):
        if not zones:
            raise ParameterError("zone list is empty")
        self.zones = sorted(zones, key=lambda z: z.zone_id)
        self._polygons = []
        for z in self.zones:
            shell = [(lon, lat) for lat, lon in z.rings[0]]
            holes = [[(lon, lat) for lat, lon in ring] for ring in z.rings[1:]]
            self._polygons.append(Polygon(shell, holes))
        self._tree = STRtree(self._polygons)
        self._by_id = {z.zone_id: z for z in self.zones}

    def zone(self, zone_id: str) -> CensusZone:
        return self._by_id[zone_id]

    def assign(self, lat: float, lon: float) -> str | None:
        pt = Point(lon, lat)
        hits = sorted(int(i) for i in self._tree.query(pt))
        for i in hits:
            if self._polygons[i].covers(pt):
                return self.zones[i].zone_id
        return None

    def assign_many(self, lats, lons) -> list:
        return [self.assign(lat, lon) for lat, lon in zip(np.asarray(lats), np.asarray(lons))]


def assign_census_zone(lat: float, lon: float, zones) -> str | None:
    """Zone containing the point, or None; shared edges go to the smaller zone_id."""
    index = zones if isinstance(zones, ZoneIndex) else ZoneIndex(list(zones))
    return index.assign(lat, lon)
