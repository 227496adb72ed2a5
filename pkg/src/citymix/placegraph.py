"""Spatio-temporal POI graph: four edge constructions over walk and transit times."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .hexgrid import HexGrid
from .pois import WALKING_SPEED_M_PER_MIN, PoiTable
from .validation import ParameterError

EDGE_TYPES = ("transit_binary", "transit_weighted", "dist_binary", "dist_weighted")
DEFAULT_EDGE_EPS = math.exp(-3.0)
DEFAULT_WALK_MINUTES = 15.0
DEFAULT_WALK_RADIUS_M = WALKING_SPEED_M_PER_MIN * DEFAULT_WALK_MINUTES  # 1260 m


@dataclass
class PlaceGraph:
    """Undirected weighted POI graph; nodes carry category codes and xy meters."""

    node_ids: np.ndarray
    categories: np.ndarray  # int codes into category_names
    category_names: tuple
    xy: np.ndarray  # (n, 2) projected meters
    edges: np.ndarray  # (m, 2) node indices, i < j, lexicographically sorted
    weights: np.ndarray  # (m,), in (0, 1]
    edge_type: str
    scale: float  # alpha (minutes or meters) for weighted types, cutoff otherwise

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


class WalkTransitTimes:
    """Door-to-door travel-time model between points.

    Time is the better of a direct walk and a transit route via each point's
    nearest stop: walk to stop + half-headway wait + station-to-station ride
    (from a table when supplied, else straight line at `ride_speed`) + walk
    from stop. A precomputed station ride-time table overrides the default.
    """

    def __init__(
        self,
        station_xy: np.ndarray | None,
        station_ids=None,
        walking_speed: float = WALKING_SPEED_M_PER_MIN,
        headway_min: float = 10.0,
        ride_speed_m_per_min: float = 500.0,
        ride_table: dict | None = None,
    ):
        self.walking_speed = walking_speed
        self.wait_min = headway_min / 2.0
        self.station_xy = None if station_xy is None or len(station_xy) == 0 else np.asarray(station_xy, float)
        self.station_ids = list(station_ids) if station_ids is not None else None
        self._tree = cKDTree(self.station_xy) if self.station_xy is not None else None
        if self.station_xy is not None:
            d = np.sqrt(
                ((self.station_xy[:, None, :] - self.station_xy[None, :, :]) ** 2).sum(-1)
            )
            self._ride = d / ride_speed_m_per_min
            if ride_table:
                if self.station_ids is None:
                    raise ParameterError("ride_table requires station_ids")
                pos = {sid: i for i, sid in enumerate(self.station_ids)}
                for (a, b), minutes in ride_table.items():
                    ia, ib = pos[a], pos[b]
                    self._ride[ia, ib] = self._ride[ib, ia] = float(minutes)
        else:
            self._ride = None

    @property
    def has_transit(self) -> bool:
        return self._tree is not None

    def nearest_stop(self, xy: np.ndarray):
        """(station index, walk minutes to it) for each point."""
        d, idx = self._tree.query(xy)
        return idx.astype(np.int64), d / self.walking_speed

    def ride_minutes(self, i, j):
        return self._ride[i, j]


def _walk_pairs(tree: cKDTree, radius_m: float) -> np.ndarray:
    pairs = tree.query_pairs(r=radius_m, output_type="ndarray")
    return pairs.astype(np.int64)


def _transit_candidate_pairs(times: WalkTransitTimes, xy: np.ndarray, budget_min: float):
    """Pairs whose nearest-stop transit route can fit in the time budget."""
    stop_idx, walk_min = times.nearest_stop(xy)
    usable = walk_min <= budget_min - times.wait_min
    members: dict[int, np.ndarray] = {}
    for s in np.unique(stop_idx[usable]):
        members[int(s)] = np.nonzero(usable & (stop_idx == s))[0]
    pairs = []
    stations = sorted(members)
    for ai, a in enumerate(stations):
        for b in stations[ai + 1 :]:
            core = times.wait_min + times.ride_minutes(a, b)
            slack = budget_min - core
            if slack <= 0:
                continue
            na = members[a][walk_min[members[a]] <= slack]
            nb = members[b][walk_min[members[b]] <= slack]
            if len(na) == 0 or len(nb) == 0:
                continue
            total = walk_min[na][:, None] + walk_min[nb][None, :]
            ii, jj = np.nonzero(total <= slack)
            if len(ii):
                pa, pb = na[ii], nb[jj]
                lo = np.minimum(pa, pb)
                hi = np.maximum(pa, pb)
                pairs.append(np.column_stack([lo, hi]))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64), stop_idx, walk_min
    return np.unique(np.vstack(pairs), axis=0), stop_idx, walk_min


def build_place_graph(
    pois: PoiTable,
    grid: HexGrid,
    edge_type: str,
    alpha: float | None = None,
    minutes: float = DEFAULT_WALK_MINUTES,
    radius_m: float = DEFAULT_WALK_RADIUS_M,
    eps: float = DEFAULT_EDGE_EPS,
    times: WalkTransitTimes | None = None,
) -> PlaceGraph:
    """Build one of the four edge constructions over the categorized POIs.

    transit_binary: w = 1 iff min(walk, transit) time <= `minutes`.
    transit_weighted: w = exp(-t / alpha), kept while w >= eps (alpha in minutes).
    dist_binary: w = 1 iff distance <= `radius_m`.
    dist_weighted: w = exp(-d / alpha), kept while w >= eps (alpha in meters).

    Spatial candidate search is index-based (no all-pairs scan); transit types
    without a station model fall back to walk times only.
    """
    if edge_type not in EDGE_TYPES:
        raise ParameterError(f"unknown edge_type {edge_type!r}; expected one of {EDGE_TYPES}")
    frame = pois.frame
    node_ids = frame["poi_id"].to_numpy()
    x, y = grid.project(frame["lat"].to_numpy(), frame["lon"].to_numpy())
    xy = np.column_stack([x, y])
    tree = cKDTree(xy) if len(xy) else None

    if edge_type == "dist_binary":
        pairs = _walk_pairs(tree, radius_m) if tree else np.empty((0, 2), np.int64)
        weights = np.ones(len(pairs))
        scale = radius_m
    elif edge_type == "dist_weighted":
        a = radius_m if alpha is None else float(alpha)
        rmax = -a * math.log(eps)
        pairs = _walk_pairs(tree, rmax) if tree else np.empty((0, 2), np.int64)
        d = np.sqrt(((xy[pairs[:, 0]] - xy[pairs[:, 1]]) ** 2).sum(axis=1)) if len(pairs) else np.empty(0)
        weights = np.exp(-d / a)
        scale = a
    else:
        a = minutes if alpha is None else float(alpha)
        budget = minutes if edge_type == "transit_binary" else -a * math.log(eps)
        walk_pairs = (
            _walk_pairs(tree, WALKING_SPEED_M_PER_MIN * budget) if tree else np.empty((0, 2), np.int64)
        )
        if times is not None and times.has_transit:
            transit_pairs, stop_idx, walk_min = _transit_candidate_pairs(times, xy, budget)
            pairs = (
                np.unique(np.vstack([walk_pairs, transit_pairs]), axis=0)
                if len(walk_pairs) or len(transit_pairs)
                else np.empty((0, 2), np.int64)
            )
        else:
            pairs, stop_idx, walk_min = walk_pairs, None, None
        if len(pairs):
            d = np.sqrt(((xy[pairs[:, 0]] - xy[pairs[:, 1]]) ** 2).sum(axis=1))
            t = d / WALKING_SPEED_M_PER_MIN
            if stop_idx is not None:
                ride = times.ride_minutes(stop_idx[pairs[:, 0]], stop_idx[pairs[:, 1]])
                t_transit = (
                    walk_min[pairs[:, 0]] + times.wait_min + ride + walk_min[pairs[:, 1]]
                )
                t = np.minimum(t, t_transit)
        else:
            t = np.empty(0)
        if edge_type == "transit_binary":
            keep = t <= minutes
            pairs, weights = pairs[keep], np.ones(int(keep.sum()))
            scale = minutes
        else:
            weights = np.exp(-t / a)
            keep = weights >= eps
            pairs, weights = pairs[keep], weights[keep]
            scale = a

    if len(pairs):
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs, weights = pairs[order], weights[order]
    return PlaceGraph(
        node_ids=node_ids,
        categories=pois.category_codes(),
        category_names=pois.categories,
        xy=xy,
        edges=pairs,
        weights=weights,
        edge_type=edge_type,
        scale=float(scale),
    )
