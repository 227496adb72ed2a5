"""Station accessibility, nearest-station distances, and transit-hub identification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .hexgrid import EARTH_RADIUS_M, HexGrid
from .survey import SurveyDataset
from .validation import ParameterError

TRAIN_ACCESS_M = 1000.0
BUS_ACCESS_M = 800.0
MORNING_WINDOW = (360.0, 660.0)
DEFAULT_HUB_SHARE = 0.6
DEFAULT_BAND_BREAKS_KM = (5.0, 10.0, 20.0)


@dataclass(frozen=True)
class Station:
    station_id: str
    kind: str  # train | bus
    lat: float
    lon: float
    open_year: int | None = None


def stations_from_frame(df: pd.DataFrame) -> list[Station]:
    out = []
    for row in df.itertuples(index=False):
        year = None if pd.isna(row.open_year) else int(row.open_year)
        out.append(Station(str(row.station_id), str(row.kind), float(row.lat), float(row.lon), year))
    return out


def filter_stations(stations, survey_year: int | None):
    """Drop stations opened during or after the survey year (unknown years kept)."""
    if survey_year is None:
        return list(stations)
    return [s for s in stations if s.open_year is None or s.open_year < survey_year]


def great_circle_m(lat1, lon1, lat2, lon2):
    """Haversine distance in meters; accepts scalars or arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


class TableDistanceProvider:
    """Network distances from a user-supplied (cell, station) table.

    Missing pairs fall back to great-circle from the query point.
    """

    def __init__(self, table: pd.DataFrame, grid: HexGrid, level: int):
        self.grid = grid
        self.level = level
        self._table = {
            (str(c), str(s)): float(m)
            for c, s, m in zip(table["cell_id"], table["station_id"], table["meters"])
        }

    def __call__(self, lat: float, lon: float, station: Station) -> float:
        cell = self.grid.bin_point(lat, lon, self.level)
        hit = self._table.get((str(cell), station.station_id))
        if hit is not None:
            return hit
        return float(great_circle_m(lat, lon, station.lat, station.lon))


def nearest_station_distance(home_point, stations, kind: str, distance_provider=None) -> float:
    """Minimum provider distance (meters) from a home point to stations of a kind."""
    lat, lon = home_point
    of_kind = [s for s in stations if s.kind == kind]
    if not of_kind:
        raise ParameterError(f"no stations of kind {kind!r}")
    if distance_provider is None:
        dists = great_circle_m(
            lat, lon, np.array([s.lat for s in of_kind]), np.array([s.lon for s in of_kind])
        )
        return float(np.min(dists))
    return min(float(distance_provider(lat, lon, s)) for s in of_kind)


def nearest_station_distances(persons: pd.DataFrame, stations, kind: str) -> np.ndarray:
    """Vectorized great-circle nearest-station distance for every person."""
    of_kind = [s for s in stations if s.kind == kind]
    if not of_kind:
        raise ParameterError(f"no stations of kind {kind!r}")
    slat = np.array([s.lat for s in of_kind])
    slon = np.array([s.lon for s in of_kind])
    out = np.full(len(persons), np.nan)
    has_home = persons["home_lat"].notna() & persons["home_lon"].notna()
    lat = persons.loc[has_home, "home_lat"].to_numpy()
    lon = persons.loc[has_home, "home_lon"].to_numpy()
    d = great_circle_m(lat[:, None], lon[:, None], slat[None, :], slon[None, :])
    out[has_home.to_numpy()] = d.min(axis=1)
    return out


def accessibility_flags(
    train_dist_m,
    bus_dist_m,
    train_threshold_m: float = TRAIN_ACCESS_M,
    bus_threshold_m: float = BUS_ACCESS_M,
):
    """Boundary-inclusive accessibility flags (train <= 1000 m, bus <= 800 m)."""
    train = np.asarray(train_dist_m, dtype=float) <= train_threshold_m
    bus = np.asarray(bus_dist_m, dtype=float) <= bus_threshold_m
    if np.isscalar(train_dist_m) or np.ndim(train_dist_m) == 0:
        return bool(train), bool(bus)
    return train, bus


@dataclass
class HubSet:
    """Morning-arrival transit hubs at the working level.

    `cells` is ordered by descending arrivals (ties by cell key); for the
    poly mode it is the minimal prefix reaching the coverage threshold.
    """

    mode: str  # mono | poly
    cells: list  # (cell_key, arrival_weight) in rank order
    coverage_share: float
    level: int

    def cell_keys(self) -> list[int]:
        return [int(c) for c, _ in self.cells]


def identify_hubs(
    dataset: SurveyDataset,
    grid: HexGrid,
    level: int,
    stations,
    window=MORNING_WINDOW,
    mode: str = "poly",
    threshold: float = DEFAULT_HUB_SHARE,
    leg_modes=("public_transit",),
    station_kind: str = "train",
) -> HubSet:
    """Expansion-weighted morning arrivals aggregated per station-containing cell.

    mono -> the single argmax cell; poly -> the shortest descending-arrival
    prefix whose cumulative share reaches `threshold`. `leg_modes=None` counts
    every leg regardless of mode.
    """
    if mode not in ("mono", "poly"):
        raise ParameterError(f"hub mode must be mono or poly, got {mode!r}")
    of_kind = [s for s in stations if s.kind == station_kind]
    if not of_kind:
        raise ParameterError(f"no stations of kind {station_kind!r}")
    station_cells = set(
        grid.bin_keys([s.lat for s in of_kind], [s.lon for s in of_kind], level).tolist()
    )

    legs = dataset.legs
    weights = pd.Series(
        dataset.persons["expansion_factor"].to_numpy(),
        index=dataset.persons["person_id"].to_numpy(),
    )
    in_window = (legs["arrive_min"] >= window[0]) & (legs["arrive_min"] <= window[1])
    if leg_modes is not None:
        in_window &= legs["mode"].isin(set(leg_modes))
    sub = legs.loc[in_window]
    if sub.empty:
        raise ParameterError("empty window: no qualifying arrivals")
    keys = grid.bin_keys(sub["d_lat"].to_numpy(), sub["d_lon"].to_numpy(), level)
    at_station = np.isin(keys, list(station_cells))
    if not at_station.any():
        raise ParameterError("empty window: no arrivals at station cells")
    arrivals = pd.DataFrame(
        {
            "cell_key": keys[at_station],
            "w": sub.loc[at_station, "person_id"].map(weights).to_numpy(),
        }
    )
    per_cell = arrivals.groupby("cell_key")["w"].sum().reset_index()
    per_cell = per_cell.sort_values(["w", "cell_key"], ascending=[False, True], kind="mergesort")
    total = per_cell["w"].sum()

    if mode == "mono":
        top = per_cell.iloc[0]
        return HubSet(
            mode="mono",
            cells=[(int(top["cell_key"]), float(top["w"]))],
            coverage_share=float(top["w"] / total),
            level=level,
        )
    cum = per_cell["w"].cumsum() / total
    n_keep = int(np.searchsorted(cum.to_numpy(), threshold, side="left")) + 1
    kept = per_cell.iloc[:n_keep]
    return HubSet(
        mode="poly",
        cells=[(int(c), float(w)) for c, w in zip(kept["cell_key"], kept["w"])],
        coverage_share=float(cum.iloc[n_keep - 1]),
        level=level,
    )


def band_labels(breaks_km=DEFAULT_BAND_BREAKS_KM) -> list[str]:
    labels = []
    lo = 0.0
    for b in breaks_km:
        labels.append(f"{lo:g}-{b:g} km")
        lo = b
    labels.append(f">{breaks_km[-1]:g} km")
    return labels


def home_hub_distance(
    home_point,
    hubs: HubSet,
    grid: HexGrid,
    breaks_km=DEFAULT_BAND_BREAKS_KM,
    distance_provider=None,
):
    """Distance (km) to the nearest hub cell center plus its band label.

    Default distance is great-circle from the home cell's center to each hub
    center (center-to-center at the working level).
    """
    if not hubs.cells:
        raise ParameterError("hub set is empty")
    lat, lon = home_point
    keys = np.array(hubs.cell_keys(), dtype=np.int64)
    if distance_provider is None:
        home_cell_lat, home_cell_lon = grid.key_centers(
            grid.bin_keys([lat], [lon], hubs.level), hubs.level
        )
        hub_lat, hub_lon = grid.key_centers(keys, hubs.level)
        d_m = great_circle_m(home_cell_lat[0], home_cell_lon[0], hub_lat, hub_lon)
        d_km = float(np.min(d_m)) / 1000.0
    else:
        d_km = min(float(distance_provider(lat, lon, int(k))) for k in keys) / 1000.0
    idx = int(np.searchsorted(np.asarray(breaks_km, dtype=float), d_km, side="left"))
    return d_km, band_labels(breaks_km)[idx]


def home_hub_distances(persons: pd.DataFrame, hubs: HubSet, grid: HexGrid,
                       breaks_km=DEFAULT_BAND_BREAKS_KM):
    """Vectorized center-to-center hub distance and band per person."""
    keys = np.array(hubs.cell_keys(), dtype=np.int64)
    hub_lat, hub_lon = grid.key_centers(keys, hubs.level)
    d_km = np.full(len(persons), np.nan)
    has_home = (persons["home_lat"].notna() & persons["home_lon"].notna()).to_numpy()
    lat = persons["home_lat"].to_numpy()[has_home]
    lon = persons["home_lon"].to_numpy()[has_home]
    home_keys = grid.bin_keys(lat, lon, hubs.level)
    hlat, hlon = grid.key_centers(home_keys, hubs.level)
    d = great_circle_m(hlat[:, None], hlon[:, None], hub_lat[None, :], hub_lon[None, :])
    d_km[has_home] = d.min(axis=1) / 1000.0
    labels = band_labels(breaks_km)
    idx = np.searchsorted(np.asarray(breaks_km, dtype=float), d_km, side="left")
    bands = pd.Categorical(
        [labels[i] if math.isfinite(dk) else None for i, dk in zip(idx, d_km)], categories=labels
    )
    return d_km, bands
