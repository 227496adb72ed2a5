"""POI categorization, walking-isochrone queries, and place-exposure vectors."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .hexgrid import HexGrid
from .validation import ParameterError

WALKING_SPEED_M_PER_MIN = 84.0

# Category vocabulary kept after exclusions. The source taxonomy also carries
# accommodation/agriculture/construction/industry/utilities/other, which are
# dropped at categorization time.
DEFAULT_CATEGORIES = (
    "art_museum",
    "cafe",
    "community",
    "education",
    "entertainment",
    "finance",
    "food",
    "government",
    "grocery",
    "health",
    "library",
    "office",
    "outdoor",
    "service",
    "shopping",
    "sports",
    "tourism",
    "transportation",
    "worship",
)
EXCLUDED_CATEGORIES = ("accommodation", "agriculture", "construction", "industry", "utilities", "other")


@dataclass
class PoiTable:
    """Categorized POIs (excluded categories already dropped and counted)."""

    frame: pd.DataFrame  # poi_id, lat, lon, raw_tag, category
    categories: tuple
    dropped_counts: dict = field(default_factory=dict)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def category_codes(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.categories)}
        return self.frame["category"].map(index).to_numpy(dtype=np.int64)


def categorize_pois(
    raw_pois: pd.DataFrame, mapping: dict[str, str], categories=DEFAULT_CATEGORIES
) -> PoiTable:
    """Map raw tags onto the configured category set.

    Tags mapping to excluded categories (or to anything outside the configured
    set) are dropped and counted; tags absent from the table count as unmapped.
    """
    categories = tuple(categories)
    cat_set = set(categories)
    lookup = {str(k).strip().casefold(): str(v).strip() for k, v in mapping.items()}
    dropped = Counter()
    mapped = raw_pois["raw_tag"].astype(str).str.strip().str.casefold().map(lookup)
    keep = mapped.isin(cat_set)
    for value, n in mapped[~keep].value_counts(dropna=False).items():
        dropped[str(value) if pd.notna(value) else "unmapped"] += int(n)
    frame = raw_pois.loc[keep, ["poi_id", "lat", "lon", "raw_tag"]].copy()
    frame["category"] = pd.Categorical(mapped[keep], categories=categories)
    frame = frame.sort_values("poi_id", kind="mergesort").reset_index(drop=True)
    return PoiTable(frame=frame, categories=categories, dropped_counts=dict(dropped))


class DiscIsochrone:
    """Default reachability provider: a disc of radius walking_speed * T.

    POIs are spatially indexed once; queries are boundary-inclusive.
    A precomputed network-based provider can stand in anywhere this is used.
    """

    def __init__(self, pois: PoiTable, grid: HexGrid, walking_speed: float = WALKING_SPEED_M_PER_MIN):
        self.pois = pois
        self.grid = grid
        self.walking_speed = walking_speed
        x, y = grid.project(pois.frame["lat"].to_numpy(), pois.frame["lon"].to_numpy())
        self._xy = np.column_stack([x, y])
        self._tree = cKDTree(self._xy) if len(self._xy) else None
        self._codes = pois.category_codes()

    def radius_m(self, minutes: float) -> float:
        return self.walking_speed * minutes

    def poi_indices(self, lat: float, lon: float, minutes: float) -> np.ndarray:
        if minutes <= 0:
            raise ParameterError(f"T must be positive, got {minutes}")
        if self._tree is None:
            return np.empty(0, dtype=np.int64)
        x, y = self.grid.project(lat, lon)
        hits = self._tree.query_ball_point([float(x), float(y)], r=self.radius_m(minutes))
        return np.array(sorted(hits), dtype=np.int64)

    def category_counts(self, lat: float, lon: float, minutes: float) -> np.ndarray:
        idx = self.poi_indices(lat, lon, minutes)
        counts = np.zeros(self.pois.n_categories)
        np.add.at(counts, self._codes[idx], 1.0)
        return counts


class PrecomputedIsochrone:
    """Reachable POI sets from an external (network) engine.

    Keyed by (round(lat, 6), round(lon, 6), minutes) -> sequence of row
    indices into the categorized POI table.
    """

    def __init__(self, pois: PoiTable, reachable: dict):
        self.pois = pois
        self._reachable = reachable
        self._codes = pois.category_codes()

    def poi_indices(self, lat: float, lon: float, minutes: float) -> np.ndarray:
        if minutes <= 0:
            raise ParameterError(f"T must be positive, got {minutes}")
        key = (round(float(lat), 6), round(float(lon), 6), minutes)
        return np.array(sorted(self._reachable.get(key, ())), dtype=np.int64)

    def category_counts(self, lat: float, lon: float, minutes: float) -> np.ndarray:
        idx = self.poi_indices(lat, lon, minutes)
        counts = np.zeros(self.pois.n_categories)
        np.add.at(counts, self._codes[idx], 1.0)
        return counts


def isochrone_pois(point, minutes: float, provider) -> np.ndarray:
    """Category count vector of POIs reachable within `minutes` of a point."""
    lat, lon = point
    return provider.category_counts(lat, lon, minutes)


def destination_exposure(destination_points, minutes: float, provider, normalize: bool = False):
    """Mean category counts over a person's trip destinations (with multiplicity).

    Returns None for an empty destination list (callers omit and count the
    person). With `normalize`, the mean vector is L1-normalized into shares.
    """
    points = list(destination_points)
    if not points:
        return None
    acc = np.zeros(provider.pois.n_categories)
    for lat, lon in points:
        acc += provider.category_counts(lat, lon, minutes)
    vec = acc / len(points)
    if normalize:
        total = vec.sum()
        if total > 0:
            vec = vec / total
    return vec


def home_exposure(home_point, minutes: float, provider) -> np.ndarray:
    """Single isochrone count vector at the home point."""
    lat, lon = home_point
    return provider.category_counts(lat, lon, minutes)


def person_destinations(dataset, grid: HexGrid, level: int, exclude_home: bool = True) -> dict:
    """Destination points per person, filtered consistently with the visit table.

    Keeps multiplicity; drops legs at the home cell or with a home purpose
    when `exclude_home`.
    """
    from .mixing import home_cell_keys  # local import to avoid a cycle

    legs = dataset.legs
    out: dict = {pid: [] for pid in dataset.persons["person_id"]}
    if legs.empty:
        return out
    keys = grid.bin_keys(legs["d_lat"].to_numpy(), legs["d_lon"].to_numpy(), level)
    homes = home_cell_keys(dataset, grid, level)
    home_of_row = legs["person_id"].map(homes).to_numpy()
    drop = np.zeros(len(legs), dtype=bool)
    if exclude_home:
        drop = (legs["purpose"] == "home").to_numpy() | (
            ~np.isnan(home_of_row) & (keys == np.nan_to_num(home_of_row, nan=-1).astype(np.int64))
        )
    for pid, lat, lon, dropped in zip(legs["person_id"], legs["d_lat"], legs["d_lon"], drop):
        if not dropped:
            out[pid].append((float(lat), float(lon)))
    return out


def exposure_matrices(
    dataset,
    grid: HexGrid,
    provider,
    minutes: float = 15.0,
    exclude_home: bool = True,
    level: int = 8,
    normalize_pd: bool = False,
):
    """Destination (PD) and home (PH) exposure tables for every person.

    Persons without any qualifying destination are omitted from PD and
    counted; PH requires home coordinates.
    """
    categories = provider.pois.categories
    dests = person_destinations(dataset, grid, level, exclude_home=exclude_home)
    pd_rows, pd_ids = [], []
    omitted = 0
    for pid in dataset.persons["person_id"]:
        vec = destination_exposure(dests.get(pid, []), minutes, provider, normalize=normalize_pd)
        if vec is None:
            omitted += 1
            continue
        pd_ids.append(pid)
        pd_rows.append(vec)
    pd_df = pd.DataFrame(pd_rows, columns=[f"pd_{c}" for c in categories])
    pd_df.insert(0, "person_id", pd_ids)

    ph_rows, ph_ids = [], []
    p = dataset.persons
    for pid, lat, lon in zip(p["person_id"], p["home_lat"], p["home_lon"]):
        if pd.isna(lat) or pd.isna(lon):
            continue
        ph_ids.append(pid)
        ph_rows.append(home_exposure((float(lat), float(lon)), minutes, provider))
    ph_df = pd.DataFrame(ph_rows, columns=[f"ph_{c}" for c in categories])
    ph_df.insert(0, "person_id", ph_ids)
    report = {"pd_omitted_no_destinations": omitted, "ph_missing_home": len(p) - len(ph_ids)}
    return pd_df, ph_df, report
