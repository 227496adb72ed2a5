"""Deterministic synthetic cities with tunable residential segregation (rho)
and income-stratified destination choice (mu), plus brute-force oracles.

The generator exists to plant effects the estimators must recover, not to
model a real city: incomes are log-normal, homes fill a square zone grid in
a rho-blended income order, POIs sit in four clusters with drifting category
mixtures, and trips follow a gravity rule that the mu parameter biases toward
each group's own cluster. Identical (params, seed) produce byte-identical
bundles.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .hexgrid import HexGrid
from .mixing import VisitOptions
from .pois import DEFAULT_CATEGORIES
from .survey import SurveyDataset, weighted_rank_partition
from .validation import ParameterError

MODE_CHOICES = ("public_transit", "private_car", "walk", "bike")
MODE_PROBS = (0.45, 0.35, 0.15, 0.05)
PURPOSE_CHOICES = ("work", "shop", "school", "other")
PURPOSE_PROBS = (0.35, 0.30, 0.10, 0.25)
EXCLUDED_TAGS = {"warehouse": "industry", "hotel": "accommodation", "substation": "utilities"}


@dataclass
class CityParams:
    n_persons: int = 2000
    n_zones: int = 16
    extent_km: float = 20.0
    rho: float = 0.5
    mu: float = 0.0
    n_pois: int = 800
    legs_per_person: tuple = (2, 5)
    seed: int = 0
    survey_year: int = 2015
    n_train_stations: int = 6
    n_bus_stations: int = 40
    zone_margin_km: float = 0.8
    gravity_scale_km: float = 3.0
    p_return_home: float = 0.7
    origin_lat: float = 40.0
    origin_lon: float = -75.0
    k_groups: int = 4
    income_sigma: float = 0.75
    categories: tuple = field(default_factory=lambda: DEFAULT_CATEGORIES)

    def validate(self):
        side = int(round(math.sqrt(self.n_zones)))
        if side * side != self.n_zones:
            raise ParameterError(f"n_zones must be a perfect square, got {self.n_zones}")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("rho must be in [0, 1]")
        if not 0.0 <= self.mu <= 1.0:
            raise ParameterError("mu must be in [0, 1]")
        if self.zone_margin_km * 2 >= self.extent_km / side:
            raise ParameterError("zone margin too large for the zone size")
        lo, hi = self.legs_per_person
        if lo < 1 or hi < lo:
            raise ParameterError("legs_per_person must be (lo >= 1, hi >= lo)")
        return self


@dataclass
class CityBundle:
    params: CityParams
    persons: pd.DataFrame
    legs: pd.DataFrame
    pois: pd.DataFrame
    stations: pd.DataFrame
    zones: pd.DataFrame
    zone_vertices: pd.DataFrame
    poi_mapping: pd.DataFrame

    def dataset(self) -> SurveyDataset:
        return SurveyDataset(
            persons=self.persons.copy(), legs=self.legs.copy(), rejects=pd.DataFrame()
        )

    def grid(self) -> HexGrid:
        return HexGrid(self.params.origin_lat, self.params.origin_lon)


def generate_city(params: CityParams) -> CityBundle:
    params.validate()
    rng = np.random.default_rng(params.seed)
    grid = HexGrid(params.origin_lat, params.origin_lon)
    n = params.n_persons
    side = int(round(math.sqrt(params.n_zones)))
    extent_m = params.extent_km * 1000.0
    zone_side_m = extent_m / side
    half = extent_m / 2.0

    # households share an income; persons carry individual expansion weights
    person_ids = np.array([f"p{i:06d}" for i in range(n)])
    household_of = np.empty(n, dtype=object)
    ages = np.empty(n, dtype=np.int64)
    hh_income: list[float] = []
    hh_index = np.empty(n, dtype=np.int64)
    i = 0
    hh = 0
    while i < n:
        size = int(rng.integers(1, 5))
        size = min(size, n - i)
        income = float(rng.lognormal(mean=math.log(40_000.0), sigma=params.income_sigma))
        hh_income.append(income)
        for m in range(size):
            household_of[i] = f"h{hh:05d}"
            hh_index[i] = hh
            if m == 0:
                ages[i] = int(rng.integers(22, 81))
            else:
                ages[i] = int(rng.integers(1, 18)) if rng.random() < 0.4 else int(rng.integers(18, 81))
            i += 1
        hh += 1
    incomes = np.array(hh_income)[hh_index]
    weights = rng.lognormal(mean=0.0, sigma=0.3, size=n)
    genders = rng.choice(("female", "male", "other"), size=n, p=(0.49, 0.49, 0.02))
    statuses = rng.choice(
        ("full_time", "part_time", "student", "homemaker", "retired", "unemployed"),
        size=n,
        p=(0.45, 0.12, 0.15, 0.08, 0.12, 0.08),
    )

    # rho-blended placement: score interpolates between income rank and noise
    order = np.lexsort((person_ids, incomes))
    rank = np.empty(n)
    rank[order] = np.arange(n) / max(n - 1, 1)
    score = params.rho * rank + (1.0 - params.rho) * rng.uniform(size=n)
    zone_of = weighted_rank_partition(
        pd.DataFrame({"score": score, "person_id": person_ids}), weights, params.n_zones
    )

    margin = params.zone_margin_km * 1000.0
    zx = zone_of % side
    zy = zone_of // side
    home_x = -half + zx * zone_side_m + margin + rng.uniform(size=n) * (zone_side_m - 2 * margin)
    home_y = -half + zy * zone_side_m + margin + rng.uniform(size=n) * (zone_side_m - 2 * margin)
    home_lat, home_lon = grid.unproject(home_x, home_y)

    car_p = 0.15 + 0.7 * rank
    car = (rng.uniform(size=n) < car_p).astype(np.int64)

    persons = pd.DataFrame(
        {
            "person_id": person_ids,
            "household_id": household_of,
            "age": ages,
            "gender": genders,
            "work_status": statuses,
            "income": incomes,
            "expansion_factor": weights,
            "home_lat": np.asarray(home_lat),
            "home_lon": np.asarray(home_lon),
            "car_ownership": car,
        }
    )

    # POI clusters along the diagonal with drifting category mixtures
    k = params.k_groups
    n_cat = len(params.categories)
    centers = np.array(
        [(-half + (c + 0.5) * extent_m / k, -half + (c + 0.5) * extent_m / k) for c in range(k)]
    )
    cluster_of_poi = rng.integers(0, k, size=params.n_pois)
    sigma = extent_m / 14.0
    poi_x = np.clip(centers[cluster_of_poi, 0] + rng.normal(size=params.n_pois) * sigma, -half, half)
    poi_y = np.clip(centers[cluster_of_poi, 1] + rng.normal(size=params.n_pois) * sigma, -half, half)
    cat_idx = np.arange(n_cat)
    mix = np.empty((k, n_cat))
    for c in range(k):
        center_idx = (c + 0.5) * n_cat / k
        mix[c] = np.exp(-((cat_idx - center_idx) ** 2) / (2 * (n_cat / 6.0) ** 2))
        mix[c] /= mix[c].sum()
    poi_cat = np.array(
        [rng.choice(n_cat, p=mix[c]) for c in cluster_of_poi], dtype=np.int64
    )
    raw_tags = np.array([params.categories[c] for c in poi_cat], dtype=object)
    excluded_mask = rng.uniform(size=params.n_pois) < 0.03
    excluded_names = list(EXCLUDED_TAGS)
    raw_tags[excluded_mask] = [
        excluded_names[int(j)] for j in rng.integers(0, len(excluded_names), size=int(excluded_mask.sum()))
    ]
    poi_lat, poi_lon = grid.unproject(poi_x, poi_y)
    pois = pd.DataFrame(
        {
            "poi_id": [f"poi{i:06d}" for i in range(params.n_pois)],
            "lat": np.asarray(poi_lat),
            "lon": np.asarray(poi_lon),
            "raw_tag": raw_tags,
        }
    )
    usable_poi = ~excluded_mask

    mapping_rows = [(c, c) for c in params.categories] + sorted(EXCLUDED_TAGS.items())
    poi_mapping = pd.DataFrame(mapping_rows, columns=["raw", "standard"])

    # income groups drive the mu-biased destination choice
    grouping = weighted_rank_partition(
        pd.DataFrame({"income": incomes, "person_id": person_ids}), weights, k
    )

    poi_xy = np.column_stack([poi_x, poi_y])
    lam = params.gravity_scale_km * 1000.0
    leg_rows: list[tuple] = []
    lo, hi = params.legs_per_person
    chunk = 512
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        hx = home_x[start:stop, None]
        hy = home_y[start:stop, None]
        d = np.sqrt((poi_xy[None, :, 0] - hx) ** 2 + (poi_xy[None, :, 1] - hy) ** 2)
        gravity = np.exp(-d / lam) * usable_poi[None, :]
        for row, idx in enumerate(range(start, stop)):
            pid = person_ids[idx]
            g = grouping[idx]
            full = gravity[row]
            full_p = full / full.sum()
            own = full * (cluster_of_poi == g)
            own_sum = own.sum()
            own_p = own / own_sum if own_sum > 0 else full_p
            n_legs = int(rng.integers(lo, hi + 1))
            t = float(rng.uniform(400, 560))
            cur_x, cur_y = home_x[idx], home_y[idx]
            made = 0
            for leg in range(n_legs):
                last = leg == n_legs - 1
                go_home = last and rng.random() < params.p_return_home and made > 0
                if go_home:
                    dest_x, dest_y = home_x[idx], home_y[idx]
                    purpose = "home"
                else:
                    p = own_p if rng.random() < params.mu else full_p
                    j = int(rng.choice(params.n_pois, p=p))
                    dest_x, dest_y = poi_xy[j]
                    purpose = str(rng.choice(PURPOSE_CHOICES, p=PURPOSE_PROBS))
                travel = float(rng.uniform(10, 40))
                arrive = t + travel
                if arrive > 1560:
                    break
                o_lat, o_lon = grid.unproject(cur_x, cur_y)
                d_lat, d_lon = grid.unproject(dest_x, dest_y)
                mode = str(rng.choice(MODE_CHOICES, p=MODE_PROBS))
                leg_rows.append(
                    (pid, made, float(o_lat), float(o_lon), float(d_lat), float(d_lon),
                     t, arrive, mode, purpose)
                )
                made += 1
                cur_x, cur_y = dest_x, dest_y
                t = arrive + float(rng.uniform(30, 150))
    legs = pd.DataFrame(
        leg_rows,
        columns=[
            "person_id", "leg_index", "o_lat", "o_lon", "d_lat", "d_lon",
            "depart_min", "arrive_min", "mode", "purpose",
        ],
    )

    # train stations at cluster centers (plus extras), one opened post-survey
    station_rows = []
    extra = max(0, params.n_train_stations - k)
    train_xy = list(centers)
    for j in range(extra):
        train_xy.append(
            np.array([rng.uniform(-half, half), rng.uniform(-half, half)])
        )
    for j, (sx, sy) in enumerate(train_xy):
        lat, lon = grid.unproject(sx, sy)
        station_rows.append((f"train{j:03d}", "train", float(lat), float(lon), params.survey_year - 10))
    lat, lon = grid.unproject(rng.uniform(-half, half), rng.uniform(-half, half))
    station_rows.append((f"train{len(train_xy):03d}", "train", float(lat), float(lon), params.survey_year + 1))
    for j in range(params.n_bus_stations):
        lat, lon = grid.unproject(rng.uniform(-half, half), rng.uniform(-half, half))
        station_rows.append((f"bus{j:03d}", "bus", float(lat), float(lon), None))
    stations = pd.DataFrame(station_rows, columns=["station_id", "kind", "lat", "lon", "open_year"])

    # zone summaries and polygons
    zone_ids = [f"z{z:03d}" for z in range(params.n_zones)]
    zone_rows = []
    vert_rows = []
    for z in range(params.n_zones):
        members = zone_of == z
        med = float(np.median(incomes[members])) if members.any() else float("nan")
        zone_rows.append((zone_ids[z], med, int(members.sum())))
        x0 = -half + (z % side) * zone_side_m
        y0 = -half + (z // side) * zone_side_m
        corners = [(x0, y0), (x0 + zone_side_m, y0), (x0 + zone_side_m, y0 + zone_side_m),
                   (x0, y0 + zone_side_m), (x0, y0)]
        for cx, cy in corners:
            lat, lon = grid.unproject(cx, cy)
            vert_rows.append((zone_ids[z], 0, float(lat), float(lon)))
    zones = pd.DataFrame(zone_rows, columns=["zone_id", "median_income", "population"])
    zone_vertices = pd.DataFrame(vert_rows, columns=["zone_id", "ring", "lat", "lon"])

    return CityBundle(
        params=params,
        persons=persons,
        legs=legs,
        pois=pois,
        stations=stations,
        zones=zones,
        zone_vertices=zone_vertices,
        poi_mapping=poi_mapping,
    )


def write_city(bundle: CityBundle, outdir) -> dict:
    """Write the bundle in the canonical CSV schemas plus params.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "persons": outdir / "persons.csv",
        "legs": outdir / "legs.csv",
        "pois": outdir / "pois.csv",
        "poi_mapping": outdir / "poi_mapping.csv",
        "stations": outdir / "stations.csv",
        "zones": outdir / "zones.csv",
        "zone_vertices": outdir / "zone_vertices.csv",
    }
    io.write_csv(bundle.persons, paths["persons"])
    io.write_csv(bundle.legs, paths["legs"])
    io.write_csv(bundle.pois, paths["pois"])
    io.write_csv(bundle.poi_mapping, paths["poi_mapping"])
    io.write_csv(bundle.stations, paths["stations"])
    io.write_csv(bundle.zones, paths["zones"])
    io.write_csv(bundle.zone_vertices, paths["zone_vertices"])
    params = asdict(bundle.params)
    params["categories"] = list(params["categories"])
    params["legs_per_person"] = list(params["legs_per_person"])
    io.write_json(params, outdir / "params.json")
    return {name: str(p) for name, p in paths.items()}


# --- oracles (test reference implementations; plain loops, no factored matrices)


def oracle_exposure(
    dataset: SurveyDataset,
    assignment,
    k: int,
    grid: HexGrid,
    level: int,
    options: VisitOptions = VisitOptions(),
) -> dict:
    """Direct per-visit accumulation of tau_iq and the mixing index.

    Re-derives visit shares from the legs with plain dictionaries and loops;
    used only as ground truth in tests.
    """
    assignment = dict(assignment)
    persons = dataset.persons
    weight_of = dict(zip(persons["person_id"], persons["expansion_factor"]))
    home_key: dict = {}
    for pid, lat, lon in zip(persons["person_id"], persons["home_lat"], persons["home_lon"]):
        if pd.notna(lat) and pd.notna(lon):
            home_key[pid] = grid.bin_point(float(lat), float(lon), level).key()

    by_person: dict = {}
    for row in dataset.legs.itertuples(index=False):
        by_person.setdefault(row.person_id, []).append(row)

    shares: dict = {}
    for pid, rows in by_person.items():
        if pid not in assignment:
            continue
        rows = sorted(rows, key=lambda r: (r.depart_min, r.leg_index))
        visits = []
        for i, row in enumerate(rows):
            cell = grid.bin_point(float(row.d_lat), float(row.d_lon), level).key()
            if options.time_weighted:
                end = rows[i + 1].depart_min if i + 1 < len(rows) else options.day_end
                w = max(0.0, float(end) - float(row.arrive_min))
            else:
                w = 1.0
            if options.exclude_home and (row.purpose == "home" or cell == home_key.get(pid)):
                continue
            if w > 0:
                visits.append((cell, w))
        total = sum(w for _, w in visits)
        if total <= 0:
            continue
        acc: dict = {}
        for cell, w in visits:
            acc[cell] = acc.get(cell, 0.0) + w / total
        shares[pid] = acc

    comp: dict = {}
    for pid, acc in shares.items():
        q = assignment[pid]
        w = weight_of[pid]
        for cell, tau in acc.items():
            comp.setdefault(cell, [0.0] * k)[q] += w * tau

    c_k = k / (2.0 * (k - 1))
    out = {}
    for pid, acc in shares.items():
        tau_iq = [0.0] * k
        for cell, tau in acc.items():
            totals = comp[cell]
            denom = sum(totals)
            for q in range(k):
                tau_iq[q] += tau * totals[q] / denom
        dm = 1.0 - c_k * sum(abs(t - 1.0 / k) for t in tau_iq)
        out[pid] = (tau_iq, dm)
    return out


def oracle_lmg(X, y, groups: dict) -> dict:
    """Average incremental R^2 over every ordering of the groups (<= 4)."""
    if len(groups) > 4:
        raise ParameterError("ordering oracle supports at most 4 groups")
    if isinstance(X, pd.DataFrame):
        M = X.to_numpy(dtype=float)
        col_of = {c: j for j, c in enumerate(X.columns)}
        cols_for = lambda members: [col_of[m] for m in members]
        base = [col_of["const"]] if "const" in col_of else []
    else:
        M = np.asarray(X, dtype=float)
        cols_for = lambda members: [int(m) for m in members]
        base = []
    y = np.asarray(y, dtype=float)

    def r2(cols):
        cols = sorted(set(base + cols))
        if not cols:
            return 0.0
        sub = M[:, cols]
        beta, *_ = np.linalg.lstsq(sub, y, rcond=None)
        sst = float(((y - y.mean()) ** 2).sum())
        if sst == 0:
            return 0.0
        return 1.0 - float(((y - sub @ beta) ** 2).sum()) / sst

    names = list(groups)
    shares = {name: 0.0 for name in names}
    perms = list(itertools.permutations(names))
    for perm in perms:
        cols: list = []
        prev = r2(cols)
        for name in perm:
            cols = cols + cols_for(groups[name])
            cur = r2(cols)
            shares[name] += cur - prev
            prev = cur
    return {name: s / len(perms) for name, s in shares.items()}
