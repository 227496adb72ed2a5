"""Exposure-based social-mixing indices.

Builds expansion-weighted visit shares per person, the income composition of
each visited cell, per-person exposure vectors over income groups, and the
daytime/nighttime mixing indices, plus the census-proxy substitution
experiment and weighted group summaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from .hexgrid import HexGrid, ZoneIndex
from .survey import IncomeGrouping, SurveyDataset, assign_income_groups
from .validation import ConsistencyError, ParameterError

log = logging.getLogger(__name__)

EXPOSURE_TOL = 1e-9


@dataclass(frozen=True)
class VisitOptions:
    """Variant switches for the visit table (resolution lives on the table)."""

    time_weighted: bool = False
    exclude_home: bool = True
    day_end: float = 1440.0


@dataclass
class VisitTable:
    """Per-person visit shares over cells: rows (person_id, cell_key, weight)."""

    table: pd.DataFrame
    level: int
    options: VisitOptions
    omitted: list = field(default_factory=list)

    def person_ids(self) -> np.ndarray:
        return self.table["person_id"].unique()

    def restrict_to(self, person_ids) -> "VisitTable":
        mask = self.table["person_id"].isin(set(person_ids))
        return VisitTable(
            table=self.table.loc[mask].reset_index(drop=True),
            level=self.level,
            options=self.options,
            omitted=list(self.omitted),
        )


@dataclass
class CompositionMatrix:
    """Row-stochastic income-group composition of each visited cell."""

    cell_keys: np.ndarray
    shares: np.ndarray  # (n_cells, k)
    k: int

    def row_index(self) -> dict:
        return {int(c): i for i, c in enumerate(self.cell_keys)}


@dataclass
class MixingResult:
    """Per-person exposure vectors and mixing indices plus variant metadata."""

    frame: pd.DataFrame  # person_id, tau_0..tau_{k-1}, dm [, nm]
    k: int
    level: int
    options: VisitOptions
    proxy: bool = False

    def tau_columns(self) -> list[str]:
        return [f"tau_{q}" for q in range(self.k)]

    def tau_matrix(self) -> np.ndarray:
        return self.frame[self.tau_columns()].to_numpy()


def home_cell_keys(dataset: SurveyDataset, grid: HexGrid, level: int) -> pd.Series:
    """Cell key of each person's home point (NaN when home coords are absent)."""
    p = dataset.persons
    has_home = p["home_lat"].notna() & p["home_lon"].notna()
    keys = pd.Series(np.nan, index=p["person_id"].to_numpy(), name="home_key")
    if has_home.any():
        k = grid.bin_keys(
            p.loc[has_home, "home_lat"].to_numpy(), p.loc[has_home, "home_lon"].to_numpy(), level
        )
        keys.loc[p.loc[has_home, "person_id"].to_numpy()] = k.astype(float)
    return keys


def build_visit_table(
    dataset: SurveyDataset, grid: HexGrid, level: int, options: VisitOptions = VisitOptions()
) -> VisitTable:
    """One visit per leg destination, normalized into per-person shares.

    With `exclude_home`, destinations in the person's home cell or with a
    `home` purpose are dropped. With `time_weighted`, each visit is weighted
    by dwell minutes (until the next departure; the final visit dwells until
    `day_end`, clipped at zero). Persons with no surviving visits are omitted
    and reported on the returned table.
    """
    legs = dataset.legs
    if legs.empty:
        return VisitTable(
            table=pd.DataFrame(columns=["person_id", "cell_key", "weight"]),
            level=level,
            options=options,
        )
    dest_key = grid.bin_keys(legs["d_lat"].to_numpy(), legs["d_lon"].to_numpy(), level)
    home_keys = home_cell_keys(dataset, grid, level)
    visits = pd.DataFrame(
        {
            "person_id": legs["person_id"].to_numpy(),
            "cell_key": dest_key,
            "purpose": legs["purpose"].to_numpy(),
            "arrive_min": legs["arrive_min"].to_numpy(),
            "depart_min": legs["depart_min"].to_numpy(),
        }
    )
    if options.time_weighted:
        # Dwell ends at the next leg's departure regardless of later filtering.
        next_depart = visits.groupby("person_id")["depart_min"].shift(-1)
        dwell = next_depart.fillna(options.day_end) - visits["arrive_min"]
        visits["weight"] = dwell.clip(lower=0.0)
    else:
        visits["weight"] = 1.0

    if options.exclude_home:
        home_of_row = visits["person_id"].map(home_keys)
        at_home = (visits["purpose"] == "home") | (
            home_of_row.notna() & (visits["cell_key"] == home_of_row)
        )
        visits = visits.loc[~at_home]
    visits = visits.loc[visits["weight"] > 0, ["person_id", "cell_key", "weight"]]

    totals = visits.groupby("person_id")["weight"].transform("sum")
    visits = visits.assign(weight=visits["weight"] / totals)
    visits = (
        visits.groupby(["person_id", "cell_key"], as_index=False)["weight"]
        .sum()
        .sort_values(["person_id", "cell_key"], kind="mergesort")
        .reset_index(drop=True)
    )
    omitted = sorted(set(legs["person_id"]) - set(visits["person_id"]))
    if omitted:
        log.info("visit table omits %d persons with no surviving visits", len(omitted))
    return VisitTable(table=visits, level=level, options=options, omitted=omitted)


def place_composition(
    visits: VisitTable, grouping: IncomeGrouping, weights: pd.Series
) -> CompositionMatrix:
    """Expansion-weighted group shares of all visits at each cell (rows sum to 1)."""
    t = visits.table
    missing = set(t["person_id"].unique()) - set(grouping.assignment.index)
    if missing:
        raise ConsistencyError(f"{len(missing)} persons in visit table have no income group")
    cells, cell_idx = np.unique(t["cell_key"].to_numpy(), return_inverse=True)
    groups = grouping.assignment.loc[t["person_id"]].to_numpy()
    w = weights.loc[t["person_id"]].to_numpy(dtype=float)
    num = np.zeros((len(cells), grouping.k))
    np.add.at(num, (cell_idx, groups), w * t["weight"].to_numpy())
    denom = num.sum(axis=1)
    if np.any(denom <= 0):
        raise ConsistencyError("cell with zero total visit weight")
    return CompositionMatrix(cell_keys=cells, shares=num / denom[:, None], k=grouping.k)


def individual_exposure(visits: VisitTable, composition: CompositionMatrix) -> pd.DataFrame:
    """Per-person exposure vector over income groups: tau_iq = sum_a tau_ia * tau_aq."""
    t = visits.table
    row_of = composition.row_index()
    try:
        cell_rows = np.array([row_of[int(c)] for c in t["cell_key"]], dtype=np.int64)
    except KeyError as exc:
        raise ConsistencyError(f"visit cell {exc} absent from composition") from exc
    persons, person_idx = np.unique(t["person_id"].to_numpy(), return_inverse=True)
    tau = np.zeros((len(persons), composition.k))
    np.add.at(tau, person_idx, t["weight"].to_numpy()[:, None] * composition.shares[cell_rows])
    out = pd.DataFrame(tau, columns=[f"tau_{q}" for q in range(composition.k)])
    out.insert(0, "person_id", persons)
    return out


def leave_one_out_exposure(
    visits: VisitTable, grouping: IncomeGrouping, weights: pd.Series
) -> pd.DataFrame:
    """Exposure with the observer removed from each visited cell's composition.

    Visits to cells where the person is the only (weighted) visitor are
    dropped and the person's remaining shares renormalized; persons left with
    nothing are omitted.
    """
    t = visits.table
    missing = set(t["person_id"].unique()) - set(grouping.assignment.index)
    if missing:
        raise ConsistencyError(f"{len(missing)} persons in visit table have no income group")
    cells, cell_idx = np.unique(t["cell_key"].to_numpy(), return_inverse=True)
    groups = grouping.assignment.loc[t["person_id"]].to_numpy()
    w = weights.loc[t["person_id"]].to_numpy(dtype=float)
    tau_row = t["weight"].to_numpy()
    num = np.zeros((len(cells), grouping.k))
    np.add.at(num, (cell_idx, groups), w * tau_row)
    denom_all = num.sum(axis=1)

    persons, person_idx = np.unique(t["person_id"].to_numpy(), return_inverse=True)
    contrib = w * tau_row
    loo_denom = denom_all[cell_idx] - contrib
    keep = loo_denom > EXPOSURE_TOL
    loo_shares = np.zeros((len(t), grouping.k))
    numerators = num[cell_idx[keep]].copy()
    numerators[np.arange(keep.sum()), groups[keep]] -= contrib[keep]
    loo_shares[keep] = numerators / loo_denom[keep, None]

    tau = np.zeros((len(persons), grouping.k))
    np.add.at(tau, person_idx[keep], tau_row[keep, None] * loo_shares[keep])
    row_sum = tau.sum(axis=1)
    ok = row_sum > EXPOSURE_TOL
    tau[ok] /= row_sum[ok, None]
    out = pd.DataFrame(tau[ok], columns=[f"tau_{q}" for q in range(grouping.k)])
    out.insert(0, "person_id", persons[ok])
    return out


def daytime_mixing(tau, k: int | None = None, printed_form: bool = False):
    """Mixing index of exposure vectors: 1 - c_k * sum_q |tau_q - 1/k|.

    c_k = k / (2 (k - 1)) keeps the index in [0, 1] for any k: 1 at uniform
    exposure, 0 at one-hot. `printed_form` returns the un-complemented value
    c_k * sum|tau - 1/k| for compatibility with the segregation-style sign.
    """
    arr = np.asarray(tau, dtype=float)
    squeeze = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if k is None:
        k = arr.shape[1]
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if arr.shape[1] != k:
        raise ParameterError(f"exposure vectors have {arr.shape[1]} entries, expected {k}")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(arr < -1e-12):
        raise ParameterError("exposure rows must be non-negative and sum to 1")
    c_k = k / (2.0 * (k - 1))
    value = c_k * np.abs(arr - 1.0 / k).sum(axis=1)
    if not printed_form:
        value = 1.0 - value
    return float(value[0]) if squeeze else value


def nighttime_mixing(
    dataset: SurveyDataset, grid: HexGrid, level: int, grouping: IncomeGrouping
) -> pd.Series:
    """Mixing index of each person's home cell computed from resident composition.

    Composition uses expansion-weighted residents with an income group; a
    person alone in their cell gets the one-hot value (0), reported as is.
    """
    p = dataset.persons
    homes = home_cell_keys(dataset, grid, level)
    grouped = p["person_id"].isin(grouping.assignment.index).to_numpy()
    located = homes.loc[p["person_id"]].notna().to_numpy()
    use = grouped & located
    pids = p.loc[use, "person_id"].to_numpy()
    keys = homes.loc[pids].to_numpy().astype(np.int64)
    groups = grouping.assignment.loc[pids].to_numpy()
    w = p.loc[use, "expansion_factor"].to_numpy(dtype=float)

    cells, cell_idx = np.unique(keys, return_inverse=True)
    comp = np.zeros((len(cells), grouping.k))
    np.add.at(comp, (cell_idx, groups), w)
    denom = comp.sum(axis=1)
    ok_cell = denom > 0
    shares = np.zeros_like(comp)
    shares[ok_cell] = comp[ok_cell] / denom[ok_cell, None]

    ok_person = ok_cell[cell_idx]
    nm = daytime_mixing(shares[cell_idx[ok_person]], grouping.k)
    return pd.Series(nm, index=pids[ok_person], name="nm")


def compute_mixing(
    dataset: SurveyDataset,
    grid: HexGrid,
    level: int,
    grouping: IncomeGrouping,
    options: VisitOptions = VisitOptions(),
    leave_one_out: bool = False,
    with_nm: bool = True,
    visits: VisitTable | None = None,
) -> MixingResult:
    """Full mixing pipeline: visit table -> composition -> exposure -> DM (+NM)."""
    if visits is None:
        visits = build_visit_table(dataset, grid, level, options)
    usable = visits.restrict_to(grouping.assignment.index)
    weights = pd.Series(
        dataset.persons["expansion_factor"].to_numpy(),
        index=dataset.persons["person_id"].to_numpy(),
    )
    if leave_one_out:
        exposure = leave_one_out_exposure(usable, grouping, weights)
    else:
        composition = place_composition(usable, grouping, weights)
        exposure = individual_exposure(usable, composition)
    tau = exposure[[f"tau_{q}" for q in range(grouping.k)]].to_numpy()
    frame = exposure.copy()
    frame["dm"] = daytime_mixing(tau, grouping.k)
    if with_nm:
        nm = nighttime_mixing(dataset, grid, level, grouping)
        frame["nm"] = frame["person_id"].map(nm)
    return MixingResult(frame=frame, k=grouping.k, level=level, options=options)


@dataclass
class ProxyComparison:
    """Survey-income vs census-proxy mixing, paired per person."""

    pairs: pd.DataFrame  # person_id, dm_survey, dm_proxy, expansion_factor
    summary: dict


def proxy_income_dm(
    dataset: SurveyDataset,
    zones: ZoneIndex,
    grid: HexGrid,
    level: int,
    k: int = 4,
    options: VisitOptions = VisitOptions(),
) -> ProxyComparison:
    """Re-run the DM pipeline with incomes replaced by home-zone median income.

    Returns per-person (DM_survey, DM_proxy) pairs and the expansion-weighted
    mean relative difference. Persons outside every zone are excluded from the
    pairing and counted; a proxy income pool with fewer distinct values than k
    is flagged as a degenerate grouping.
    """
    p = dataset.persons
    visits = build_visit_table(dataset, grid, level, options)

    survey_grouping = assign_income_groups(dataset, k)
    survey_result = compute_mixing(
        dataset, grid, level, survey_grouping, options, with_nm=False, visits=visits
    )

    has_home = p["home_lat"].notna() & p["home_lon"].notna()
    zone_ids = pd.Series(None, index=p.index, dtype=object)
    zone_ids.loc[has_home] = zones.assign_many(
        p.loc[has_home, "home_lat"].to_numpy(), p.loc[has_home, "home_lon"].to_numpy()
    )
    outside = int((has_home & zone_ids.isna()).sum()) + int((~has_home).sum())
    in_zone = zone_ids.notna()
    proxy_income = zone_ids.loc[in_zone].map(lambda z: zones.zone(z).median_income)

    proxy_persons = p.loc[in_zone].copy()
    proxy_persons["income"] = proxy_income.to_numpy()
    proxy_persons = proxy_persons.loc[proxy_persons["income"].notna()]
    proxy_grouping = assign_income_groups(proxy_persons, k)
    proxy_dataset = SurveyDataset(
        persons=proxy_persons.reset_index(drop=True),
        legs=dataset.legs,
        rejects=dataset.rejects,
    )
    proxy_result = compute_mixing(
        proxy_dataset, grid, level, proxy_grouping, options, with_nm=False, visits=visits
    )

    weights = pd.Series(p["expansion_factor"].to_numpy(), index=p["person_id"].to_numpy())
    pairs = survey_result.frame[["person_id", "dm"]].rename(columns={"dm": "dm_survey"}).merge(
        proxy_result.frame[["person_id", "dm"]].rename(columns={"dm": "dm_proxy"}),
        on="person_id",
        how="inner",
    )
    pairs["expansion_factor"] = pairs["person_id"].map(weights)
    w = pairs["expansion_factor"].to_numpy()
    mean_survey = float(np.average(pairs["dm_survey"], weights=w)) if len(pairs) else float("nan")
    mean_proxy = float(np.average(pairs["dm_proxy"], weights=w)) if len(pairs) else float("nan")
    summary = {
        "n_pairs": int(len(pairs)),
        "n_outside_zones": outside,
        "mean_dm_survey": mean_survey,
        "mean_dm_proxy": mean_proxy,
        "relative_difference": (mean_proxy - mean_survey) / mean_survey if mean_survey else float("nan"),
        "degenerate_grouping": bool(proxy_grouping.degenerate),
    }
    if summary["degenerate_grouping"]:
        log.warning(
            "proxy grouping is degenerate: %d distinct proxy incomes for k=%d",
            proxy_grouping.n_distinct_incomes,
            k,
        )
    return ProxyComparison(pairs=pairs, summary=summary)


def group_summary(
    frame: pd.DataFrame, value_col: str, group_cols, weight_col: str = "expansion_factor"
) -> pd.DataFrame:
    """Expansion-weighted group means with normal-approximation 95% CIs.

    Emits one row per group (declared-but-empty categorical groups included,
    with null statistics), with the Kish effective sample size.
    """
    if isinstance(group_cols, str):
        group_cols = [group_cols]
    z95 = norm.ppf(0.975)
    rows = []
    for key, sub in frame.groupby(group_cols, observed=False, dropna=False, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        v = sub[value_col].to_numpy(dtype=float)
        w = sub[weight_col].to_numpy(dtype=float)
        ok = np.isfinite(v) & np.isfinite(w)
        v, w = v[ok], w[ok]
        if len(v) == 0 or w.sum() <= 0:
            rows.append(key + (len(v), np.nan, np.nan, np.nan, np.nan, np.nan))
            continue
        mean = np.average(v, weights=w)
        var = np.average((v - mean) ** 2, weights=w)
        n_eff = w.sum() ** 2 / (w**2).sum()
        se = np.sqrt(var / (n_eff - 1.0)) if n_eff > 1.0 else np.nan
        rows.append(key + (len(v), n_eff, mean, se, mean - z95 * se, mean + z95 * se))
    return pd.DataFrame(rows, columns=list(group_cols) + ["n", "n_eff", "mean", "se", "ci_lo", "ci_hi"])
