"""Travel-survey ingestion: schema validation, category standardization,
expansion-weighted income grouping, caregiver flags, and population filters."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import io
from .validation import ParameterError, SchemaError

GENDERS = ("female", "male", "other")
WORK_STATUSES = ("full_time", "part_time", "student", "homemaker", "retired", "unemployed", "other")
MODES = ("public_transit", "private_car", "walk", "bike", "other")
PURPOSES = ("home", "work", "school", "shop", "other")

FIELD_ENUMS = {"gender": GENDERS, "work_status": WORK_STATUSES, "mode": MODES, "purpose": PURPOSES}
# Catch-all category per field; unmapped raw values land here and are counted.
FIELD_CATCH_ALL = {"gender": "other", "work_status": "other", "mode": "other", "purpose": "other"}

# Defaults cover common survey vocabularies; real deployments ship their own tables.
DEFAULT_MAPPINGS = {
    "mode": {
        "public_transit": "public_transit", "subway": "public_transit", "metro": "public_transit",
        "rail": "public_transit", "train": "public_transit", "bus": "public_transit",
        "tram": "public_transit", "ferry": "public_transit", "transit": "public_transit",
        "private_car": "private_car", "car": "private_car", "auto": "private_car",
        "drive": "private_car", "driver": "private_car", "passenger": "private_car",
        "taxi": "private_car", "motorcycle": "private_car",
        "walk": "walk", "foot": "walk", "walking": "walk",
        "bike": "bike", "bicycle": "bike", "cycle": "bike", "cycling": "bike",
        "other": "other",
    },
    "work_status": {
        "full_time": "full_time", "full-time": "full_time", "fulltime": "full_time",
        "employed": "full_time", "part_time": "part_time", "part-time": "part_time",
        "parttime": "part_time", "student": "student", "pupil": "student",
        "homemaker": "homemaker", "housewife": "homemaker", "home making": "homemaker",
        "retired": "retired", "unemployed": "unemployed", "jobless": "unemployed",
        "other": "other",
    },
    "purpose": {
        "home": "home", "return home": "home", "work": "work", "business": "work",
        "school": "school", "education": "school", "shop": "shop", "shopping": "shop",
        "errand": "shop", "other": "other", "leisure": "other", "social": "other",
    },
    "gender": {
        "female": "female", "f": "female", "woman": "female",
        "male": "male", "m": "male", "man": "male",
        "other": "other", "unknown": "other", "": "other",
    },
}


class CategoryMapper:
    """Raw-to-standard lookup for one categorical field, with an unmapped counter."""

    def __init__(self, field_name: str, mapping: dict[str, str] | None = None):
        if field_name not in FIELD_ENUMS:
            raise ParameterError(f"unknown categorical field {field_name!r}")
        self.field = field_name
        self.mapping = dict(DEFAULT_MAPPINGS[field_name]) if mapping is None else {
            str(k).strip().casefold(): str(v).strip() for k, v in mapping.items()
        }
        bad = sorted(set(self.mapping.values()) - set(FIELD_ENUMS[field_name]))
        if bad:
            raise SchemaError(f"mapping for {field_name!r} targets unknown categories {bad}")
        self.unmapped = Counter()

    @classmethod
    def from_csv(cls, path, field_name: str) -> "CategoryMapper":
        return cls(field_name, io.read_mapping_table(path))

    def standardize(self, raw) -> str:
        key = str(raw).strip().casefold()
        hit = self.mapping.get(key)
        if hit is None:
            self.unmapped[key] += 1
            return FIELD_CATCH_ALL[self.field]
        return hit

    def standardize_series(self, series: pd.Series) -> pd.Series:
        return series.map(self.standardize)


def standardize_categories(raw_value, field_name: str, mapper: CategoryMapper | None = None) -> str:
    """Map one raw categorical value onto the field's standard enum."""
    if mapper is None:
        mapper = CategoryMapper(field_name)
    if mapper.field != field_name:
        raise ParameterError(f"mapper is for {mapper.field!r}, not {field_name!r}")
    return mapper.standardize(raw_value)


@dataclass
class SurveyDataset:
    """Validated persons and trip legs plus the rejects report for failed rows."""

    persons: pd.DataFrame
    legs: pd.DataFrame
    rejects: pd.DataFrame
    unmapped_counts: dict = field(default_factory=dict)

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    @property
    def n_legs(self) -> int:
        return len(self.legs)

    def legs_per_person(self) -> pd.Series:
        counts = self.legs.groupby("person_id").size()
        return counts.reindex(self.persons["person_id"], fill_value=0)


def _coerce(series: pd.Series) -> tuple[pd.Series, pd.Series]:
    """Numeric coercion; second return flags values that were present but unparseable."""
    raw = series.astype(str).str.strip()
    num = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
    bad = (raw != "") & num.isna()
    return num, bad


def load_survey(persons_path, legs_path, schema_config: dict | None = None,
                mappers: dict[str, CategoryMapper] | None = None) -> SurveyDataset:
    """Load and validate the canonical persons/legs CSVs.

    Rows that violate invariants are routed to the rejects report with a
    reason, never silently dropped. `schema_config` maps canonical column
    names to the file's actual names, per table: {"persons": {...}, "legs": {...}}.
    """
    schema_config = schema_config or {}
    mappers = mappers or {}
    for fname in FIELD_ENUMS:
        mappers.setdefault(fname, CategoryMapper(fname))

    persons_raw = io.read_persons_csv(_maybe_renamed(persons_path, schema_config.get("persons")))
    legs_raw = io.read_legs_csv(_maybe_renamed(legs_path, schema_config.get("legs")))

    rejects: list[tuple] = []  # (source, row, person_id, reason)

    # --- persons -----------------------------------------------------------
    p = persons_raw.copy()
    p["person_id"] = p["person_id"].astype(str).str.strip()
    p["household_id"] = p["household_id"].astype(str).str.strip()
    age, age_bad = _coerce(p["age"])
    income, income_bad = _coerce(p["income"])
    weight, weight_bad = _coerce(p["expansion_factor"])
    hlat, hlat_bad = _coerce(p["home_lat"])
    hlon, hlon_bad = _coerce(p["home_lon"])
    car = pd.Series(0.0, index=p.index)
    if "car_ownership" in p.columns:
        car, car_bad = _coerce(p["car_ownership"])
        car = car.fillna(0.0)
    reason = pd.Series("", index=p.index)
    reason[p["person_id"] == ""] = "missing person_id"
    reason[(reason == "") & (p["household_id"] == "")] = "missing household_id"
    reason[(reason == "") & (age_bad | age.isna())] = "bad age"
    reason[(reason == "") & (age < 0)] = "age<0"
    reason[(reason == "") & (weight_bad | weight.isna())] = "bad weight"
    reason[(reason == "") & (weight < 0)] = "weight<0"
    reason[(reason == "") & income_bad] = "bad income"
    reason[(reason == "") & (income < 0)] = "income<0"
    reason[(reason == "") & (hlat_bad | hlon_bad)] = "bad home coords"
    reason[(reason == "") & p["person_id"].duplicated(keep="first")] = "duplicate person_id"

    keep = reason == ""
    for idx in p.index[~keep]:
        rejects.append(("persons", int(idx), p.at[idx, "person_id"], reason.at[idx]))

    persons = pd.DataFrame(
        {
            "person_id": p.loc[keep, "person_id"],
            "household_id": p.loc[keep, "household_id"],
            "age": age[keep].round().astype("int64"),
            "gender": mappers["gender"].standardize_series(p.loc[keep, "gender"]),
            "work_status": mappers["work_status"].standardize_series(p.loc[keep, "work_status"]),
            "income": income[keep],
            "expansion_factor": weight[keep],
            "home_lat": hlat[keep],
            "home_lon": hlon[keep],
            "car_ownership": car[keep],
        }
    ).reset_index(drop=True)

    # --- legs --------------------------------------------------------------
    known = set(persons["person_id"])
    l = legs_raw.copy()
    l["person_id"] = l["person_id"].astype(str).str.strip()
    numeric = {}
    bad_numeric = pd.Series(False, index=l.index)
    for col in ("leg_index", "o_lat", "o_lon", "d_lat", "d_lon", "depart_min", "arrive_min"):
        numeric[col], bad = _coerce(l[col])
        bad_numeric |= bad | numeric[col].isna()
    reason = pd.Series("", index=l.index)
    reason[~l["person_id"].isin(known)] = "unknown person"
    reason[(reason == "") & bad_numeric] = "unparseable field"
    reason[(reason == "") & (numeric["arrive_min"] < numeric["depart_min"])] = "arrive<depart"
    out_of_day = (numeric["depart_min"] < 0) | (numeric["arrive_min"] > 1620)
    reason[(reason == "") & out_of_day] = "time out of range"

    keep = reason == ""
    for idx in l.index[~keep]:
        rejects.append(("legs", int(idx), l.at[idx, "person_id"], reason.at[idx]))

    legs = pd.DataFrame(
        {
            "person_id": l.loc[keep, "person_id"],
            "leg_index": numeric["leg_index"][keep].astype("int64"),
            "o_lat": numeric["o_lat"][keep],
            "o_lon": numeric["o_lon"][keep],
            "d_lat": numeric["d_lat"][keep],
            "d_lon": numeric["d_lon"][keep],
            "depart_min": numeric["depart_min"][keep],
            "arrive_min": numeric["arrive_min"][keep],
            "mode": mappers["mode"].standardize_series(l.loc[keep, "mode"]),
            "purpose": mappers["purpose"].standardize_series(l.loc[keep, "purpose"]),
        }
    )
    legs = legs.sort_values(["person_id", "depart_min", "leg_index"], kind="mergesort")
    legs["leg_index"] = legs.groupby("person_id").cumcount()
    legs = legs.reset_index(drop=True)

    rejects_df = pd.DataFrame(rejects, columns=["source", "row", "person_id", "reason"])
    unmapped = {name: dict(m.unmapped) for name, m in mappers.items()}
    return SurveyDataset(persons=persons, legs=legs, rejects=rejects_df, unmapped_counts=unmapped)


def _maybe_renamed(path, renames: dict | None):
    if not renames:
        return path
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df = df.rename(columns={v: k for k, v in renames.items()})
    import io as _io

    buf = _io.StringIO()
    df.to_csv(buf, index=False)
    buf.seek(0)
    return buf


@dataclass
class IncomeGrouping:
    """Expansion-weighted rank grouping of persons into k ordered income groups."""

    k: int
    assignment: pd.Series  # person_id -> group index 0..k-1
    cut_points: np.ndarray  # k-1 income values at the group boundaries
    n_distinct_incomes: int = 0

    def group_of(self, person_id) -> int:
        return int(self.assignment.loc[person_id])

    @property
    def degenerate(self) -> bool:
        return self.n_distinct_incomes < self.k


def weighted_rank_partition(sort_keys: pd.DataFrame, weights: np.ndarray, k: int) -> np.ndarray:
    """Partition rows (already meaningfully ordered by `sort_keys`) into k parts
    by cumulative weight, cutting at multiples of W/k.

    The cut falls at the first row whose cumulative weight reaches each
    boundary; that row stays on the left side. Rows with equal keys therefore
    straddle a boundary only when their combined weight spans it.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    order = sort_keys.sort_values(list(sort_keys.columns), kind="mergesort").index.to_numpy()
    w = np.asarray(weights, dtype=float)[order]
    cum = np.cumsum(w)
    total = cum[-1]
    if total <= 0:
        raise ParameterError("total weight must be positive")
    bounds = total * np.arange(1, k) / k
    cuts = np.searchsorted(cum, bounds, side="left")
    positions = np.arange(len(order))
    groups_sorted = np.searchsorted(cuts, positions, side="left")
    groups = np.empty(len(order), dtype=np.int64)
    groups[order] = groups_sorted
    return groups


def assign_income_groups(dataset: SurveyDataset | pd.DataFrame, k: int = 4) -> IncomeGrouping:
    """Rank persons by income and cut the cumulative expansion weight into k groups.

    Persons with no reported income are excluded from the grouping (and hence
    from any downstream exposure computation) but remain in the dataset.
    """
    persons = dataset.persons if isinstance(dataset, SurveyDataset) else dataset
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    sub = persons.loc[persons["income"].notna(), ["person_id", "income", "expansion_factor"]]
    if sub.empty:
        raise ValueError("no income data")
    if len(sub) < k:
        raise ParameterError(f"need at least {k} persons with income, have {len(sub)}")
    sub = sub.reset_index(drop=True)
    groups = weighted_rank_partition(
        sub[["income", "person_id"]], sub["expansion_factor"].to_numpy(), k
    )
    ordered = sub.assign(group=groups).sort_values(["income", "person_id"], kind="mergesort")
    cut_points = np.empty(k - 1)
    incomes_sorted = ordered["income"].to_numpy()
    groups_sorted = ordered["group"].to_numpy()
    for j in range(1, k):
        right = np.nonzero(groups_sorted >= j)[0]
        cut_points[j - 1] = incomes_sorted[right[0]] if len(right) else incomes_sorted[-1]
    assignment = pd.Series(groups, index=sub["person_id"].to_numpy(), name="income_group")
    return IncomeGrouping(
        k=k,
        assignment=assignment,
        cut_points=cut_points,
        n_distinct_incomes=int(sub["income"].nunique()),
    )


def flag_caregivers(dataset: SurveyDataset) -> pd.Series:
    """True for persons over 21 living with a minor at least 18 years younger."""
    p = dataset.persons
    hh_min_age = p.groupby("household_id")["age"].transform("min")
    flag = (p["age"] > 21) & (hh_min_age < 18) & (p["age"] - hh_min_age >= 18)
    return pd.Series(flag.to_numpy(), index=p["person_id"].to_numpy(), name="caregiver")


@dataclass(frozen=True)
class FilterRules:
    min_age: int | None = None
    require_travel: bool = False
    require_income: bool = False


def filter_analysis_population(dataset: SurveyDataset, rules: FilterRules):
    """Apply analysis-population rules; returns (subset, removal counts by reason)."""
    p = dataset.persons
    keep = pd.Series(True, index=p.index)
    counts = {}
    if rules.min_age is not None:
        bad = p["age"] < rules.min_age
        counts["under_min_age"] = int(bad.sum())
        keep &= ~bad
    if rules.require_travel:
        n_legs = dataset.legs_per_person().to_numpy()
        bad = pd.Series(n_legs == 0, index=p.index) & keep
        counts["no_travel"] = int(bad.sum())
        keep &= ~bad
    if rules.require_income:
        bad = p["income"].isna() & keep
        counts["no_income"] = int(bad.sum())
        keep &= ~bad
    persons = p.loc[keep].reset_index(drop=True)
    legs = dataset.legs[dataset.legs["person_id"].isin(set(persons["person_id"]))].reset_index(drop=True)
    subset = SurveyDataset(
        persons=persons, legs=legs, rejects=dataset.rejects, unmapped_counts=dataset.unmapped_counts
    )
    return subset, counts
