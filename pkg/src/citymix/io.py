"""Canonical CSV schemas and deterministic writers.

Every file the pipeline reads or writes goes through here so that column
orders, float formatting (12 significant digits) and row ordering stay
byte-stable across runs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .hexgrid import CensusZone
from .validation import SchemaError, require_columns

FLOAT_FORMAT = "%.12g"

PERSON_COLUMNS = [
    "person_id",
    "household_id",
    "age",
    "gender",
    "work_status",
    "income",
    "expansion_factor",
    "home_lat",
    "home_lon",
]
OPTIONAL_PERSON_COLUMNS = ["car_ownership"]
LEG_COLUMNS = [
    "person_id",
    "leg_index",
    "o_lat",
    "o_lon",
    "d_lat",
    "d_lon",
    "depart_min",
    "arrive_min",
    "mode",
    "purpose",
]
STATION_COLUMNS = ["station_id", "kind", "lat", "lon", "open_year"]
POI_COLUMNS = ["poi_id", "lat", "lon", "raw_tag"]
ZONE_COLUMNS = ["zone_id", "median_income", "population"]
ZONE_VERTEX_COLUMNS = ["zone_id", "ring", "lat", "lon"]


def write_csv(df: pd.DataFrame, path, float_format: str = FLOAT_FORMAT) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_mapping_table(path) -> dict[str, str]:
    """Two-column (raw, standard) CSV into a dict; raw values are case-folded."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    require_columns(df, ["raw", "standard"], str(path))
    return {str(r).strip().casefold(): str(s).strip() for r, s in zip(df["raw"], df["standard"])}


def read_persons_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    require_columns(df, PERSON_COLUMNS, f"persons file {path}")
    return df


def read_legs_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    require_columns(df, LEG_COLUMNS, f"legs file {path}")
    return df


def read_stations_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"station_id": str, "kind": str})
    require_columns(df, STATION_COLUMNS, f"stations file {path}")
    for col in ("lat", "lon"):
        df[col] = pd.to_numeric(df[col], errors="raise")
    df["open_year"] = pd.to_numeric(df["open_year"], errors="coerce")
    return df


def read_pois_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"poi_id": str, "raw_tag": str})
    require_columns(df, POI_COLUMNS, f"pois file {path}")
    for col in ("lat", "lon"):
        df[col] = pd.to_numeric(df[col], errors="raise")
    return df


def read_zones(zones_path, vertices_path) -> list[CensusZone]:
    zdf = pd.read_csv(zones_path, dtype={"zone_id": str})
    require_columns(zdf, ZONE_COLUMNS, f"zones file {zones_path}")
    vdf = pd.read_csv(vertices_path, dtype={"zone_id": str})
    require_columns(vdf, ZONE_VERTEX_COLUMNS, f"zone vertices file {vertices_path}")
    zones = []
    grouped = vdf.groupby("zone_id", sort=True)
    for _, row in zdf.sort_values("zone_id").iterrows():
        zid = row["zone_id"]
        if zid not in grouped.groups:
            raise SchemaError(f"zone {zid} has no vertices in {vertices_path}")
        rings = []
        sub = grouped.get_group(zid)
        for _, ring_df in sub.groupby("ring", sort=True):
            rings.append(list(zip(ring_df["lat"].astype(float), ring_df["lon"].astype(float))))
        med = row["median_income"]
        zones.append(
            CensusZone(
                zone_id=zid,
                median_income=float(med) if med not in ("", None) and not pd.isna(med) else float("nan"),
                population=int(row["population"]),
                rings=rings,
            )
        )
    return zones


def write_named_tensors(tensors: dict[str, np.ndarray], path) -> None:
    """Flat text format: one line per tensor -> name, shape, row-major values."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=float)
            shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            values = " ".join("%.17g" % v for v in arr.ravel(order="C"))
            fh.write(f"{name}\t{shape}\t{values}\n")


def read_named_tensors(path) -> dict[str, np.ndarray]:
    tensors = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, shape, values = line.rstrip("\n").split("\t")
            arr = np.array([float(v) for v in values.split()], dtype=float)
            if shape != "scalar":
                dims = tuple(int(d) for d in shape.split("x"))
                arr = arr.reshape(dims)
            else:
                arr = arr.reshape(())
            tensors[name] = arr
    return tensors
