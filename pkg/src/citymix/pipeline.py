"""Pipeline configuration, stage orchestration with content-hash resume, and
figure-data report tables."""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .autoencoder import (
    ComponentFeatures,
    ExposureAutoencoder,
    _transform_targets,
    ablation_protocol,
    combo_protocol,
    component_features,
    stratified_split,
    transfer_by_income,
)
from .gcn import GcnClassifier
from .hexgrid import CellId, HexGrid, ZoneIndex
from .mixing import (
    VisitOptions,
    compute_mixing,
    group_summary,
    proxy_income_dm,
)
from .placegraph import WalkTransitTimes, build_place_graph
from .pois import DiscIsochrone, categorize_pois, exposure_matrices, DEFAULT_CATEGORIES
from .regression import LmgDecomposition, RobustOLS, build_design_matrix, stratified_lmg
from .survey import (
    CategoryMapper,
    FilterRules,
    SurveyDataset,
    assign_income_groups,
    filter_analysis_population,
    flag_caregivers,
    load_survey,
)
from .transit import (
    TableDistanceProvider,
    accessibility_flags,
    band_labels,
    filter_stations,
    home_hub_distances,
    identify_hubs,
    nearest_station_distance,
    nearest_station_distances,
    stations_from_frame,
)
from .validation import ParameterError, SchemaError, StageError

log = logging.getLogger(__name__)

AGE_BANDS = ((12, 17), (18, 24), (25, 34), (35, 44), (45, 54), (55, 64), (65, 74), (75, 200))
PIPELINE_VERSION = "1"


@dataclass
class PipelineConfig:
    """All pipeline settings; defaults match the headline analysis settings."""

    # inputs
    persons: str = ""
    legs: str = ""
    zones: str = ""
    zone_vertices: str = ""
    stations: str = ""
    distance_table: str = ""
    pois: str = ""
    poi_mapping: str = ""
    mode_mapping: str = ""
    work_status_mapping: str = ""
    purpose_mapping: str = ""
    gender_mapping: str = ""
    # grid
    origin_lat: float | None = None
    origin_lon: float | None = None
    level: int = 8
    # population filter
    min_age: int = 12
    require_travel: bool = True
    require_income: bool = False
    # mixing
    k: int = 4
    time_weighted: bool = False
    exclude_home: bool = True
    day_end: float = 1440.0
    leave_one_out: bool = False
    # transit
    survey_year: int | None = None
    train_threshold_m: float = 1000.0
    bus_threshold_m: float = 800.0
    hub_threshold: float = 0.6
    window_start: float = 360.0
    window_end: float = 660.0
    hub_leg_modes: str = "public_transit"
    band_breaks_km: str = "5,10,20"
    # exposure
    minutes: float = 15.0
    normalize_pd: bool = False
    # regression
    robust: bool = True
    strata_band: str = "band_poly"
    # embedding
    edge_type: str = "transit_binary"
    alpha: float | None = None
    gcn_hidden: int = 32
    gcn_lr: float = 0.5
    gcn_max_epochs: int = 300
    gcn_patience: int = 30
    headway_min: float = 10.0
    ride_speed_m_per_min: float = 500.0
    # prediction
    combos: str = "h_h h_h+h_d h_a h_a+h_d"
    ablation_combo: str = "h_h+h_a+h_d"
    n_splits: int = 10
    ae_lr: float = 0.1
    ae_max_epochs: int = 1500
    ae_patience: int = 60
    transfer_combos: str = "h_a h_h"
    transfer_train_groups: str = "all"
    min_group_size: int = 30
    log_targets: bool = True
    # run
    seed: int = 0

    def band_breaks(self) -> tuple:
        return tuple(float(b) for b in self.band_breaks_km.split(","))

    def combo_list(self, text: str) -> list[tuple]:
        return [tuple(part.split("+")) for part in text.split()]

    def visit_options(self) -> VisitOptions:
        return VisitOptions(
            time_weighted=self.time_weighted, exclude_home=self.exclude_home, day_end=self.day_end
        )

    @classmethod
    def from_ini(cls, path) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise SchemaError(f"config file not found: {path}")
        values = {}
        for section in parser.sections():
            if section == "synth":
                continue
            for key, raw in parser.items(section):
                values[key] = raw
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values.pop(f.name)
            kwargs[f.name] = _parse_field(f, raw)
        if values:
            raise SchemaError(f"unknown config keys: {sorted(values)}")
        return cls(**kwargs)

    def resolved_ini(self) -> str:
        lines = ["[pipeline]"]
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


def _parse_field(f, raw: str):
    raw = raw.strip()
    if raw == "":
        return None if "None" in str(f.type) else f.default
    if f.type in ("int", "int | None"):
        return int(raw)
    if f.type in ("float", "float | None"):
        return float(raw)
    if f.type == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def synth_params_from_ini(path, seed: int | None = None):
    from .synth import CityParams

    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise SchemaError(f"config file not found: {path}")
    if not parser.has_section("synth"):
        raise SchemaError("config has no [synth] section")
    kwargs = {}
    for f in fields(CityParams):
        if not parser.has_option("synth", f.name):
            continue
        raw = parser.get("synth", f.name)
        if f.name == "legs_per_person":
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name == "categories":
            kwargs[f.name] = tuple(raw.split())
        elif f.type in ("int",):
            kwargs[f.name] = int(raw)
        elif f.type in ("float",):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    if seed is not None:
        kwargs["seed"] = seed
    return CityParams(**kwargs)


# --- stage machinery -----------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Stage:
    name: str
    inputs: list  # file paths feeding the hash (config paths or prior outputs)
    outputs: list  # file names inside the artifact directory
    config_repr: str

    def input_hash(self) -> str:
        h = hashlib.sha256()
        h.update(PIPELINE_VERSION.encode())
        h.update(self.name.encode())
        h.update(self.config_repr.encode())
        for p in self.inputs:
            h.update(str(Path(p).name).encode())
            h.update(file_sha256(p).encode())
        return h.hexdigest()


STAGE_ORDER = ["ingest", "mixing", "access", "exposure", "regress", "embed", "predict", "report"]


class PipelineRun:
    """Executes the stage graph into an artifact directory with hash-based resume."""

    def __init__(self, config: PipelineConfig, out_dir, resume: bool = True):
        self.cfg = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.manifest_path = self.out / "manifest.json"
        self.manifest = {"stages": {}}
        if resume and self.manifest_path.exists():
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        self.status: dict = {}

    # -- helpers

    def path(self, name: str) -> Path:
        return self.out / name

    def _stage(self, name, inputs, outputs, config_keys) -> Stage:
        cfg_repr = json.dumps(
            {key: getattr(self.cfg, key) for key in sorted(config_keys)}, sort_keys=True
        )
        return Stage(name=name, inputs=inputs, outputs=outputs, config_repr=cfg_repr)

    def _up_to_date(self, stage: Stage, input_hash: str) -> bool:
        entry = self.manifest["stages"].get(stage.name)
        if not entry or entry.get("inputs_hash") != input_hash:
            return False
        for fname, digest in entry.get("outputs", {}).items():
            p = self.path(fname)
            if not p.exists() or file_sha256(p) != digest:
                return False
        return True

    def _record(self, stage: Stage, input_hash: str):
        self.manifest["stages"][stage.name] = {
            "inputs_hash": input_hash,
            "outputs": {fname: file_sha256(self.path(fname)) for fname in stage.outputs},
        }
        io.write_json(self.manifest, self.manifest_path)

    def _execute(self, stage: Stage, fn):
        try:
            input_hash = stage.input_hash()
        except FileNotFoundError as exc:
            raise StageError(stage.name, f"missing input file: {exc.filename}") from exc
        if self.resume and self._up_to_date(stage, input_hash):
            log.info("stage %s: skipped (hash match)", stage.name)
            self.status[stage.name] = "skipped"
            return
        log.info("stage %s: running", stage.name)
        try:
            fn()
        except (ParameterError, SchemaError):
            raise
        except StageError:
            raise
        except Exception as exc:  # halt with stage name and cause; keep partial outputs
            raise StageError(stage.name, str(exc)) from exc
        missing = [f for f in stage.outputs if not self.path(f).exists()]
        if missing:
            raise StageError(stage.name, f"did not produce outputs {missing}")
        self._record(stage, input_hash)
        self.status[stage.name] = "run"

    def require(self, *names: str):
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise StageError("dependency", f"missing upstream outputs {missing}; run earlier stages")

    # -- shared readers

    def grid(self) -> HexGrid:
        if self.cfg.origin_lat is None or self.cfg.origin_lon is None:
            raise ParameterError("grid origin unresolved; run via run_pipeline or set origin_lat/lon")
        return HexGrid(self.cfg.origin_lat, self.cfg.origin_lon)

    def clean_dataset(self) -> SurveyDataset:
        persons = pd.read_csv(
            self.path("clean_persons.csv"), dtype={"person_id": str, "household_id": str}
        )
        legs = pd.read_csv(self.path("clean_legs.csv"), dtype={"person_id": str})
        rejects = pd.read_csv(self.path("rejects.csv"), dtype=str) if self.path("rejects.csv").exists() else pd.DataFrame()
        return SurveyDataset(persons=persons, legs=legs, rejects=rejects)

    def grouping(self):
        frame = pd.read_csv(self.path("grouping.csv"), dtype={"person_id": str})
        from .survey import IncomeGrouping

        return IncomeGrouping(
            k=self.cfg.k,
            assignment=pd.Series(
                frame["income_group"].to_numpy(), index=frame["person_id"].to_numpy(), name="income_group"
            ),
            cut_points=np.array([]),
            n_distinct_incomes=self.cfg.k,
        )

    def poi_table(self):
        raw = io.read_pois_csv(self.cfg.pois)
        mapping = (
            io.read_mapping_table(self.cfg.poi_mapping)
            if self.cfg.poi_mapping
            else {c: c for c in DEFAULT_CATEGORIES}
        )
        return categorize_pois(raw, mapping)

    # -- stages

    def stage_ingest(self):
        stage = self._stage(
            "ingest",
            [p for p in (self.cfg.persons, self.cfg.legs) if p]
            + [p for p in (self.cfg.mode_mapping, self.cfg.work_status_mapping,
                           self.cfg.purpose_mapping, self.cfg.gender_mapping) if p],
            ["clean_persons.csv", "clean_legs.csv", "rejects.csv", "ingest_report.json"],
            ["min_age", "require_travel", "require_income"],
        )

        def fn():
            mappers = {}
            for fname, path in (
                ("mode", self.cfg.mode_mapping),
                ("work_status", self.cfg.work_status_mapping),
                ("purpose", self.cfg.purpose_mapping),
                ("gender", self.cfg.gender_mapping),
            ):
                if path:
                    mappers[fname] = CategoryMapper.from_csv(path, fname)
            ds = load_survey(self.cfg.persons, self.cfg.legs, mappers=mappers or None)
            rules = FilterRules(
                min_age=self.cfg.min_age,
                require_travel=self.cfg.require_travel,
                require_income=self.cfg.require_income,
            )
            filtered, removals = filter_analysis_population(ds, rules)
            persons = filtered.persons.sort_values("person_id", kind="mergesort").reset_index(drop=True)
            io.write_csv(persons, self.path("clean_persons.csv"))
            io.write_csv(filtered.legs, self.path("clean_legs.csv"))
            io.write_csv(ds.rejects, self.path("rejects.csv"))
            io.write_json(
                {
                    "n_persons_raw": int(ds.n_persons),
                    "n_persons": int(len(persons)),
                    "n_legs": int(len(filtered.legs)),
                    "n_rejects": int(len(ds.rejects)),
                    "removals": removals,
                    "unmapped_counts": {k: dict(v) for k, v in ds.unmapped_counts.items()},
                },
                self.path("ingest_report.json"),
            )

        self._execute(stage, fn)

    def stage_mixing(self):
        zone_inputs = [p for p in (self.cfg.zones, self.cfg.zone_vertices) if p]
        stage = self._stage(
            "mixing",
            [self.path("clean_persons.csv"), self.path("clean_legs.csv")] + zone_inputs,
            ["grouping.csv", "mixing.csv", "proxy_comparison.csv", "proxy_summary.json",
             "group_summary.csv"],
            ["origin_lat", "origin_lon", "level", "k", "time_weighted", "exclude_home",
             "day_end", "leave_one_out"],
        )

        def fn():
            ds = self.clean_dataset()
            grid = self.grid()
            grouping = assign_income_groups(ds, self.cfg.k)
            options = self.cfg.visit_options()
            result = compute_mixing(
                ds, grid, self.cfg.level, grouping, options, leave_one_out=self.cfg.leave_one_out
            )
            gframe = grouping.assignment.rename_axis("person_id").reset_index()
            io.write_csv(gframe, self.path("grouping.csv"))

            frame = result.frame.copy()
            frame.insert(1, "k", self.cfg.k)
            frame.insert(2, "level", self.cfg.level)
            frame.insert(3, "time_weighted", options.time_weighted)
            frame.insert(4, "exclude_home", options.exclude_home)
            frame.insert(5, "leave_one_out", self.cfg.leave_one_out)
            io.write_csv(frame, self.path("mixing.csv"))

            if self.cfg.zones and self.cfg.zone_vertices:
                zones = ZoneIndex(io.read_zones(self.cfg.zones, self.cfg.zone_vertices))
                cmp = proxy_income_dm(ds, zones, grid, self.cfg.level, self.cfg.k, options)
                io.write_csv(cmp.pairs, self.path("proxy_comparison.csv"))
                io.write_json(cmp.summary, self.path("proxy_summary.json"))
            else:
                io.write_csv(
                    pd.DataFrame(columns=["person_id", "dm_survey", "dm_proxy", "expansion_factor"]),
                    self.path("proxy_comparison.csv"),
                )
                io.write_json({"skipped": "no zones configured"}, self.path("proxy_summary.json"))

            panels = self._summary_panels(ds, result.frame, grouping)
            io.write_csv(panels, self.path("group_summary.csv"))

        self._execute(stage, fn)

    def _summary_panels(self, ds, mixing_frame, grouping, access=None) -> pd.DataFrame:
        table = mixing_frame[["person_id", "dm"]].merge(ds.persons, on="person_id", how="left")
        table["income_group"] = table["person_id"].map(grouping.assignment)
        table["caregiver"] = table["person_id"].map(flag_caregivers(ds))
        labels = [f"{lo}-{hi}" if hi < 200 else f"{lo}+" for lo, hi in AGE_BANDS]
        table["age_band"] = pd.cut(
            table["age"],
            bins=[lo for lo, _ in AGE_BANDS] + [AGE_BANDS[-1][1] + 1],
            labels=labels,
            right=False,
        )
        cuts = ["income_group", "age_band", "gender", "caregiver", "work_status", "car_ownership"]
        if access is not None:
            table = table.merge(access, on="person_id", how="left")
            cuts += ["train_access", "bus_access"]
        panels = []
        for cut in cuts:
            summary = group_summary(table, "dm", cut)
            summary.insert(0, "panel", f"dm_by_{cut}")
            summary = summary.rename(columns={cut: "group"})
            panels.append(summary)
        # caregiver-by-gender panel at early career age (21-45)
        early = table[(table["age"] >= 21) & (table["age"] <= 45)]
        summary = group_summary(early, "dm", ["gender", "caregiver"])
        summary.insert(0, "panel", "dm_by_gender_caregiver_21_45")
        summary["group"] = summary["gender"].astype(str) + "|" + summary["caregiver"].astype(str)
        panels.append(summary.drop(columns=["gender", "caregiver"]))
        out = pd.concat(panels, ignore_index=True)
        cols = ["panel", "group", "n", "n_eff", "mean", "se", "ci_lo", "ci_hi"]
        return out[cols]

    def stage_access(self):
        stage = self._stage(
            "access",
            [self.path("clean_persons.csv"), self.path("clean_legs.csv"), self.cfg.stations]
            + ([self.cfg.distance_table] if self.cfg.distance_table else []),
            ["access.csv", "hubs.csv"],
            ["origin_lat", "origin_lon", "level", "survey_year", "train_threshold_m",
             "bus_threshold_m", "hub_threshold", "window_start", "window_end",
             "hub_leg_modes", "band_breaks_km"],
        )

        def fn():
            ds = self.clean_dataset()
            grid = self.grid()
            stations = filter_stations(
                stations_from_frame(io.read_stations_csv(self.cfg.stations)), self.cfg.survey_year
            )
            if self.cfg.distance_table:
                table = pd.read_csv(
                    self.cfg.distance_table, dtype={"cell_id": str, "station_id": str}
                )
                provider = TableDistanceProvider(table, grid, self.cfg.level)
                train_d, bus_d = [], []
                for lat, lon in zip(ds.persons["home_lat"], ds.persons["home_lon"]):
                    if pd.isna(lat) or pd.isna(lon):
                        train_d.append(np.nan)
                        bus_d.append(np.nan)
                        continue
                    point = (float(lat), float(lon))
                    train_d.append(nearest_station_distance(point, stations, "train", provider))
                    bus_d.append(nearest_station_distance(point, stations, "bus", provider))
                train_d, bus_d = np.array(train_d), np.array(bus_d)
            else:
                train_d = nearest_station_distances(ds.persons, stations, "train")
                bus_d = nearest_station_distances(ds.persons, stations, "bus")
            train_ok, bus_ok = accessibility_flags(
                train_d, bus_d, self.cfg.train_threshold_m, self.cfg.bus_threshold_m
            )
            leg_modes = tuple(self.cfg.hub_leg_modes.split()) if self.cfg.hub_leg_modes else None
            window = (self.cfg.window_start, self.cfg.window_end)
            hub_rows = []
            access = pd.DataFrame({"person_id": ds.persons["person_id"]})
            access["train_dist_m"] = train_d
            access["bus_dist_m"] = bus_d
            access["train_access"] = train_ok.astype(int)
            access["bus_access"] = bus_ok.astype(int)
            breaks = self.cfg.band_breaks()
            for mode in ("mono", "poly"):
                hubs = identify_hubs(
                    ds, grid, self.cfg.level, stations,
                    window=window, mode=mode, threshold=self.cfg.hub_threshold, leg_modes=leg_modes,
                )
                d_km, bands = home_hub_distances(ds.persons, hubs, grid, breaks)
                access[f"hub_dist_{mode}_km"] = d_km
                access[f"band_{mode}"] = bands
                total = sum(w for _, w in hubs.cells)
                cum = 0.0
                for rank, (key, w) in enumerate(hubs.cells):
                    cum += w
                    lat, lon = grid.key_centers(np.array([key]), self.cfg.level)
                    hub_rows.append(
                        (mode, rank, str(_cell_from_key(key, self.cfg.level)), float(lat[0]),
                         float(lon[0]), w, cum / total if total else np.nan)
                    )
            io.write_csv(access, self.path("access.csv"))
            io.write_csv(
                pd.DataFrame(
                    hub_rows,
                    columns=["mode", "rank", "cell_id", "lat", "lon", "arrivals", "cum_share"],
                ),
                self.path("hubs.csv"),
            )

        self._execute(stage, fn)

    def stage_exposure(self):
        stage = self._stage(
            "exposure",
            [self.path("clean_persons.csv"), self.path("clean_legs.csv"), self.cfg.pois]
            + ([self.cfg.poi_mapping] if self.cfg.poi_mapping else []),
            ["exposure_pd.csv", "exposure_ph.csv", "exposure_report.json"],
            ["origin_lat", "origin_lon", "level", "minutes", "normalize_pd", "exclude_home"],
        )

        def fn():
            ds = self.clean_dataset()
            grid = self.grid()
            table = self.poi_table()
            provider = DiscIsochrone(table, grid)
            pd_df, ph_df, report = exposure_matrices(
                ds, grid, provider,
                minutes=self.cfg.minutes, exclude_home=self.cfg.exclude_home,
                level=self.cfg.level, normalize_pd=self.cfg.normalize_pd,
            )
            io.write_csv(pd_df, self.path("exposure_pd.csv"))
            io.write_csv(ph_df, self.path("exposure_ph.csv"))
            report["poi_dropped_counts"] = table.dropped_counts
            report["n_pois"] = int(len(table.frame))
            io.write_json(report, self.path("exposure_report.json"))

        self._execute(stage, fn)

    def stage_regress(self):
        stage = self._stage(
            "regress",
            [self.path(n) for n in ("clean_persons.csv", "clean_legs.csv", "mixing.csv",
                                    "grouping.csv", "access.csv", "exposure_pd.csv",
                                    "exposure_ph.csv")],
            ["regression.csv", "lmg.csv", "model_contrast.json"],
            ["k", "robust", "strata_band", "band_breaks_km"],
        )

        def fn():
            ds = self.clean_dataset()
            mixing_frame = pd.read_csv(self.path("mixing.csv"), dtype={"person_id": str})
            grouping = self.grouping()
            caregiver = flag_caregivers(ds)
            access = pd.read_csv(self.path("access.csv"), dtype={"person_id": str})
            exposure_pd = pd.read_csv(self.path("exposure_pd.csv"), dtype={"person_id": str})
            exposure_ph = pd.read_csv(self.path("exposure_ph.csv"), dtype={"person_id": str})
            import warnings as _warnings

            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore", UserWarning)
                X, y, groups, report, pids = build_design_matrix(
                    ds.persons, mixing_frame, grouping.assignment, caregiver,
                    access.drop(columns=["band_mono", "band_poly"]),
                    exposure_pd, exposure_ph, ds.legs, k=self.cfg.k,
                )
                model = LmgDecomposition(groups, robust=self.cfg.robust).fit(X, y)
                coef = model.coef_frame_ if model.coef_frame_ is not None else pd.DataFrame(
                    columns=["term", "coef", "robust_se", "z"]
                )
                coef = coef.copy()
                coef.insert(0, "model", "full")
                io.write_csv(coef, self.path("regression.csv"))

                lmg_rows = [
                    ("all", name, model.shares_[name], model.normalized_shares_[name],
                     model.rsquared_, int(len(X)))
                    for name in groups
                ]
                band_col = access.set_index("person_id")[self.cfg.strata_band]
                bands = pd.Series(
                    pd.Categorical(
                        pids.map(band_col).to_numpy(),
                        categories=band_labels(self.cfg.band_breaks()),
                    ),
                    index=X.index,
                )
                strata, sizes = stratified_lmg(X, y, groups, bands, robust=self.cfg.robust)
                for band, res in strata.items():
                    for name in res.shares_:
                        lmg_rows.append(
                            (band, name, res.shares_[name], res.normalized_shares_[name],
                             res.rsquared_, sizes[band])
                        )
                io.write_csv(
                    pd.DataFrame(
                        lmg_rows,
                        columns=["band", "group", "share_abs", "share_norm", "r2", "n"],
                    ),
                    self.path("lmg.csv"),
                )

                # Model 1 (S+H+M) vs Model 2 (S+H+M+PD+PH) contrast
                contrast = {}
                for name, included in (
                    ("model1", ["S", "H", "M"]),
                    ("model2", ["S", "H", "M", "PD", "PH"]),
                ):
                    cols = ["const"] + [c for g in included if g in groups for c in groups[g]]
                    fit = RobustOLS(robust=self.cfg.robust).fit(X[cols], y)
                    table = fit.summary_frame()
                    contrast[name] = {
                        "r2": fit.rsquared_,
                        "n": int(fit.n_obs_),
                        "terms": {
                            row.term: {"coef": row.coef, "robust_se": row.robust_se}
                            for row in table.itertuples(index=False)
                        },
                    }
                io.write_json(contrast, self.path("model_contrast.json"))

        self._execute(stage, fn)

    def stage_embed(self):
        stage = self._stage(
            "embed",
            [self.cfg.pois] + ([self.cfg.poi_mapping] if self.cfg.poi_mapping else [])
            + ([self.cfg.stations] if self.cfg.stations else []),
            ["graph.csv", "embeddings.csv", "gcn_metrics.json"],
            ["origin_lat", "origin_lon", "edge_type", "alpha", "minutes", "gcn_hidden",
             "gcn_lr", "gcn_max_epochs", "gcn_patience", "headway_min",
             "ride_speed_m_per_min", "survey_year", "seed"],
        )

        def fn():
            grid = self.grid()
            table = self.poi_table()
            times = None
            if self.cfg.stations:
                stations = filter_stations(
                    stations_from_frame(io.read_stations_csv(self.cfg.stations)),
                    self.cfg.survey_year,
                )
                if stations:
                    sx, sy = grid.project(
                        np.array([s.lat for s in stations]), np.array([s.lon for s in stations])
                    )
                    times = WalkTransitTimes(
                        np.column_stack([sx, sy]),
                        station_ids=[s.station_id for s in stations],
                        headway_min=self.cfg.headway_min,
                        ride_speed_m_per_min=self.cfg.ride_speed_m_per_min,
                    )
            graph = build_place_graph(
                table, grid, self.cfg.edge_type, alpha=self.cfg.alpha,
                minutes=self.cfg.minutes, times=times,
            )
            edges = pd.DataFrame(
                {
                    "i": graph.node_ids[graph.edges[:, 0]] if graph.n_edges else [],
                    "j": graph.node_ids[graph.edges[:, 1]] if graph.n_edges else [],
                    "w": graph.weights,
                    "edge_type": self.cfg.edge_type,
                }
            )
            io.write_csv(edges, self.path("graph.csv"))
            model = GcnClassifier(
                hidden_dim=self.cfg.gcn_hidden, lr=self.cfg.gcn_lr,
                max_epochs=self.cfg.gcn_max_epochs, patience=self.cfg.gcn_patience,
                seed=self.cfg.seed,
            ).fit(graph)
            emb = pd.DataFrame(
                model.embeddings_, columns=[f"e{j:02d}" for j in range(self.cfg.gcn_hidden)]
            )
            emb.insert(0, "poi_id", graph.node_ids)
            io.write_csv(emb, self.path("embeddings.csv"))
            io.write_json(
                {
                    "edge_type": self.cfg.edge_type,
                    "n_nodes": int(graph.n_nodes),
                    "n_edges": int(graph.n_edges),
                    "val_accuracy": model.val_accuracy_,
                    "train_accuracy": model.train_accuracy_,
                    "n_epochs": model.n_epochs_,
                    "seed": self.cfg.seed,
                },
                self.path("gcn_metrics.json"),
            )

        self._execute(stage, fn)

    def stage_predict(self):
        stage = self._stage(
            "predict",
            [self.path(n) for n in ("clean_persons.csv", "clean_legs.csv", "grouping.csv",
                                    "exposure_pd.csv", "embeddings.csv")]
            + [self.cfg.pois] + ([self.cfg.poi_mapping] if self.cfg.poi_mapping else []),
            ["metrics.json", "ablation.csv", "transfer_matrix.csv", "ae_weights.txt"],
            ["origin_lat", "origin_lon", "minutes", "combos", "ablation_combo", "n_splits",
             "ae_lr", "ae_max_epochs", "ae_patience", "transfer_combos",
             "transfer_train_groups", "min_group_size", "log_targets", "seed"],
        )

        def fn():
            ds = self.clean_dataset()
            grid = self.grid()
            table = self.poi_table()
            provider = DiscIsochrone(table, grid)
            emb_frame = pd.read_csv(self.path("embeddings.csv"), dtype={"poi_id": str})
            aligned = emb_frame.set_index("poi_id").loc[table.frame["poi_id"]]
            embeddings = aligned.to_numpy(dtype=float)
            poi_xy = np.column_stack(
                grid.project(table.frame["lat"].to_numpy(), table.frame["lon"].to_numpy())
            )
            feats = component_features(ds, grid, embeddings, poi_xy, provider, self.cfg.minutes)

            exposure_pd = pd.read_csv(self.path("exposure_pd.csv"), dtype={"person_id": str})
            grouping = self.grouping()
            usable = (
                pd.Index(feats.person_ids)
                .intersection(exposure_pd["person_id"])
                .intersection(grouping.assignment.index)
                .sort_values()
            )
            pos = {pid: i for i, pid in enumerate(feats.person_ids)}
            idx = np.array([pos[p] for p in usable], dtype=np.int64)
            sub_feats = ComponentFeatures(
                person_ids=feats.person_ids[idx],
                arrays={k: v[idx] for k, v in feats.arrays.items()},
                h_h_empty=feats.h_h_empty[idx],
                h_a_empty=feats.h_a_empty[idx],
            )
            Y = exposure_pd.set_index("person_id").loc[usable].to_numpy(dtype=float)
            groups = grouping.assignment.loc[usable].to_numpy()

            fit_kw = dict(
                lr=self.cfg.ae_lr, max_epochs=self.cfg.ae_max_epochs, patience=self.cfg.ae_patience
            )
            combos = self.cfg.combo_list(self.cfg.combos)
            runs = combo_protocol(
                sub_feats, Y, groups, combos, n_splits=self.cfg.n_splits,
                seed=self.cfg.seed, log_targets=self.cfg.log_targets, **fit_kw,
            )
            ablation_combo = tuple(self.cfg.ablation_combo.split("+"))
            ablation = ablation_protocol(
                sub_feats, Y, groups, combo=ablation_combo, n_splits=self.cfg.n_splits,
                seed=self.cfg.seed, log_targets=self.cfg.log_targets, **fit_kw,
            )
            io.write_csv(ablation, self.path("ablation.csv"))

            train_groups = (
                None if self.cfg.transfer_train_groups == "all"
                else [int(v) for v in self.cfg.transfer_train_groups.split()]
            )
            transfer = transfer_by_income(
                sub_feats, Y, groups,
                combos=self.cfg.combo_list(self.cfg.transfer_combos),
                train_groups=train_groups, seed=self.cfg.seed,
                min_group_size=self.cfg.min_group_size,
                log_targets=self.cfg.log_targets, **fit_kw,
            )
            io.write_csv(transfer, self.path("transfer_matrix.csv"))

            # persist the full-combo model weights for the first split
            train_idx, _ = stratified_split(groups, seed=self.cfg.seed)
            Yt = _transform_targets(Y, self.cfg.log_targets)
            model = ExposureAutoencoder(combo=ablation_combo, seed=self.cfg.seed, **fit_kw)
            model.fit(sub_feats.subset(train_idx), Yt[train_idx])
            io.write_named_tensors(model.params_, self.path("ae_weights.txt"))

            io.write_json(
                {
                    "n_persons": int(len(usable)),
                    "log_targets": self.cfg.log_targets,
                    "n_splits": self.cfg.n_splits,
                    "seed": self.cfg.seed,
                    "runs": runs.to_dict(orient="records"),
                    "ablation_means": {
                        comp: {
                            "delta_loss": float(sub["delta_loss"].mean()),
                            "delta_mean_r2": float(sub["delta_mean_r2"].mean()),
                        }
                        for comp, sub in ablation.groupby("component")
                    },
                },
                self.path("metrics.json"),
            )

        self._execute(stage, fn)

    def stage_report(self):
        stage = self._stage(
            "report",
            [self.path(n) for n in ("clean_persons.csv", "mixing.csv", "grouping.csv",
                                    "proxy_comparison.csv", "access.csv", "lmg.csv",
                                    "model_contrast.json", "metrics.json",
                                    "transfer_matrix.csv")],
            ["fig1b_pairs.csv", "fig2_panels.csv", "fig3_lmg.csv", "table1.csv",
             "fig5a_combos.csv", "fig5b_transfer.csv"],
            ["k"],
        )

        def fn():
            # fig 1b: survey vs proxy DM pairs with a fitted OLS line
            pairs = pd.read_csv(self.path("proxy_comparison.csv"), dtype={"person_id": str})
            if len(pairs):
                X = np.column_stack([np.ones(len(pairs)), pairs["dm_survey"].to_numpy()])
                fit = RobustOLS(robust=False).fit(X, pairs["dm_proxy"].to_numpy())
                pairs["ols_intercept"] = fit.coef_[0]
                pairs["ols_slope"] = fit.coef_[1]
            else:
                pairs["ols_intercept"] = []
                pairs["ols_slope"] = []
            io.write_csv(pairs, self.path("fig1b_pairs.csv"))

            # fig 2: group means with CIs, now including accessibility cuts
            ds = self.clean_dataset()
            mixing_frame = pd.read_csv(self.path("mixing.csv"), dtype={"person_id": str})
            grouping = self.grouping()
            access = pd.read_csv(self.path("access.csv"), dtype={"person_id": str})
            panels = self._summary_panels(ds, mixing_frame, grouping, access=access)
            io.write_csv(panels, self.path("fig2_panels.csv"))

            # fig 3: LMG shares overall and by hub-distance band
            io.write_csv(pd.read_csv(self.path("lmg.csv")), self.path("fig3_lmg.csv"))

            # table 1: mode coefficients across the nested models
            with open(self.path("model_contrast.json")) as fh:
                contrast = json.load(fh)
            rows = []
            for model_name in ("model1", "model2"):
                entry = contrast[model_name]
                for term in ("frac_public_transit", "frac_private_car"):
                    cell = entry["terms"].get(term)
                    if cell:
                        rows.append(
                            (model_name, term, cell["coef"], cell["robust_se"],
                             entry["r2"], entry["n"])
                        )
            io.write_csv(
                pd.DataFrame(rows, columns=["model", "term", "coef", "robust_se", "r2", "n"]),
                self.path("table1.csv"),
            )

            # fig 5a: combo mean-R^2 across splits
            with open(self.path("metrics.json")) as fh:
                metrics = json.load(fh)
            runs = pd.DataFrame(metrics["runs"])
            agg = (
                runs.groupby("combo", sort=True)
                .agg(
                    mean_r2=("mean_r2", "mean"),
                    std_r2=("mean_r2", "std"),
                    mean_r2_raw=("mean_r2_raw", "mean"),
                    mae=("mae", "mean"),
                    mse=("mse", "mean"),
                    n_splits=("split", "count"),
                )
                .reset_index()
            )
            io.write_csv(agg, self.path("fig5a_combos.csv"))

            # fig 5b: transfer matrix with baseline and loss
            io.write_csv(
                pd.read_csv(self.path("transfer_matrix.csv")), self.path("fig5b_transfer.csv")
            )

        self._execute(stage, fn)

    STAGE_FN = {
        "ingest": stage_ingest,
        "mixing": stage_mixing,
        "access": stage_access,
        "exposure": stage_exposure,
        "regress": stage_regress,
        "embed": stage_embed,
        "predict": stage_predict,
        "report": stage_report,
    }


def _cell_from_key(key: int, level: int) -> CellId:
    from .hexgrid import key_to_qr

    q, r = key_to_qr(np.array([key]))
    return CellId(level, int(q[0]), int(r[0]))


def resolve_origin(config: PipelineConfig) -> PipelineConfig:
    """Fill the grid origin from the home-coordinate bounding box when unset."""
    if config.origin_lat is not None and config.origin_lon is not None:
        return config
    persons = io.read_persons_csv(config.persons)
    lat = pd.to_numeric(persons["home_lat"], errors="coerce")
    lon = pd.to_numeric(persons["home_lon"], errors="coerce")
    if lat.notna().sum() == 0:
        raise ParameterError("cannot resolve grid origin: no home coordinates")
    config.origin_lat = round(float((lat.min() + lat.max()) / 2.0), 4)
    config.origin_lon = round(float((lon.min() + lon.max()) / 2.0), 4)
    return config


def run_pipeline(
    config: PipelineConfig, out_dir, resume: bool = True, stages=None
) -> dict:
    """Execute the stage graph; returns {stage: "run" | "skipped"}.

    `stages` restricts execution (upstream outputs must already exist).
    """
    if not config.persons or not config.legs:
        raise ParameterError("config must set persons and legs inputs")
    config = resolve_origin(config)
    run = PipelineRun(config, out_dir, resume=resume)
    with open(run.path("resolved_config.ini"), "w") as fh:
        fh.write(config.resolved_ini())
    selected = STAGE_ORDER if stages is None else list(stages)
    unknown = [s for s in selected if s not in STAGE_ORDER]
    if unknown:
        raise ParameterError(f"unknown stages {unknown}; expected {STAGE_ORDER}")
    skip_embed = not config.pois
    for name in STAGE_ORDER:
        if name not in selected:
            continue
        if name in ("exposure", "embed", "predict") and skip_embed:
            log.info("stage %s: skipped (no POI input)", name)
            run.status[name] = "skipped"
            continue
        if name == "access" and not config.stations:
            log.info("stage access: skipped (no stations input)")
            run.status[name] = "skipped"
            continue
        PipelineRun.STAGE_FN[name](run)
    return run.status
