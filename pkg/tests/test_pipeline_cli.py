import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from citymix.cli import main as cli_main
from citymix.pipeline import PipelineConfig, run_pipeline, synth_params_from_ini
from citymix.synth import CityParams, generate_city, write_city

REPORT_FILES = [
    "fig1b_pairs.csv", "fig2_panels.csv", "fig3_lmg.csv", "table1.csv",
    "fig5a_combos.csv", "fig5b_transfer.csv",
]
ALL_STAGES = ["ingest", "mixing", "access", "exposure", "regress", "embed", "predict", "report"]


def write_config(path, city_dir, out_extra=""):
    text = f"""
[inputs]
persons = {city_dir}/persons.csv
legs = {city_dir}/legs.csv
zones = {city_dir}/zones.csv
zone_vertices = {city_dir}/zone_vertices.csv
stations = {city_dir}/stations.csv
pois = {city_dir}/pois.csv
poi_mapping = {city_dir}/poi_mapping.csv

[grid]
level = 8

[mixing]
k = 4

[transit]
survey_year = 2015

[embed]
edge_type = dist_binary
gcn_max_epochs = 60
gcn_patience = 15

[predict]
combos = h_a h_a+h_d
ablation_combo = h_h+h_a+h_d
n_splits = 2
ae_max_epochs = 200
ae_patience = 40
transfer_combos = h_a
transfer_train_groups = 0
min_group_size = 10

[run]
seed = 1
{out_extra}
"""
    Path(path).write_text(text)
    return path


@pytest.fixture(scope="module")
def small_city(tmp_path_factory):
    city_dir = tmp_path_factory.mktemp("city")
    params = CityParams(n_persons=260, n_zones=16, n_pois=130, n_bus_stations=8, seed=5)
    write_city(generate_city(params), city_dir)
    return city_dir


@pytest.fixture(scope="module")
def finished_run(small_city, tmp_path_factory):
    out = tmp_path_factory.mktemp("artifacts")
    cfg_path = write_config(tmp_path_factory.mktemp("cfg") / "run.ini", small_city)
    config = PipelineConfig.from_ini(cfg_path)
    status = run_pipeline(config, out)
    return out, cfg_path, status


class TestFullRun:
    def test_all_stages_run_and_reports_exist(self, finished_run):
        out, _, status = finished_run
        assert all(status[name] == "run" for name in ALL_STAGES)
        for fname in REPORT_FILES:
            assert (out / fname).exists(), fname
        with open(out / "manifest.json") as fh:
            manifest = json.load(fh)
        assert set(manifest["stages"]) == set(ALL_STAGES)

    def test_rerun_skips_everything_via_hash_match(self, finished_run):
        out, cfg_path, _ = finished_run
        config = PipelineConfig.from_ini(cfg_path)
        status = run_pipeline(config, out)
        assert all(state == "skipped" for state in status.values())

    def test_resolved_config_records_every_default(self, finished_run):
        out, _, _ = finished_run
        text = (out / "resolved_config.ini").read_text()
        for key in ("level = 8", "k = 4", "minutes = 15.0", "train_threshold_m = 1000.0",
                    "bus_threshold_m = 800.0", "hub_threshold = 0.6", "window_start = 360.0",
                    "window_end = 660.0", "edge_type = dist_binary", "day_end = 1440.0"):
            assert key in text, key

    def test_mixing_file_carries_variant_metadata(self, finished_run):
        out, _, _ = finished_run
        mixing = pd.read_csv(out / "mixing.csv")
        assert (mixing["k"] == 4).all()
        assert (mixing["level"] == 8).all()
        assert {"tau_0", "tau_1", "tau_2", "tau_3", "dm", "nm"} <= set(mixing.columns)
        sums = mixing[[f"tau_{q}" for q in range(4)]].sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-9

    def test_table1_nested_r2(self, finished_run):
        out, _, _ = finished_run
        table1 = pd.read_csv(out / "table1.csv")
        r2 = table1.groupby("model")["r2"].first()
        assert r2["model2"] >= r2["model1"]
        assert {"frac_public_transit", "frac_private_car"} <= set(table1["term"])

    def test_fig1b_has_slope_column(self, finished_run):
        out, _, _ = finished_run
        pairs = pd.read_csv(out / "fig1b_pairs.csv")
        assert "ols_slope" in pairs.columns
        assert len(pairs) > 0
        assert pairs["ols_slope"].nunique() == 1

    def test_lmg_shares_sum_to_r2(self, finished_run):
        out, _, _ = finished_run
        lmg = pd.read_csv(out / "fig3_lmg.csv")
        overall = lmg[lmg["band"] == "all"]
        assert abs(overall["share_abs"].sum() - overall["r2"].iloc[0]) <= 1e-9

    def test_graph_and_embeddings_outputs(self, finished_run):
        out, _, _ = finished_run
        emb = pd.read_csv(out / "embeddings.csv")
        assert emb.shape[1] == 33  # poi_id + 32 dims
        graph = pd.read_csv(out / "graph.csv")
        assert {"i", "j", "w", "edge_type"} <= set(graph.columns)

    def test_metrics_json_runs_recorded(self, finished_run):
        out, _, _ = finished_run
        with open(out / "metrics.json") as fh:
            metrics = json.load(fh)
        combos = {run["combo"] for run in metrics["runs"]}
        assert combos == {"h_a", "h_a||h_d"}
        assert set(metrics["ablation_means"]) == {"h_h", "h_a", "h_d"}

    def test_distance_table_overrides_access(self, small_city, tmp_path):
        cfg_path = write_config(tmp_path / "dt.ini", small_city)
        config = PipelineConfig.from_ini(cfg_path)
        out = tmp_path / "out_base"
        run_pipeline(config, out, stages=["ingest", "access"])
        base = pd.read_csv(out / "access.csv", dtype={"person_id": str})

        # table pinning the first person's home cell to 1 m from every station
        from citymix.hexgrid import HexGrid
        from citymix.io import read_stations_csv

        persons = pd.read_csv(out / "clean_persons.csv", dtype={"person_id": str})
        grid = HexGrid(config.origin_lat, config.origin_lon)
        home_cell = grid.bin_point(persons.loc[0, "home_lat"], persons.loc[0, "home_lon"], 8)
        stations = read_stations_csv(small_city / "stations.csv")
        rows = [(str(home_cell), sid, 1.0) for sid in stations["station_id"]]
        table_path = tmp_path / "distance_table.csv"
        pd.DataFrame(rows, columns=["cell_id", "station_id", "meters"]).to_csv(
            table_path, index=False
        )
        config2 = PipelineConfig.from_ini(cfg_path)
        config2.distance_table = str(table_path)
        out2 = tmp_path / "out_table"
        run_pipeline(config2, out2, stages=["ingest", "access"])
        with_table = pd.read_csv(out2 / "access.csv", dtype={"person_id": str})
        pid = persons.loc[0, "person_id"]
        assert with_table.set_index("person_id").loc[pid, "train_dist_m"] == 1.0
        assert base.set_index("person_id").loc[pid, "train_dist_m"] > 1.0

    def test_k5_variant_metadata(self, small_city, tmp_path):
        cfg_path = tmp_path / "k5.ini"
        write_config(cfg_path, small_city)
        config = PipelineConfig.from_ini(cfg_path)
        config.k = 5
        out = tmp_path / "out_k5"
        run_pipeline(config, out, stages=["ingest", "mixing"])
        mixing = pd.read_csv(out / "mixing.csv")
        assert (mixing["k"] == 5).all()
        assert "tau_4" in mixing.columns


class TestCli:
    def test_synth_and_stagewise_run(self, tmp_path):
        cfg = tmp_path / "synth.ini"
        cfg.write_text(
            """
[synth]
n_persons = 120
n_zones = 4
n_pois = 60
n_bus_stations = 5
seed = 3
"""
        )
        city_dir = tmp_path / "city"
        assert cli_main(["synth", "--config", str(cfg), "--out", str(city_dir)]) == 0
        assert (city_dir / "persons.csv").exists()
        assert (city_dir / "params.json").exists()

        run_cfg = write_config(tmp_path / "run.ini", city_dir)
        out = tmp_path / "artifacts"
        assert cli_main(["ingest", "--config", str(run_cfg), "--out", str(out)]) == 0
        assert (out / "clean_persons.csv").exists()
        assert cli_main(["mixing", "--config", str(run_cfg), "--out", str(out)]) == 0
        assert (out / "mixing.csv").exists()

    def test_missing_config_is_validation_error(self, tmp_path):
        rc = cli_main(["run", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_missing_upstream_is_stage_failure(self, small_city, tmp_path):
        run_cfg = write_config(tmp_path / "run.ini", small_city)
        rc = cli_main(["regress", "--config", str(run_cfg), "--out", str(tmp_path / "empty")])
        assert rc == 3

    def test_seed_override(self, tmp_path):
        cfg = tmp_path / "synth.ini"
        cfg.write_text("[synth]\nn_persons = 50\nn_zones = 4\nn_pois = 40\nseed = 1\n")
        params = synth_params_from_ini(cfg, seed=9)
        assert params.seed == 9
        assert params.n_persons == 50
