import csv
import hashlib
import json

import pytest
import yaml

from nvarrays import pipeline
from nvarrays.cli import main
from nvarrays.config import DEFAULTS, ConfigError, apply_override, load_config
from nvarrays.pipeline import StageError, run
from nvarrays.report import NOT_RUN, build_report, load_records, survey_line


def test_defaults_validate():
    cfg = load_config().validate()
    assert cfg.experiment == "full-pipeline" and cfg.master_seed == DEFAULTS["master_seed"]


def test_override_parses_yaml_values():
    data = apply_override(DEFAULTS, "plan.depths=[6, 9]")
    assert data["plan"]["depths"] == [6, 9]
    assert apply_override(DEFAULTS, "material.nitrogen_ppb=5")["material"]["nitrogen_ppb"] == 5
    assert DEFAULTS["plan"]["depths"] == [6.0, 9.0, 12.0, 15.0, 18.0]


@pytest.mark.parametrize("override,key", [
    ("plan.colour=red", "plan.colour"),
    ("plan", "plan"),
    ("plan=3", "plan"),
    ("plan.nx=oops", "plan.nx"),
    ("plan.ny=2.5", "plan.ny"),
    ("plan.pulse_energy=40", "plan.pulse_energy"),
    ("fabrication.target_occupancy=1.5", "fabrication.target_occupancy"),
    ("fabrication.calibration_energy=25", "fabrication.calibration_energy"),
    ("coherence.sequence=Spin-3", "coherence.sequence"),
    ("hbt.window_ns=0.5", "hbt.window_ns"),
    ("aberration.depths_um=[80]", "aberration.depths_um"),
    ("master_seed=-1", "master_seed"),
    ("parallelism=0", "parallelism"),
])
def test_invalid_config_names_the_key(override, key):
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[override]).validate()
    assert info.value.key == key


def test_config_file_and_flags_merge(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"master_seed": 7, "material": {"nitrogen_ppb": 1.0}}))
    cfg = load_config(path, ["material.nitrogen_ppb=5"], master_seed=9).validate()
    assert cfg.master_seed == 9 and cfg["material"]["nitrogen_ppb"] == 5


def test_cli_rejects_bad_config_before_compute(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["fabricate", "--out", str(out), "--override", "material.nitrogen_ppb=-2"])
    assert code != 0
    assert "material.nitrogen_ppb" in capsys.readouterr().err
    assert not out.exists()


def test_cli_plan_writes_sites(tmp_path):
    out = tmp_path / "run"
    assert main(["plan", "--out", str(out), "--seed", "3"]) == 0
    with open(out / "sites.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    p = DEFAULTS["plan"]
    assert len(rows) == p["nx"] * p["ny"] * len(p["depths"])
    assert yaml.safe_load((out / "config.yaml").read_text())["master_seed"] == 3


def _small(tmp_path, experiment, *extra):
    return load_config(overrides=["plan.nx=6", "plan.ny=5", "hbt.max_sites=4", "hbt.duration_s=0.5",
                                  "coherence.n_sites=4", "aberration.depths_um=[6.0]", *extra],
                       experiment=experiment, output_dir=str(tmp_path)).validate()


def test_partial_run_marks_missing_figures(tmp_path):
    manifest = run(_small(tmp_path, "fabricate"), with_report=True)
    text = (tmp_path / "report.txt").read_text()
    rep = build_report(manifest.records)
    assert rep.status("fig1_occupancy") != NOT_RUN
    for key in ("fig2_residuals", "fig3_multiplicity", "fig4_t2_survey", "aberration"):
        assert rep.status(key) == NOT_RUN
    assert text.count(NOT_RUN) >= 4


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    return out, run(_small(out, "full-pipeline"))


def test_report_from_memory_equals_report_from_disk(small_run):
    out, manifest = small_run
    assert build_report(manifest.records).to_text() == build_report(load_records(out)).to_text()
    assert build_report(out).to_csv() == (out / "report_summary.csv").read_text()


def test_manifest_digests_match_files(small_run):
    out, manifest = small_run
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk["outputs"] == manifest.outputs
    for name, digest in manifest.outputs.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert [s["stage"] for s in on_disk["stages"]] == list(pipeline.STAGE_ORDER) + ["report"]


def test_cli_report_rebuilds_from_disk(small_run, capsys):
    out, _ = small_run
    before = (out / "report.txt").read_text()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.txt").read_text() == before
    printed = capsys.readouterr().out
    assert printed.strip() == before.strip()


def test_cli_report_needs_directory(tmp_path):
    assert main(["report", "--out", str(tmp_path / "missing")]) == 2


def test_stage_failure_names_the_stage(tmp_path, monkeypatch):
    def broken(ctx):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(pipeline._STAGE_FUNCS, "fabricate", broken)
    with pytest.raises(StageError) as info:
        run(_small(tmp_path, "fabricate"))
    assert info.value.stage == "fabricate" and "disk on fire" in str(info.value)
    assert main(["fabricate", "--out", str(tmp_path / "cli")]) == 1


def test_survey_line_format():
    assert survey_line(16, 23, 500e-6) == "16/23 exceed 500 μs"
