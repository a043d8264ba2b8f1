"""End-to-end pipeline, manifest, ablation, and CLI behavior."""
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from raincast import cli, pipeline
from raincast.errors import ConfigurationError, NumericError, ValidationError
from raincast.gridpack import load_checkpoint, read_gridpack
from raincast.models.deterministic import EXPERIMENTS
from raincast.pipeline import (
    ABLATION_FILE,
    DATA_FILE,
    DEFAULTS,
    MANIFEST_FILE,
    METRICS_FILE,
    STAGES,
    STATS_FILE,
    _eval_indices,
    config_hash,
    load_synth_data,
    resolve_config,
    run_ablation,
    run_pipeline,
    run_stage,
)
from raincast.report import read_metrics_csv

SMALL = {
    "seed": 7,
    "data": {"n_times": 8, "n_storms": 2},
    "det": {"steps": 6},
    "vae": {"steps": 6},
    "diffusion": {"steps": 6},
    "infer": {"members": 3, "steps": 5, "eval_times": 2},
    "ablation": {"steps": 4, "eval_times": 2},
}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = resolve_config(SMALL)
    run_pipeline(cfg, out)
    return cfg, out


def manifest_of(out):
    return json.loads((out / MANIFEST_FILE).read_text())


def test_pipeline_writes_all_artifacts(pipeline_run):
    _, out = pipeline_run
    for name in (
        DATA_FILE, STATS_FILE, "det.ckpt", "vae.ckpt", "diffusion.ckpt",
        METRICS_FILE, MANIFEST_FILE,
    ):
        assert (out / name).exists()
    # 8 timesteps make 7 forecast samples, so the last two are t005/t006
    for tag in ("t005", "t006"):
        for m in range(3):
            assert (out / "infer" / f"{tag}_member{m:02d}.gp").exists()
        for suffix in ("mean", "pm", "obs"):
            assert (out / "infer" / f"{tag}_{suffix}.gp").exists()
    for fig in ("rank_histogram.png", "cdf.png", "scores.png", "members_t006.png"):
        assert (out / fig).stat().st_size > 0


def test_manifest_checksums_match_artifacts(pipeline_run):
    cfg, out = pipeline_run
    manifest = manifest_of(out)
    assert manifest["version"] == 1
    assert manifest["config"] == cfg
    assert manifest["config_hash"] == config_hash(cfg)
    assert set(manifest["stages"]) == set(STAGES)
    for entry in manifest["stages"].values():
        assert entry["artifacts"]
        for rel, digest in entry["artifacts"].items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest


def test_metric_table_contents(pipeline_run):
    cfg, out = pipeline_run
    rows = read_metrics_csv(out / METRICS_FILE)
    metrics = {r["metric"] for r in rows}
    assert {
        "csi", "pod", "far", "rank_frequency", "rank_p_value",
        "cdf_members", "cdf_observed",
    } <= metrics
    n_thr = len(cfg["evaluate"]["thresholds"])
    for label in ("mean", "pm"):
        per_time = [
            r for r in rows
            if r["metric"] == "csi" and r["member"] == label
            and r["lead_time"] is not None
        ]
        agg = [
            r for r in rows
            if r["metric"] == "csi" and r["member"] == label
            and r["lead_time"] is None
        ]
        assert len(per_time) == 2 * n_thr
        assert len(agg) == n_thr
    freqs = [r["value"] for r in rows if r["metric"] == "rank_frequency"]
    assert len(freqs) == SMALL["infer"]["members"] + 1
    assert np.isclose(sum(freqs), 1.0)
    (p,) = [r["value"] for r in rows if r["metric"] == "rank_p_value"]
    assert np.isnan(p) or 0.0 <= p <= 1.0


def test_members_nonnegative_and_obs_aligned(pipeline_run):
    cfg, out = pipeline_run
    data = load_synth_data(cfg, out)
    member = read_gridpack(out / "infer" / "t006_member00.gp")
    assert member.unit_tag == "mm"
    assert np.all(member.values >= 0.0)
    obs = read_gridpack(out / "infer" / "t006_obs.gp")
    # forecast at sample index 6 verifies against the field one step later
    np.testing.assert_allclose(
        obs.values, data.tp_fine.values[7], rtol=1e-6, atol=1e-6
    )


def test_rerun_reproduces_every_artifact(pipeline_run, tmp_path):
    cfg, out = pipeline_run
    out2 = tmp_path / "again"
    run_pipeline(cfg, out2)
    assert (out / METRICS_FILE).read_bytes() == (out2 / METRICS_FILE).read_bytes()
    m1, m2 = manifest_of(out), manifest_of(out2)
    for stage in STAGES:
        assert m1["stages"][stage] == m2["stages"][stage], stage


def test_pm_stage_rebuilds_stored_product(pipeline_run, tmp_path):
    cfg, out = pipeline_run
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    before = read_gridpack(work / "infer" / "t006_pm.gp").values.copy()
    (work / "infer" / "t006_pm.gp").unlink()
    run_stage("pm", cfg, work)
    after = read_gridpack(work / "infer" / "t006_pm.gp").values
    assert np.array_equal(
        np.sort(before.ravel()), np.sort(after.ravel())
    )
    assert np.array_equal(before, after)


def test_ablation_scores_every_variant(pipeline_run, tmp_path):
    cfg, out = pipeline_run
    work = tmp_path / "abl"
    work.mkdir()
    shutil.copy(out / DATA_FILE, work / DATA_FILE)
    shutil.copy(out / STATS_FILE, work / STATS_FILE)
    (path,) = run_ablation(cfg, work)
    assert path == work / ABLATION_FILE
    rows = read_metrics_csv(path)
    assert len(rows) == len(EXPERIMENTS) * len(cfg["evaluate"]["thresholds"])
    assert {r["member"] for r in rows} == set(EXPERIMENTS)
    assert all(r["metric"] == "csi" for r in rows)


def test_resolve_config_layering_and_validation():
    cfg = resolve_config({"det": {"steps": 9}}, {"det": {"experiment": "d1"}, "seed": 2})
    assert cfg["det"]["steps"] == 9
    assert cfg["det"]["experiment"] == "d1"
    assert cfg["seed"] == 2
    assert cfg["vae"]["steps"] == DEFAULTS["vae"]["steps"]
    with pytest.raises(ConfigurationError):
        resolve_config({"profile": "planetary"})
    with pytest.raises(ConfigurationError):
        resolve_config({"seed": -1})


def test_config_hash_tracks_content():
    assert config_hash(resolve_config()) == config_hash(resolve_config())
    assert config_hash(resolve_config()) != config_hash(resolve_config({"seed": 8}))


def test_eval_indices_clamp_and_reject():
    assert _eval_indices({"eval_times": 3}, 10) == [7, 8, 9]
    assert _eval_indices({"eval_times": 99}, 4) == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        _eval_indices({"eval_times": 0}, 10)


def test_stage_requires_upstream_artifacts(tmp_path):
    cfg = resolve_config()
    with pytest.raises(ConfigurationError, match=r"\[preprocess\].*synth-data"):
        run_stage("preprocess", cfg, tmp_path)
    with pytest.raises(ConfigurationError, match=r"\[evaluate\].*infer"):
        run_stage("evaluate", cfg, tmp_path)


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown stage"):
        run_stage("launch", resolve_config(), tmp_path)


def test_data_profile_mismatch_rejected(pipeline_run, tmp_path):
    _, out = pipeline_run
    shutil.copy(out / DATA_FILE, tmp_path / DATA_FILE)
    other = resolve_config({"profile": "full"})
    with pytest.raises(ConfigurationError, match="profile"):
        load_synth_data(other, tmp_path)


# ---------------------------------------------------------------------------
# command-line interface


def test_cli_stage_sequence(tmp_path):
    out = str(tmp_path / "run")
    base = ["--out", out, "--seed", "3"]
    assert cli.main(["synth-data", *base, "--n-times", "6", "--n-storms", "2"]) == 0
    assert cli.main(["preprocess", *base]) == 0
    assert cli.main(["train-det", *base, "--steps", "4", "--experiment", "baseline"]) == 0
    assert cli.main(["train-vae", *base, "--steps", "4"]) == 0
    assert cli.main(["train-diffusion", *base, "--steps", "4"]) == 0
    assert cli.main([
        "infer", *base, "--members", "2", "--steps", "3", "--eval-times", "1",
    ]) == 0
    assert cli.main(["pm", *base]) == 0
    assert cli.main(["evaluate", *base, "--thresholds", "0.5,2"]) == 0
    rows = read_metrics_csv(Path(out) / METRICS_FILE)
    assert {r["threshold"] for r in rows if r["metric"] == "csi"} == {0.5, 2.0}
    _, header = load_checkpoint(Path(out) / DATA_FILE)
    assert header["n_times"] == 6
    assert header["seed"] == 3


def test_cli_reports_artifact_paths(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main([
        "synth-data", "--out", str(out), "--n-times", "4", "--n-storms", "1",
    ]) == 0
    assert DATA_FILE in capsys.readouterr().out


def test_cli_uses_cache_env_dir(tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    monkeypatch.setenv(cli.CACHE_ENV, str(cache))
    assert cli.main(["synth-data", "--n-times", "4", "--n-storms", "1"]) == 0
    assert (cache / DATA_FILE).exists()


def test_cli_config_file_and_flag_precedence(tmp_path):
    cfgfile = tmp_path / "run.yaml"
    cfgfile.write_text("seed: 11\ndata:\n  n_times: 5\n  n_storms: 1\n")
    out = tmp_path / "a"
    assert cli.main(["synth-data", "--out", str(out), "--config", str(cfgfile)]) == 0
    _, header = load_checkpoint(out / DATA_FILE)
    assert header["n_times"] == 5
    assert header["seed"] == 11
    out2 = tmp_path / "b"
    assert cli.main([
        "synth-data", "--out", str(out2), "--config", str(cfgfile), "--n-times", "4",
    ]) == 0
    _, header = load_checkpoint(out2 / DATA_FILE)
    assert header["n_times"] == 4
    assert header["seed"] == 11


def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["preprocess", "--out", str(tmp_path), "--profile", "planetary"]) == 2
    assert "error:" in capsys.readouterr().err

    assert cli.main(["evaluate", "--out", str(tmp_path / "empty")]) == 2
    err = capsys.readouterr().err
    assert "[evaluate]" in err

    def boom(cfg, out):
        raise NumericError("loss became non-finite")

    monkeypatch.setitem(pipeline._STAGE_FUNCS, "train-det", boom)
    assert cli.main(["train-det", "--out", str(tmp_path / "n")]) == 3
    assert "[train-det]" in capsys.readouterr().err
