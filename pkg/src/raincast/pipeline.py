"""End-to-end orchestration from synthetic data to evaluated forecasts.

Stages run in a fixed order, each reading its inputs from the run
directory and writing one or more artifacts back into it:

    synth-data       data.ckpt
    preprocess       stats.json
    train-det        det.ckpt
    train-vae        vae.ckpt        (weights + latent calibration)
    train-diffusion  diffusion.ckpt
    infer            infer/t*_{member,mean,pm,obs}.gp
    evaluate         metrics.csv + figures

Every stage derives its randomness from the single run seed, so a rerun
with the same resolved configuration reproduces each artifact. The
manifest records the resolved configuration, its hash, and a checksum per
artifact; any stage failure is re-raised tagged with the stage name.
"""
from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from scipy import stats as scipy_stats

from .diffusion import make_schedule
from .ensemble import EnsembleSet, generate_members, probability_match
from .errors import ConfigurationError, RaincastError, ValidationError
from .grid import (
    AtmosphericState,
    GridField,
    GridSpec,
    NormalizationStats,
    SURFACE_VARS,
    TP_VAR,
    UPPER_VARS,
    denormalize_dbz,
    from_dbz,
)
from .gridpack import load_checkpoint, read_gridpack, save_checkpoint, write_gridpack
from .models.deterministic import EXPERIMENTS, DetModel, build_det_config
from .models.dit import build_dit
from .models.vae import ResidualVAE
from .profiles import get_profile
from .report import (
    MetricRow,
    plot_cdf_curves,
    plot_member_panels,
    plot_rank_histogram,
    plot_scores_by_threshold,
    write_metrics_csv,
)
from .synth import SynthConfig, SynthData, synth_generate
from .training import (
    condition_dataset,
    compute_normalization,
    derive_seed,
    det_dataset,
    load_extra_arrays,
    load_training_checkpoint,
    residual_dataset,
    save_training_checkpoint,
    train_det,
    train_diffusion,
    train_vae,
    calibrate_latents,
    encode_latents,
)
from .verification import THRESHOLDS, cdf_curve, contingency, csi_pod_far, rank_histogram

DATA_FILE = "data.ckpt"
STATS_FILE = "stats.json"
DET_FILE = "det.ckpt"
VAE_FILE = "vae.ckpt"
DIFFUSION_FILE = "diffusion.ckpt"
INFER_DIR = "infer"
METRICS_FILE = "metrics.csv"
ABLATION_FILE = "ablation.csv"
MANIFEST_FILE = "manifest.json"

STAGES = (
    "synth-data",
    "preprocess",
    "train-det",
    "train-vae",
    "train-diffusion",
    "infer",
    "evaluate",
)

DEFAULTS = {
    "profile": "desk",
    "seed": 7,
    "data": {"n_times": 16, "n_storms": 4},
    "det": {"experiment": "d4", "steps": 100, "batch_size": None, "lr": 3e-4},
    "vae": {"steps": 150, "batch_size": 8, "lr": 3e-4},
    "diffusion": {"steps": 300, "batch_size": 8, "lr": 3e-4},
    "infer": {"members": None, "steps": 50, "eval_times": 4},
    "evaluate": {"thresholds": list(THRESHOLDS)},
    "ablation": {"steps": 60, "eval_times": 4},
}


def resolve_config(*layers) -> dict:
    """DEFAULTS overlaid with config-file and CLI layers, rightmost wins."""
    from .profiles import merge_overrides

    cfg = merge_overrides(DEFAULTS, *layers)
    get_profile(cfg["profile"])
    if int(cfg["seed"]) < 0:
        raise ConfigurationError("seed must be non-negative")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"missing {path.name}; run the {producer} stage first")
    return path


# ---------------------------------------------------------------------------
# synth-data


def _spec_dict(spec: GridSpec) -> dict:
    return {
        "lat0": spec.lat0, "lon0": spec.lon0, "dlat": spec.dlat,
        "dlon": spec.dlon, "nlat": spec.nlat, "nlon": spec.nlon,
    }


def _spec_from(d: dict) -> GridSpec:
    return GridSpec(
        lat0=d["lat0"], lon0=d["lon0"], dlat=d["dlat"],
        dlon=d["dlon"], nlat=int(d["nlat"]), nlon=int(d["nlon"]),
    )


def stage_synth_data(cfg: dict, out: Path) -> list:
    profile = get_profile(cfg["profile"])
    synth_cfg = SynthConfig(
        coarse=profile.coarse,
        levels=profile.levels,
        crop_box=profile.residual_box,
        refinement=profile.refinement,
        n_times=int(cfg["data"]["n_times"]),
        n_storms=int(cfg["data"]["n_storms"]),
    )
    data = synth_generate(derive_seed(int(cfg["seed"]), "synth"), synth_cfg)
    arrays = {
        "surface": np.stack([s.surface for s in data.states]),
        "upper": np.stack([s.upper for s in data.states]),
        "features": np.stack([s.features for s in data.states]),
        "tp_coarse": data.tp_coarse.values,
        "tp_fine": data.tp_fine.values,
        "timestamps": np.asarray(
            [int(t.replace(tzinfo=timezone.utc).timestamp()) for t in data.timestamps],
            dtype=np.int64,
        ),
    }
    header = {
        "stage": "synth-data",
        "profile": profile.name,
        "seed": int(cfg["seed"]),
        "n_times": synth_cfg.n_times,
        "n_storms": synth_cfg.n_storms,
        "levels": list(profile.levels),
        "coarse": _spec_dict(profile.coarse),
        "fine": _spec_dict(profile.fine),
    }
    save_checkpoint(out / DATA_FILE, arrays, header)
    return [out / DATA_FILE]


def load_synth_data(cfg: dict, out: Path) -> SynthData:
    arrays, header = load_checkpoint(_require(out / DATA_FILE, "synth-data"))
    if header.get("profile") != cfg["profile"]:
        raise ConfigurationError(
            f"data was generated for profile {header.get('profile')!r}, "
            f"run requests {cfg['profile']!r}"
        )
    coarse = _spec_from(header["coarse"])
    fine = _spec_from(header["fine"])
    levels = tuple(header["levels"])
    timestamps = [
        datetime.fromtimestamp(int(t), tz=timezone.utc).replace(tzinfo=None)
        for t in arrays["timestamps"]
    ]
    states = []
    for ti, ts in enumerate(timestamps):
        states.append(
            AtmosphericState(
                surface=arrays["surface"][ti],
                surface_vars=SURFACE_VARS + (TP_VAR,),
                upper=arrays["upper"][ti],
                upper_vars=UPPER_VARS,
                levels=levels,
                lat0=coarse.lat0,
                lon0=coarse.lon0,
                dlat=coarse.dlat,
                dlon=coarse.dlon,
                timestamp=ts,
                features=arrays["features"][ti],
            )
        )

    def mkgrid(vals, spec):
        return GridField(
            values=vals, dims=("time", "lat", "lon"), lat0=spec.lat0, lon0=spec.lon0,
            dlat=spec.dlat, dlon=spec.dlon, unit_tag="mm", name=TP_VAR,
            timestamp=timestamps[0],
        )

    return SynthData(
        states=states,
        tp_coarse=mkgrid(arrays["tp_coarse"], coarse),
        tp_fine=mkgrid(arrays["tp_fine"], fine),
        timestamps=timestamps,
    )


# ---------------------------------------------------------------------------
# preprocess


def stage_preprocess(cfg: dict, out: Path) -> list:
    data = load_synth_data(cfg, out)
    stats = compute_normalization(data)
    with open(out / STATS_FILE, "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
    return [out / STATS_FILE]


def load_stats(out: Path) -> NormalizationStats:
    with open(_require(out / STATS_FILE, "preprocess")) as fh:
        return NormalizationStats.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# training stages


def stage_train_det(cfg: dict, out: Path) -> list:
    profile = get_profile(cfg["profile"])
    data = load_synth_data(cfg, out)
    stats = load_stats(out)
    det_cfg = cfg["det"]
    experiment = det_cfg["experiment"]
    torch.manual_seed(derive_seed(int(cfg["seed"]), "init:det"))
    model = DetModel(build_det_config(profile, experiment))
    dataset = det_dataset(data, stats, with_features=EXPERIMENTS[experiment][1])
    run = train_det(
        model,
        dataset,
        steps=int(det_cfg["steps"]),
        seed=int(cfg["seed"]),
        base_lr=float(det_cfg["lr"]),
        batch_size=det_cfg["batch_size"],
    )
    save_training_checkpoint(
        out / DET_FILE,
        model,
        run.optimizer,
        step=int(det_cfg["steps"]),
        config={
            "stage": "train-det",
            "profile": profile.name,
            "experiment": experiment,
            "loss_history": run.history,
        },
    )
    return [out / DET_FILE]


def load_det_model(cfg: dict, out: Path) -> tuple:
    """(model, experiment) from the trained checkpoint."""
    profile = get_profile(cfg["profile"])
    _, header = load_checkpoint(_require(out / DET_FILE, "train-det"))
    experiment = header["experiment"]
    model = DetModel(build_det_config(profile, experiment))
    load_training_checkpoint(out / DET_FILE, model)
    model.eval()
    return model, experiment


def stage_train_vae(cfg: dict, out: Path) -> list:
    profile = get_profile(cfg["profile"])
    data = load_synth_data(cfg, out)
    stats = load_stats(out)
    vae_cfg = cfg["vae"]
    residuals = residual_dataset(data, stats, profile)
    torch.manual_seed(derive_seed(int(cfg["seed"]), "init:vae"))
    model = ResidualVAE(channels=profile.vae_channels)
    run = train_vae(
        model,
        residuals.tensors,
        steps=int(vae_cfg["steps"]),
        seed=int(cfg["seed"]),
        base_lr=float(vae_cfg["lr"]),
        batch_size=vae_cfg["batch_size"],
    )
    shift, scale = calibrate_latents(model, residuals.tensors)
    save_training_checkpoint(
        out / VAE_FILE,
        model,
        run.optimizer,
        step=int(vae_cfg["steps"]),
        config={
            "stage": "train-vae",
            "profile": profile.name,
            "loss_history": run.history,
        },
        extra={"latent_shift": shift, "latent_scale": scale},
    )
    return [out / VAE_FILE]


def load_vae(cfg: dict, out: Path):
    profile = get_profile(cfg["profile"])
    model = ResidualVAE(channels=profile.vae_channels)
    load_training_checkpoint(_require(out / VAE_FILE, "train-vae"), model)
    model.eval()
    extras = load_extra_arrays(out / VAE_FILE)
    shift = torch.from_numpy(extras["latent_shift"])
    scale = torch.from_numpy(extras["latent_scale"])
    return model, shift, scale


def stage_train_diffusion(cfg: dict, out: Path) -> list:
    profile = get_profile(cfg["profile"])
    data = load_synth_data(cfg, out)
    stats = load_stats(out)
    dif_cfg = cfg["diffusion"]
    vae, shift, scale = load_vae(cfg, out)
    residuals = residual_dataset(data, stats, profile)
    latents = encode_latents(vae, residuals.tensors, shift, scale, seed=int(cfg["seed"]))
    cond = condition_dataset(data, stats, profile)
    torch.manual_seed(derive_seed(int(cfg["seed"]), "init:diffusion"))
    model = build_dit(profile)
    schedule = make_schedule(profile.diffusion_timesteps, "linear")
    run = train_diffusion(
        model,
        latents,
        cond,
        schedule,
        steps=int(dif_cfg["steps"]),
        seed=int(cfg["seed"]),
        base_lr=float(dif_cfg["lr"]),
        batch_size=dif_cfg["batch_size"],
    )
    save_training_checkpoint(
        out / DIFFUSION_FILE,
        model,
        run.optimizer,
        step=int(dif_cfg["steps"]),
        config={
            "stage": "train-diffusion",
            "profile": profile.name,
            "timesteps": profile.diffusion_timesteps,
            "loss_history": run.history,
        },
    )
    return [out / DIFFUSION_FILE]


# ---------------------------------------------------------------------------
# inference


def _eval_indices(cfg_section: dict, n_samples: int) -> list:
    k = min(int(cfg_section["eval_times"]), n_samples)
    if k < 1:
        raise ValidationError("need at least one evaluation time")
    return list(range(n_samples - k, n_samples))


def stage_infer(cfg: dict, out: Path) -> list:
    profile = get_profile(cfg["profile"])
    data = load_synth_data(cfg, out)
    stats = load_stats(out)
    infer_cfg = cfg["infer"]
    seed = int(cfg["seed"])
    n_members = infer_cfg["members"] or profile.members
    steps = int(infer_cfg["steps"])

    det, experiment = load_det_model(cfg, out)
    vae, shift, scale = load_vae(cfg, out)
    dit = build_dit(profile)
    load_training_checkpoint(_require(out / DIFFUSION_FILE, "train-diffusion"), dit)
    dit.eval()
    schedule = make_schedule(profile.diffusion_timesteps, "linear")

    dataset = det_dataset(data, stats, with_features=EXPERIMENTS[experiment][1])
    cond_all = condition_dataset(data, stats, profile)
    indices = _eval_indices(infer_cfg, dataset.surface.shape[0])
    with torch.no_grad():
        preds = det(dataset.surface[indices], dataset.upper[indices])

    infer_dir = out / INFER_DIR
    infer_dir.mkdir(parents=True, exist_ok=True)
    r0, c0, nr, nc = profile.condition_box
    coarse = profile.coarse
    written = []
    for j, i in enumerate(indices):
        ts = data.timestamps[i + 1]
        mean_norm = GridField(
            values=preds[j, 0].numpy().astype(np.float64),
            dims=("lat", "lon"),
            lat0=coarse.lat0,
            lon0=coarse.lon0,
            dlat=coarse.dlat,
            dlon=coarse.dlon,
            unit_tag="norm",
            name=TP_VAR,
            timestamp=ts,
        )
        cond = cond_all[i].clone()
        cond[len(SURFACE_VARS)] = preds[j, 0, r0 : r0 + nr, c0 : c0 + nc]
        ens = generate_members(
            mean_norm,
            cond[None],
            vae,
            dit,
            schedule,
            stats,
            profile,
            latent_shift=shift,
            latent_scale=scale,
            n_members=int(n_members),
            base_seed=derive_seed(seed, f"members:{i}"),
            steps=steps,
            timestamp=ts,
        )
        tag = f"t{i:03d}"
        extra = {"time_index": i}
        for m, member in enumerate(ens.members):
            path = infer_dir / f"{tag}_member{m:02d}.gp"
            write_gridpack(member._with(member.values, name=TP_VAR), path, extra)
            written.append(path)
        obs_vals = data.tp_fine.values[i + 1]
        obs = ens.members[0]._with(obs_vals, name=TP_VAR, timestamp=ts)
        for suffix, field in (
            ("mean", ens.mean_field()),
            ("pm", probability_match(ens)),
            ("obs", obs),
        ):
            path = infer_dir / f"{tag}_{suffix}.gp"
            write_gridpack(field, path, extra)
            written.append(path)
    return written


def _infer_times(out: Path) -> list:
    infer_dir = _require(out / INFER_DIR, "infer")
    tags = sorted({p.name.split("_")[0] for p in infer_dir.glob("t*_obs.gp")})
    if not tags:
        raise ConfigurationError("infer directory holds no forecasts; run infer first")
    return tags


def _read_members(out: Path, tag: str) -> list:
    infer_dir = out / INFER_DIR
    return [read_gridpack(p) for p in sorted(infer_dir.glob(f"{tag}_member*.gp"))]


def _read_group(out: Path, tag: str):
    infer_dir = out / INFER_DIR
    members = _read_members(out, tag)
    obs = read_gridpack(infer_dir / f"{tag}_obs.gp")
    mean = read_gridpack(infer_dir / f"{tag}_mean.gp")
    pm = read_gridpack(infer_dir / f"{tag}_pm.gp")
    return members, mean, pm, obs


def stage_pm(cfg: dict, out: Path) -> list:
    """Recompute the probability-matched product from stored members."""
    written = []
    for tag in _infer_times(out):
        ens = EnsembleSet(members=_read_members(out, tag), base_seed=0)
        path = out / INFER_DIR / f"{tag}_pm.gp"
        write_gridpack(probability_match(ens), path, {"time_index": int(tag[1:])})
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# evaluation


def _score_rows(label, table, lead_time):
    csi, pod, far = csi_pod_far(table)
    thr = table.threshold
    return [
        MetricRow(metric="csi", value=csi, threshold=thr, lead_time=lead_time, member=label),
        MetricRow(metric="pod", value=pod, threshold=thr, lead_time=lead_time, member=label),
        MetricRow(metric="far", value=far, threshold=thr, lead_time=lead_time, member=label),
    ]


def stage_evaluate(cfg: dict, out: Path) -> list:
    thresholds = [float(t) for t in cfg["evaluate"]["thresholds"]]
    seed = int(cfg["seed"])
    tags = _infer_times(out)

    rows = []
    aggregate = {}
    member_series = []
    obs_series = []
    last_group = None
    for tag in tags:
        members, mean, pm, obs = _read_group(out, tag)
        lead = int(tag[1:]) + 1
        stack = np.stack([m.values for m in members])
        member_series.append(stack)
        obs_series.append(obs.values)
        last_group = (tag, stack, mean, pm, obs)
        for thr in thresholds:
            for label, fc in (("mean", mean), ("pm", pm)):
                table = contingency(fc, obs, thr)
                rows.extend(_score_rows(label, table, lead))
                key = (label, thr)
                aggregate[key] = table if key not in aggregate else aggregate[key] + table

    agg_rows = []
    for (label, thr), table in sorted(aggregate.items()):
        agg_rows.extend(_score_rows(label, table, None))
    rows.extend(agg_rows)

    histogram = rank_histogram(member_series, obs_series, seed=derive_seed(seed, "rank"))
    freq = histogram.frequencies()
    for k, f in enumerate(freq):
        rows.append(MetricRow(metric="rank_frequency", value=float(f), member=f"bin{k}"))
    p_value = float(scipy_stats.chisquare(histogram.counts).pvalue)
    rows.append(MetricRow(metric="rank_p_value", value=p_value))

    pooled_members = np.concatenate([s.ravel() for s in member_series])
    pooled_obs = np.concatenate([o.ravel() for o in obs_series])
    member_cdf = cdf_curve(pooled_members, thresholds)
    obs_cdf = cdf_curve(pooled_obs, thresholds)
    for thr, mv, ov in zip(thresholds, member_cdf, obs_cdf):
        rows.append(MetricRow(metric="cdf_members", value=float(mv), threshold=thr))
        rows.append(MetricRow(metric="cdf_observed", value=float(ov), threshold=thr))

    write_metrics_csv(rows, out / METRICS_FILE)
    written = [out / METRICS_FILE]

    plot_rank_histogram(histogram, out / "rank_histogram.png")
    plot_cdf_curves(
        {"members": member_cdf, "observed": obs_cdf}, thresholds, out / "cdf.png"
    )
    plot_scores_by_threshold(
        [r for r in agg_rows if r.member == "pm"], out / "scores.png"
    )
    tag, stack, mean, pm, obs = last_group
    panels = np.concatenate(
        [stack[:4], mean.values[None], pm.values[None], obs.values[None]]
    )
    labels = [f"member {m}" for m in range(min(4, stack.shape[0]))]
    labels += ["ensemble mean", "prob. matched", "observed"]
    plot_member_panels(panels, out / f"members_{tag}.png", labels=labels)
    written += [
        out / "rank_histogram.png",
        out / "cdf.png",
        out / "scores.png",
        out / f"members_{tag}.png",
    ]
    return written


# ---------------------------------------------------------------------------
# full pipeline and the ablation driver


_STAGE_FUNCS = {
    "synth-data": stage_synth_data,
    "preprocess": stage_preprocess,
    "train-det": stage_train_det,
    "train-vae": stage_train_vae,
    "train-diffusion": stage_train_diffusion,
    "infer": stage_infer,
    "pm": stage_pm,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: dict, out: Path) -> list:
    """One stage with stage-tagged diagnostics on failure."""
    func = _STAGE_FUNCS.get(name)
    if func is None:
        raise ConfigurationError(f"unknown stage {name!r}; stages: {sorted(_STAGE_FUNCS)}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        return func(cfg, out)
    except RaincastError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def run_pipeline(cfg: dict, out: Path, ablation: bool = False) -> Path:
    out = Path(out)
    manifest = {
        "version": 1,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "stages": {},
    }
    for name in STAGES:
        artifacts = run_stage(name, cfg, out)
        manifest["stages"][name] = {
            "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts}
        }
    if ablation:
        artifacts = run_ablation(cfg, out)
        manifest["stages"]["ablation"] = {
            "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts}
        }
    with open(out / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out / MANIFEST_FILE


def run_ablation(cfg: dict, out: Path) -> list:
    """Train each model variant and score its mean forecast per threshold."""
    profile = get_profile(cfg["profile"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / DATA_FILE).exists():
        stage_synth_data(cfg, out)
    if not (out / STATS_FILE).exists():
        stage_preprocess(cfg, out)
    data = load_synth_data(cfg, out)
    stats = load_stats(out)
    abl_cfg = cfg["ablation"]
    thresholds = [float(t) for t in cfg["evaluate"]["thresholds"]]
    scale = stats.dbz_scales["coarse"]

    rows = []
    for experiment in EXPERIMENTS:
        torch.manual_seed(derive_seed(int(cfg["seed"]), f"init:ablation:{experiment}"))
        model = DetModel(build_det_config(profile, experiment))
        dataset = det_dataset(data, stats, with_features=EXPERIMENTS[experiment][1])
        train_det(
            model,
            dataset,
            steps=int(abl_cfg["steps"]),
            seed=derive_seed(int(cfg["seed"]), f"ablation:{experiment}"),
            batch_size=cfg["det"]["batch_size"],
        )
        model.eval()
        indices = _eval_indices(abl_cfg, dataset.surface.shape[0])
        with torch.no_grad():
            preds = det_forecast_mm(model, dataset, indices, scale)
        tables = {}
        for j, i in enumerate(indices):
            obs = data.tp_coarse.values[i + 1]
            for thr in thresholds:
                table = contingency(preds[j], obs, thr)
                tables[thr] = table if thr not in tables else tables[thr] + table
        for thr in thresholds:
            csi, _, _ = csi_pod_far(tables[thr])
            rows.append(
                MetricRow(metric="csi", value=csi, threshold=thr, member=experiment)
            )
    write_metrics_csv(rows, out / ABLATION_FILE)
    return [out / ABLATION_FILE]


def det_forecast_mm(model, dataset, indices, dbz_scale: float) -> np.ndarray:
    """Mean forecasts for the chosen samples, inverted to mm amounts."""
    with torch.no_grad():
        preds = model(dataset.surface[indices], dataset.upper[indices])
    fields = preds[:, 0].numpy().astype(np.float64)
    out = []
    for vals in fields:
        f = GridField(
            values=vals, dims=("lat", "lon"), lat0=0.0, lon0=0.0, dlat=1.0, dlon=1.0,
            unit_tag="norm", name=TP_VAR,
        )
        out.append(from_dbz(denormalize_dbz(f, dbz_scale)).values)
    return np.stack(out)
