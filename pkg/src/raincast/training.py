"""Dataset assembly and the three training loops (mean model, VAE, denoiser).

All randomness is derived from one base seed: every consumer hashes
(seed, tag) into its own generator, and per-step draws hash the step index
into the tag, so a resumed run continues the exact same random stream
without carrying generator state in checkpoints.

Standardized variables use per-variable mean/std; precipitation instead
travels through the reflectivity transform and per-dataset scale. The
condition stack for the denoiser carries the normalized coarse
precipitation in its TP channel, so the deterministic forecast can be
swapped in at inference without changing units.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, ValidationError
from .grid import (
    GridField,
    NormalizationStats,
    SURFACE_VARS,
    UPPER_VARS,
    compute_dbz_scale,
    crop_window,
    decompose_residual,
    normalize_dbz,
    standardize_array,
    to_dbz,
)
from .gridpack import load_checkpoint, save_checkpoint

DET_LR = 3e-4
VAE_LR = 3e-4
DIF_LR = 3e-4
GRAD_CLIP = 1.0
KL_WEIGHT = 1e-6


def derive_seed(base: int, tag: str) -> int:
    """Stable 63-bit seed from a base seed and a purpose tag."""
    digest = hashlib.blake2s(f"{base}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _gen(base: int, tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base, tag))
    return g


# ---------------------------------------------------------------------------
# normalization statistics


def compute_normalization(data) -> NormalizationStats:
    """Per-variable mean/std plus reflectivity scales for both grids."""
    means = {}
    stds = {}
    surf = np.stack([s.surface for s in data.states]).astype(np.float64)
    for i, var in enumerate(SURFACE_VARS):
        means[var] = float(surf[:, i].mean())
        stds[var] = float(surf[:, i].std())
    upper = np.stack([s.upper for s in data.states]).astype(np.float64)
    for i, var in enumerate(UPPER_VARS):
        means[var] = float(upper[:, i].mean())
        stds[var] = float(upper[:, i].std())
    def scale_of(series: GridField) -> float:
        dbz = to_dbz(series)
        slices = [_time_slice(dbz, t) for t in range(dbz.values.shape[0])]
        return compute_dbz_scale(slices)

    scales = {"coarse": scale_of(data.tp_coarse), "fine": scale_of(data.tp_fine)}
    return NormalizationStats(means=means, stds=stds, dbz_scales=scales)


# ---------------------------------------------------------------------------
# dataset assembly; sample i corresponds to time index i + 1 so every
# sample has a preceding state


def _time_slice(f: GridField, t: int) -> GridField:
    return GridField(
        values=f.values[t],
        dims=f.dims[1:],
        lat0=f.lat0,
        lon0=f.lon0,
        dlat=f.dlat,
        dlon=f.dlon,
        unit_tag=f.unit_tag,
        name=f.name,
        timestamp=f.timestamp,
    )


def _std_surface(state, stats: NormalizationStats) -> np.ndarray:
    rows = [
        standardize_array(state.surface_var(v), stats.means[v], stats.stds[v])
        for v in SURFACE_VARS
    ]
    return np.stack(rows)


def _std_upper(state, stats: NormalizationStats) -> np.ndarray:
    rows = [
        standardize_array(state.upper_var(v), stats.means[v], stats.stds[v])
        for v in UPPER_VARS
    ]
    return np.stack(rows)


@dataclass
class DetDataset:
    """Tensors for the mean-precipitation model; targets are normalized dBZ."""

    surface: torch.Tensor    # (N, 2*4 [+9 features], H, W)
    upper: torch.Tensor      # (N, 2*5, L, H, W)
    target: torch.Tensor     # (N, 1, H, W)


def det_dataset(data, stats: NormalizationStats, with_features: bool) -> DetDataset:
    target_series = normalize_dbz(to_dbz(data.tp_coarse), stats.dbz_scales["coarse"])
    surface = []
    upper = []
    target = []
    for t in range(1, len(data.states)):
        prev, cur = data.states[t - 1], data.states[t]
        chans = [_std_surface(prev, stats), _std_surface(cur, stats)]
        if with_features:
            chans.append(cur.features)
        surface.append(np.concatenate(chans, axis=0))
        upper.append(np.concatenate([_std_upper(prev, stats), _std_upper(cur, stats)], axis=0))
        target.append(target_series.values[t][None])
    return DetDataset(
        surface=torch.from_numpy(np.stack(surface).astype(np.float32)),
        upper=torch.from_numpy(np.stack(upper).astype(np.float32)),
        target=torch.from_numpy(np.stack(target).astype(np.float32)),
    )


@dataclass
class ResidualDataset:
    """Residual precipitation over the fine region, one sample per time."""

    tensors: torch.Tensor    # (N, 1, Hf, Wf) float32
    fields: list             # matching ResidualField objects (float64)


def residual_dataset(data, stats: NormalizationStats, profile) -> ResidualDataset:
    coarse_norm = normalize_dbz(to_dbz(data.tp_coarse), stats.dbz_scales["coarse"])
    fine_norm = normalize_dbz(to_dbz(data.tp_fine), stats.dbz_scales["fine"])
    fields = []
    for t in range(1, len(data.states)):
        coarse_crop = crop_window(_time_slice(coarse_norm, t), *profile.residual_box)
        fields.append(decompose_residual(_time_slice(fine_norm, t), coarse_crop))
    stacked = np.stack([f.values for f in fields])[:, None].astype(np.float32)
    return ResidualDataset(tensors=torch.from_numpy(stacked), fields=fields)


def condition_dataset(data, stats: NormalizationStats, profile) -> torch.Tensor:
    """Standardized state plus normalized coarse precipitation, cropped to
    the condition region: (N, 4 + 1 + 5L, ch, cw)."""
    r0, c0, nr, nc = profile.condition_box
    coarse_norm = normalize_dbz(to_dbz(data.tp_coarse), stats.dbz_scales["coarse"])
    out = []
    for t in range(1, len(data.states)):
        state = data.states[t]
        surf = _std_surface(state, stats)[:, r0 : r0 + nr, c0 : c0 + nc]
        tp = coarse_norm.values[t][None, r0 : r0 + nr, c0 : c0 + nc]
        up = _std_upper(state, stats)[:, :, r0 : r0 + nr, c0 : c0 + nc]
        up = up.reshape(-1, nr, nc)
        out.append(np.concatenate([surf, tp, up], axis=0))
    return torch.from_numpy(np.stack(out).astype(np.float32))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainRun:
    history: list
    optimizer: torch.optim.Optimizer


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def _apply_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(loss: torch.Tensor, stage: str, step: int):
    if not torch.isfinite(loss):
        raise NumericError(f"{stage} loss became non-finite at step {step}")


def _batch_indices(n: int, batch_size, seed: int, tag: str, step: int):
    if batch_size is None or batch_size >= n:
        return torch.arange(n)
    g = _gen(seed, f"{tag}:batch:{step}")
    return torch.randperm(n, generator=g)[:batch_size]


def train_det(
    model,
    dataset: DetDataset,
    *,
    steps: int,
    seed: int,
    total_steps: int | None = None,
    start_step: int = 0,
    base_lr: float = DET_LR,
    batch_size: int | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> TrainRun:
    from .losses import mse_ssim_loss

    cfg = model.cfg
    if cfg.loss == "mse_ssim":
        loss_fn = lambda p, t: mse_ssim_loss(p, t, cfg.lambda_mse, cfg.lambda_ssim)
    else:
        loss_fn = lambda p, t: torch.mean((p - t) ** 2)
    total = total_steps if total_steps is not None else start_step + steps
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=base_lr)
    n = dataset.surface.shape[0]
    history = []
    model.train()
    for step in range(start_step, start_step + steps):
        _apply_lr(optimizer, _cosine_lr(base_lr, step, total))
        idx = _batch_indices(n, batch_size, seed, "det", step)
        pred = model(dataset.surface[idx], dataset.upper[idx])
        loss = loss_fn(pred, dataset.target[idx])
        _check_finite(loss, "deterministic", step)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
        optimizer.step()
        history.append(float(loss.item()))
    return TrainRun(history=history, optimizer=optimizer)


def train_vae(
    model,
    residuals: torch.Tensor,
    *,
    steps: int,
    seed: int,
    total_steps: int | None = None,
    start_step: int = 0,
    base_lr: float = VAE_LR,
    batch_size: int | None = None,
    kl_weight: float = KL_WEIGHT,
    optimizer: torch.optim.Optimizer | None = None,
) -> TrainRun:
    from .models.vae import kl_divergence

    total = total_steps if total_steps is not None else start_step + steps
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=base_lr)
    n = residuals.shape[0]
    out_hw = tuple(residuals.shape[-2:])
    history = []
    model.train()
    for step in range(start_step, start_step + steps):
        _apply_lr(optimizer, _cosine_lr(base_lr, step, total))
        idx = _batch_indices(n, batch_size, seed, "vae", step)
        x = residuals[idx]
        code = model.encode(x, generator=_gen(seed, f"vae:eps:{step}"))
        rec = model.decode(code.sample, out_hw)
        loss = torch.nn.functional.l1_loss(rec, x) + kl_weight * kl_divergence(
            code.mu, code.logvar
        )
        _check_finite(loss, "vae", step)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
        optimizer.step()
        history.append(float(loss.item()))
    return TrainRun(history=history, optimizer=optimizer)


def calibrate_latents(model, residuals: torch.Tensor) -> tuple:
    """Per-channel shift/scale of posterior samples over the dataset, so
    scaled latents are zero-mean unit-variance for the denoiser."""
    model.eval()
    with torch.no_grad():
        code = model.encode(residuals, generator=_gen(0, "calibration"))
        draw = code.sample
    shift = draw.mean(dim=(0, 2, 3))
    scale = draw.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return shift, scale


def encode_latents(model, residuals: torch.Tensor, shift, scale, *, seed: int) -> torch.Tensor:
    """Scaled posterior samples used as diffusion training data."""
    model.eval()
    with torch.no_grad():
        code = model.encode(residuals, generator=_gen(seed, "latents"))
    return (code.sample - shift.reshape(1, -1, 1, 1)) / scale.reshape(1, -1, 1, 1)


def train_diffusion(
    model,
    latents: torch.Tensor,
    cond: torch.Tensor,
    schedule,
    *,
    steps: int,
    seed: int,
    total_steps: int | None = None,
    start_step: int = 0,
    base_lr: float = DIF_LR,
    batch_size: int | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> TrainRun:
    from .diffusion import diffusion_loss

    if latents.shape[0] != cond.shape[0]:
        raise ValidationError("latents and conditions must align one-to-one")
    total = total_steps if total_steps is not None else start_step + steps
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=base_lr)
    n = latents.shape[0]
    history = []
    model.train()
    for step in range(start_step, start_step + steps):
        _apply_lr(optimizer, _cosine_lr(base_lr, step, total))
        idx = _batch_indices(n, batch_size, seed, "dif", step)
        z0 = latents[idx]
        c = cond[idx]
        g = _gen(seed, f"dif:draw:{step}")
        t = torch.randint(1, schedule.timesteps + 1, (z0.shape[0],), generator=g)
        eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        loss = diffusion_loss(lambda z, tt: model(z, tt, c), z0, t, eps, schedule)
        _check_finite(loss, "diffusion", step)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
        optimizer.step()
        history.append(float(loss.item()))
    return TrainRun(history=history, optimizer=optimizer)


# ---------------------------------------------------------------------------
# checkpointing: model weights plus optimizer moments in one container


def save_training_checkpoint(path, model, optimizer, step: int, config: dict, extra=None):
    arrays = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        arrays[f"model/{name}"] = arr
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, value in entry.items():
                if torch.is_tensor(value):
                    if value.dim() == 0:
                        arrays[f"opt/{idx}/{key}"] = np.asarray(
                            float(value), dtype=np.float64
                        ).reshape(1)
                    else:
                        arrays[f"opt/{idx}/{key}"] = value.detach().cpu().numpy()
                else:
                    arrays[f"opt/{idx}/{key}"] = np.asarray(
                        float(value), dtype=np.float64
                    ).reshape(1)
    for name, value in (extra or {}).items():
        value = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        arrays[f"extra/{name}"] = value
    save_checkpoint(path, arrays, dict(config, step=int(step)))


def load_extra_arrays(path) -> dict:
    """Side arrays stored next to the weights (e.g. latent calibration)."""
    arrays, _ = load_checkpoint(path)
    return {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}


def load_training_checkpoint(path, model, optimizer=None):
    """Restore weights (and optimizer moments when given); returns (step, config)."""
    arrays, config = load_checkpoint(path)
    weights = {}
    for name, arr in arrays.items():
        if name.startswith("model/"):
            weights[name[len("model/") :]] = torch.from_numpy(arr.copy())
    model.load_state_dict(weights, strict=True)
    if optimizer is not None:
        state = {}
        for name, arr in arrays.items():
            if not name.startswith("opt/"):
                continue
            _, idx, key = name.split("/", 2)
            entry = state.setdefault(int(idx), {})
            if key == "step":
                entry[key] = torch.tensor(float(arr[0]), dtype=torch.float32)
            else:
                entry[key] = torch.from_numpy(arr.copy())
        sd = optimizer.state_dict()
        sd["state"] = state
        optimizer.load_state_dict(sd)
    return int(config["step"]), config
