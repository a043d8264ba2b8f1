"""3-D shifted-window attention backbone over (depth, lat, lon) token grids.

Attention runs inside non-overlapping windows; alternating blocks shift the
grid by half a window so information crosses window borders. Token grids
that do not tile evenly are zero-padded for attention and un-padded after.
The backbone stacks three stages with depths (3, 9, 3): the middle stage
runs at halved spatial resolution and doubled width after patch merging and
is brought back by trilinear upsampling plus a pointwise channel-reduction
convolution. Stage outputs re-enter additively, so zeroing the middle
branch and the third stage's projections reduces the whole backbone to the
first stage's output.

Tensors are channel-last internally: (B, D, H, W, C).
"""
from __future__ import annotations

import itertools

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError


def _to_3tuple(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x, x, x)


def half_window_shift(window) -> tuple:
    return tuple(w // 2 for w in window)


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nWindows, wd * wh * ww, C)."""
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    x = x.view(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, c)
    return x


def window_reverse(windows: torch.Tensor, window, dims) -> torch.Tensor:
    b, d, h, w = dims
    wd, wh, ww = window
    x = windows.view(b, d // wd, h // wh, w // ww, wd, wh, ww, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)
    return x


def _relative_position_index(window) -> torch.Tensor:
    wd, wh, ww = window
    coords = torch.stack(
        torch.meshgrid(
            torch.arange(wd), torch.arange(wh), torch.arange(ww), indexing="ij"
        )
    ).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += wd - 1
    rel[:, :, 1] += wh - 1
    rel[:, :, 2] += ww - 1
    rel[:, :, 0] *= (2 * wh - 1) * (2 * ww - 1)
    rel[:, :, 1] *= 2 * ww - 1
    return rel.sum(-1)


def _shift_attention_mask(dims, window, shift, device) -> torch.Tensor:
    """Region labels -> additive mask that hides cross-region pairs."""
    d, h, w = dims
    wd, wh, ww = window
    sd, sh, sw = shift
    img = torch.zeros((1, d, h, w, 1), device=device)
    cnt = 0
    for ds, hs, ws in itertools.product(
        (slice(0, -wd), slice(-wd, -sd), slice(-sd, None)) if sd else (slice(None),),
        (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)) if sh else (slice(None),),
        (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)) if sw else (slice(None),),
    ):
        img[:, ds, hs, ws, :] = cnt
        cnt += 1
    regions = window_partition(img, window).squeeze(-1)  # (nW, tokens)
    mask = regions[:, None, :] - regions[:, :, None]
    return mask.masked_fill(mask != 0, float(-100.0)).masked_fill(mask == 0, 0.0)


class WindowAttention3d(nn.Module):
    """Multi-head attention within a window with relative position bias."""

    def __init__(self, dim: int, window, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError("attention width must divide evenly into heads")
        self.dim = dim
        self.window = _to_3tuple(window)
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        wd, wh, ww = self.window
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(
            torch.zeros((2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1), heads)
        )
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("bias_index", _relative_position_index(self.window), persistent=False)

    def forward(self, x: torch.Tensor, mask=None, return_attn: bool = False):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.bias_index[:n, :n].reshape(-1)].reshape(n, n, -1)
        attn = attn + bias.permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(bw, n, c))
        if return_attn:
            return out, attn
        return out


class SwinBlock3d(nn.Module):
    """Pre-norm window attention + MLP with residual connections."""

    def __init__(self, dim: int, heads: int, window, shift, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = _to_3tuple(window)
        self.shift = _to_3tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, self.window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        wd, wh, ww = self.window
        if wd > d or wh > h or ww > w:
            raise ValidationError(
                f"window {self.window} larger than token extent {(d, h, w)}"
            )
        pad_d = (wd - d % wd) % wd
        pad_h = (wh - h % wh) % wh
        pad_w = (ww - w % ww) % ww
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h, 0, pad_d))
        dp, hp, wp = d + pad_d, h + pad_h, w + pad_w

        shift = self.shift
        if any(shift):
            x = torch.roll(x, shifts=(-shift[0], -shift[1], -shift[2]), dims=(1, 2, 3))
            mask = _shift_attention_mask((dp, hp, wp), self.window, shift, x.device)
        else:
            mask = None

        windows = window_partition(x, self.window)
        windows = self.attn(windows, mask=mask)
        x = window_reverse(windows, self.window, (b, dp, hp, wp))
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        return x[:, :d, :h, :w].contiguous()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attend(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging3d(nn.Module):
    """Concatenate 2 x 2 spatial neighbors and project 4C -> 2C; depth kept."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x = torch.cat(
            [x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]],
            dim=-1,
        )
        return self.reduce(self.norm(x))


class StageUpsample(nn.Module):
    """Trilinear upsample to a target token extent, then channels 2C -> C."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.reduce = nn.Conv3d(dim_in, dim_out, kernel_size=1)

    def forward(self, x: torch.Tensor, size) -> torch.Tensor:
        x = x.permute(0, 4, 1, 2, 3)  # to (B, C, D, H, W)
        x = F.interpolate(x, size=size, mode="trilinear", align_corners=False)
        x = self.reduce(x)
        return x.permute(0, 2, 3, 4, 1)


def _make_stage(dim, depth, heads, window):
    shift = half_window_shift(window)
    blocks = []
    for i in range(depth):
        blocks.append(
            SwinBlock3d(dim, heads, window, shift=(0, 0, 0) if i % 2 == 0 else shift)
        )
    return nn.ModuleList(blocks)


class SwinBackbone3d(nn.Module):
    """Three-stage encoder over a (B, C, D, H, W) token grid.

    stage 1 (C) -> patch merge -> stage 2 (2C, half spatial) -> upsample
    back to full resolution and C channels -> added to the stage-1 output
    -> stage 3 (C). Residual block structure keeps both earlier outputs
    present additively in the final activation.
    """

    def __init__(self, dim: int, depths=(3, 9, 3), heads=(4, 8, 4), window=(2, 6, 6)):
        super().__init__()
        if tuple(depths) != (3, 9, 3):
            raise ValidationError("stage depths are fixed at (3, 9, 3)")
        window = _to_3tuple(window)
        self.dim = dim
        self.window = window
        self.stage1 = _make_stage(dim, depths[0], heads[0], window)
        self.merge = PatchMerging3d(dim)
        self.stage2 = _make_stage(2 * dim, depths[1], heads[1], window)
        self.upsample = StageUpsample(2 * dim, dim)
        self.stage3 = _make_stage(dim, depths[2], heads[2], window)

    def forward(self, x: torch.Tensor, return_intermediates: bool = False):
        if x.dim() != 5:
            raise ValidationError("backbone expects (B, C, D, H, W)")
        x = x.permute(0, 2, 3, 4, 1)  # channel-last
        d, h, w = x.shape[1:4]

        x1 = x
        for blk in self.stage1:
            x1 = blk(x1)

        mid = self.merge(x1)
        for blk in self.stage2:
            mid = blk(mid)
        up = self.upsample(mid, size=(d, h, w))

        x3 = x1 + up
        for blk in self.stage3:
            x3 = blk(x3)

        out = x3.permute(0, 4, 1, 2, 3)
        if return_intermediates:
            inter = {
                "stage1": x1.permute(0, 4, 1, 2, 3),
                "merged": mid.permute(0, 4, 1, 2, 3),
                "stage2_up": up.permute(0, 4, 1, 2, 3),
            }
            return out, inter
        return out

    @torch.no_grad()
    def zero_upper_stages_(self):
        """Weight surgery used by tests: silence stages 2 and 3.

        Zeroing the channel-reduction convolution kills the merged branch;
        zeroing the attention and MLP output projections in stage 3 makes
        each of its residual blocks an identity map.
        """
        self.upsample.reduce.weight.zero_()
        self.upsample.reduce.bias.zero_()
        for blk in self.stage3:
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
            blk.mlp[-1].weight.zero_()
            blk.mlp[-1].bias.zero_()
