"""UNeXt-style encoder-decoder: three conv stages, two shifted-MLP token
stages, additive skips, four 2x downsamplings in total (factor 16)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import DimensionError, NormStats

CHECKPOINT_VERSION = 1
TINY_WIDTHS = (8, 16, 32, 64, 128)
FULL_WIDTHS = (16, 32, 128, 160, 256)


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 3
    stage_widths: tuple[int, ...] = TINY_WIDTHS
    downsample_stages: int = 4
    token_mlp_stages: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) != 5 or min(self.stage_widths) < 1:
            raise ValueError("stage_widths must be 5 positive integers")
        if 2 ** self.downsample_stages != 16:
            raise ValueError("downsample_stages must be 4 (total factor 16)")
        if self.token_mlp_stages != 2:
            raise ValueError("this architecture has exactly 2 token-MLP stages")

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        return cls(stage_widths=TINY_WIDTHS)

    @classmethod
    def full(cls) -> "NetworkConfig":
        return cls(stage_widths=FULL_WIDTHS)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


def conv_bn_relu(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _shift(x: torch.Tensor, dim: int, groups: int = 5) -> torch.Tensor:
    """Zero-filled shift of channel groups by -2..2 pixels along ``dim``."""
    chunks = torch.chunk(x, groups, dim=1)
    half = groups // 2
    out = []
    for chunk, s in zip(chunks, range(-half, half + 1)):
        if s == 0:
            out.append(chunk)
            continue
        size = chunk.shape[dim]
        k = min(abs(s), size)
        kept = chunk.narrow(dim, 0, size - k) if s > 0 else chunk.narrow(dim, k, size - k)
        zshape = list(chunk.shape)
        zshape[dim] = k
        z = chunk.new_zeros(zshape)
        out.append(torch.cat([z, kept] if s > 0 else [kept, z], dim=dim))
    return torch.cat(out, dim=1)


class ShiftedMLP(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        y = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        y = self.fc1(_shift(y, dim=3))
        y = F.gelu(self.dw(y))
        y = self.fc2(_shift(y, dim=2))
        return x + y


class TokenStage(nn.Module):
    """Overlapping stride-2 patch embedding followed by a shifted MLP."""

    def __init__(self, cin, cout):
        super().__init__()
        self.embed = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(cout)
        self.mlp = ShiftedMLP(cout, cout)

    def forward(self, x):
        return self.mlp(self.norm(self.embed(x)))


class UNeXtLite(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        c1, c2, c3, c4, c5 = config.stage_widths
        self.config = config
        self.enc1 = conv_bn_relu(config.in_channels, c1)
        self.enc2 = conv_bn_relu(c1, c2)
        self.enc3 = conv_bn_relu(c2, c3)
        self.tok1 = TokenStage(c3, c4)
        self.tok2 = TokenStage(c4, c5)
        self.dec4 = conv_bn_relu(c5, c4)
        self.dec3 = conv_bn_relu(c4, c3)
        self.dec2 = conv_bn_relu(c3, c2)
        self.dec1 = conv_bn_relu(c2, c1)
        self.head = nn.Conv2d(c1, config.num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)                      # 1
        e2 = self.enc2(F.max_pool2d(e1, 2))    # 1/2
        e3 = self.enc3(F.max_pool2d(e2, 2))    # 1/4
        t1 = self.tok1(e3)                     # 1/8
        t2 = F.relu(self.tok2(t1))             # 1/16
        d = _up(self.dec4(t2)) + t1
        d = _up(self.dec3(d)) + e3
        d = _up(self.dec2(d)) + e2
        d = _up(self.dec1(d)) + e1
        return self.head(d)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


@dataclass
class ModelParams:
    """Network weights plus everything needed to run them on raw frames."""

    net: UNeXtLite
    config: NetworkConfig
    norm: NormStats
    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    def eval(self) -> "ModelParams":
        self.net.eval()
        return self


def build(config: NetworkConfig | None = None, norm: NormStats | None = None, seed: int | None = None) -> ModelParams:
    config = config or NetworkConfig.tiny()
    if seed is not None:
        torch.manual_seed(seed)
    return ModelParams(UNeXtLite(config), config, norm or NormStats(0.0, 1.0))


def count_params(config: NetworkConfig) -> int:
    return sum(p.numel() for p in UNeXtLite(config).parameters())


def _check_input(batch: torch.Tensor, config: NetworkConfig) -> None:
    if batch.ndim != 4 or batch.shape[1] != config.in_channels:
        raise DimensionError(f"expected B x {config.in_channels} x H x W, got {tuple(batch.shape)}")
    H, W = batch.shape[-2:]
    if H % 16 or W % 16 or H == 0 or W == 0:
        raise DimensionError(f"spatial dims must be positive multiples of 16 (pad16 first), got {H}x{W}")


def forward(params: ModelParams, batch) -> torch.Tensor:
    """Logits B x C x H x W in full precision."""
    x = torch.as_tensor(batch, dtype=torch.float32)
    _check_input(x, params.config)
    if x.shape[0] == 0:
        return x.new_zeros((0, params.config.num_classes) + tuple(x.shape[-2:]))
    return params.net(x)


def autocast_dtype() -> torch.dtype:
    return torch.bfloat16


def forward_mixed_precision(params: ModelParams, batch, device_type: str | None = None) -> torch.Tensor:
    """Logits computed under autocast (float16 on CUDA, bfloat16 on CPU), returned as float32."""
    x = torch.as_tensor(batch, dtype=torch.float32)
    _check_input(x, params.config)
    if x.shape[0] == 0:
        return x.new_zeros((0, params.config.num_classes) + tuple(x.shape[-2:]))
    device_type = device_type or x.device.type
    dtype = torch.float16 if device_type == "cuda" else autocast_dtype()
    with torch.autocast(device_type=device_type, dtype=dtype):
        out = params.net(x)
    return out.float()


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    torch.save(
        {
            "format_version": params.version,
            "network_config": params.config.to_dict(),
            "norm_stats": params.norm.to_dict(),
            "state_dict": params.net.state_dict(),
            "meta": params.meta,
        },
        path,
    )


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> ModelParams:
    try:
        blob = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise CheckpointError(f"{path}: not a dalkseg checkpoint")
    if blob["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {blob['format_version']} is incompatible with {CHECKPOINT_VERSION}"
        )
    config = NetworkConfig.from_dict(blob["network_config"])
    norm = NormStats(**blob["norm_stats"])
    net = UNeXtLite(config)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return ModelParams(net, config, norm, blob["format_version"], dict(blob.get("meta", {})))
