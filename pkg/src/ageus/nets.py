"""U-Net variants used by the pipeline.

Two networks share one encoder recipe:

* :class:`SharedUNet` -- a single encoder feeding two decoder pathways
  (``head`` and ``abdomen``), each ending in a 2-channel softmax head.
* :class:`FemurUNet` -- the same encoder with one decoder that regresses a
  single-channel distance map.

:class:`SingleUNet` is the independent one-encoder/one-decoder baseline used
for parameter accounting.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

BRANCHES = ("head", "abdomen")
CKPT_MAGIC = "AGEUS-CKPT-1"
DICE_EPS = 1e-6


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_width: int = 32
    depth: int = 4
    leaky_slope: float = 0.01
    seg_out_channels: int = 2
    femur_out_channels: int = 1

    def __post_init__(self):
        if self.depth != 4:
            raise ValueError("depth is fixed at 4 downsampling blocks")
        w = self.base_width
        if w < 8 or w & (w - 1):
            raise ValueError(f"base_width must be a power of two >= 8, got {w}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**k for k in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConvUnit(nn.Module):
    """Two 3x3 convolutions, each followed by InstanceNorm and LeakyReLU."""

    def __init__(self, cin: int, cout: int, slope: float):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=1, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(slope),
            nn.Conv2d(cout, cout, 3, stride=1, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(slope),
        )

    def forward(self, x):
        return self.body(x)


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, slope: float):
        super().__init__()
        self.pool = nn.MaxPool2d(2, stride=2)
        self.conv = ConvUnit(cin, cout, slope)

    def forward(self, x):
        return self.conv(self.pool(x))


class UpBlock(nn.Module):
    # The transposed conv keeps the channel count of the deeper level; the
    # concatenated tensor is then reduced to the skip width by the conv unit.
    def __init__(self, cin: int, cskip: int, slope: float):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin, 2, stride=2)
        self.conv = ConvUnit(cin + cskip, cskip, slope)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.widths
        self.stem = ConvUnit(cfg.in_channels, w[0], cfg.leaky_slope)
        self.down = nn.ModuleList(
            DownBlock(w[k], w[k + 1], cfg.leaky_slope) for k in range(cfg.depth)
        )

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for block in self.down:
            feats.append(block(feats[-1]))
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig, out_channels: int):
        super().__init__()
        w = cfg.widths
        self.up = nn.ModuleList(
            UpBlock(w[k + 1], w[k], cfg.leaky_slope) for k in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(w[0], out_channels, 1)

    def forward(self, feats: Sequence[torch.Tensor]):
        x = feats[-1]
        for block, skip in zip(self.up, reversed(feats[:-1])):
            x = block(x, skip)
        return self.head(x)


def _check_input(x: torch.Tensor, depth: int):
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {tuple(x.shape)}")
    f = 2**depth
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ValueError(f"input spatial dims {tuple(x.shape[-2:])} must be divisible by {f}")


class SharedUNet(nn.Module):
    """One encoder, two decoders; both decoders read the same skip tensors."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoders = nn.ModuleDict(
            {b: Decoder(cfg, cfg.seg_out_channels) for b in BRANCHES}
        )

    def encode(self, x):
        _check_input(x, self.cfg.depth)
        return self.encoder(x)

    def decode(self, feats, branch: str):
        if branch not in self.decoders:
            raise KeyError(f"unknown branch {branch!r}")
        return self.decoders[branch](feats)

    def forward(self, x, branch: str | None = None):
        feats = self.encode(x)
        if branch is not None:
            return self.decode(feats, branch)
        return tuple(self.decode(feats, b) for b in BRANCHES)


class SingleUNet(nn.Module):
    """Plain U-Net with its own encoder and one decoder."""

    def __init__(self, cfg: NetConfig, out_channels: int):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, out_channels)

    def forward(self, x):
        _check_input(x, self.cfg.depth)
        return self.decoder(self.encoder(x))


class FemurUNet(SingleUNet):
    """Distance-map regressor. Raw output is linear; :meth:`predict` clamps."""

    def __init__(self, cfg: NetConfig):
        super().__init__(cfg, cfg.femur_out_channels)

    @torch.no_grad()
    def predict(self, x):
        return self(x).clamp(0.0, 1.0)


def _seeded(seed):
    if seed is not None:
        torch.manual_seed(seed)


def build_shared_unet(cfg: NetConfig | None = None, seed: int | None = None) -> SharedUNet:
    _seeded(seed)
    return SharedUNet(cfg or NetConfig())


def build_single_unet(cfg: NetConfig | None = None, seed: int | None = None) -> SingleUNet:
    cfg = cfg or NetConfig()
    _seeded(seed)
    return SingleUNet(cfg, cfg.seg_out_channels)


def build_femur_unet(cfg: NetConfig | None = None, seed: int | None = None) -> FemurUNet:
    _seeded(seed)
    return FemurUNet(cfg or NetConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def layer_census(model: nn.Module) -> dict[str, int]:
    """Number of conv / transposed-conv / norm layers, stored in checkpoints for audit."""
    census = {"conv2d": 0, "conv_transpose2d": 0, "instance_norm": 0}
    for m in model.modules():
        if isinstance(m, nn.ConvTranspose2d):
            census["conv_transpose2d"] += 1
        elif isinstance(m, nn.Conv2d):
            census["conv2d"] += 1
        elif isinstance(m, nn.InstanceNorm2d):
            census["instance_norm"] += 1
    census["parameters"] = count_parameters(model)
    return census


# ---------------------------------------------------------------- losses


def soft_dice(probs: torch.Tensor, onehot: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Per-sample soft Dice averaged over channels. Shapes ``(N, C, H, W)`` -> ``(N,)``."""
    dims = (2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return ((2 * inter + eps) / (denom + eps)).mean(1)


def seg_loss_per_sample(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``0.5 * (1 - softDice) + 0.5 * CE`` for each sample of a single branch."""
    target = mask.long()
    if target.ndim == 4:
        target = target[:, 0]
    onehot = F.one_hot(target, logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)
    probs = logits.softmax(1)
    ce = F.cross_entropy(logits, target, reduction="none").mean((1, 2))
    return 0.5 * (1.0 - soft_dice(probs, onehot)) + 0.5 * ce


def seg_loss(outputs, masks: torch.Tensor, branches: str | Sequence[str]) -> torch.Tensor:
    """Branch-routed segmentation loss averaged over samples.

    Parameters
    ----------
    outputs
        Either a logits tensor ``(N, 2, H, W)`` already produced by the decoder
        named in ``branches``, or a mapping ``branch -> logits`` covering the
        whole batch (e.g. ``dict(zip(BRANCHES, model(x)))``).
    masks
        Binary targets ``(N, H, W)``.
    branches
        One tag for the whole batch or one per sample. Each sample only
        contributes loss through its own decoder.
    """
    n = masks.shape[0]
    if isinstance(branches, str):
        branches = [branches] * n
    for b in branches:
        if b not in BRANCHES:
            raise ValueError(f"unknown branch tag {b!r}")
    if isinstance(outputs, torch.Tensor):
        return seg_loss_per_sample(outputs, masks).mean()
    total = 0.0
    for b in BRANCHES:
        idx = [i for i, t in enumerate(branches) if t == b]
        if idx:
            sel = torch.tensor(idx)
            total = total + seg_loss_per_sample(outputs[b][sel], masks[sel]).sum()
    return total / n


def femur_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: nn.Module, *, kind: str, epoch: int, metric: float | None,
                    optimizer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CKPT_MAGIC,
        "kind": kind,
        "config": model.cfg.to_dict(),
        "census": layer_census(model),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "metric": metric,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: not an {CKPT_MAGIC} checkpoint")
    return payload


def model_from_checkpoint(ckpt) -> nn.Module:
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    cfg = NetConfig(**ckpt["config"])
    kind = ckpt["kind"]
    if kind == "shared":
        model = SharedUNet(cfg)
    elif kind == "femur":
        model = FemurUNet(cfg)
    elif kind == "single":
        model = SingleUNet(cfg, cfg.seg_out_channels)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(ckpt["state_dict"])
    return model
