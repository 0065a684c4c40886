"""Reconstruction, perceptual and total objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, NonFiniteError, ValidationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossWeights:
    beta: float = 1.0
    gamma: float = 0.4
    layer_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or any(w < 0 for w in self.layer_weights):
            raise ValidationError("loss weights must be non-negative")


def recon_loss(x: Tensor, xhat: Tensor) -> Tensor:
    if x.shape != xhat.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(xhat.shape)}")
    return torch.mean((x - xhat) ** 2)


class FeatureExtractor(nn.Module):
    """Frame feature extractor: ``(N, 3, H, W)`` in [0, 1] -> one map per tap.

    Subclasses fill ``self.stages`` (an ordered ``nn.ModuleDict``) and
    ``self.taps`` (names of stages whose outputs are returned, in order).
    ``calls`` counts invocations so ablations can assert it stays at zero.
    """

    def __init__(self):
        super().__init__()
        self.calls = 0
        self.normalize = False

    @property
    def tap_names(self) -> list[str]:
        return list(self.taps)

    def forward(self, frames: Tensor) -> list[Tensor]:
        self.calls += 1
        h = frames
        if self.normalize:
            mean = h.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
            std = h.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
            h = (h - mean) / std
        feats = []
        wanted = set(self.taps)
        for name, stage in self.stages.items():
            h = stage(h)
            if name in wanted:
                feats.append(h)
            if len(feats) == len(self.taps):
                break
        return feats


class ProxyExtractor(FeatureExtractor):
    """Deterministic stand-in for a pre-trained network: three conv+ReLU
    stages with 2x average pooling between them, weights drawn from a fixed
    seed, a tap after each stage.  Parameters are frozen."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = {}
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            bound = math.sqrt(6.0 / (cin * 9))
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2)] if i else []
            stages[f"stage{i + 1}"] = nn.Sequential(*layers, conv, nn.ReLU())
            cin = cout
        self.stages = nn.ModuleDict(stages)
        self.taps = list(stages)
        self.requires_grad_(False)


# conv layer indices of torchvision's vgg16().features up to relu3_3
_VGG16_CONVS = [(0, 3, 64), (2, 64, 64), (5, 64, 128), (7, 128, 128),
                (10, 128, 256), (12, 256, 256), (14, 256, 256)]
_VGG16_NAMES = ["relu1_1", "relu1_2", "relu2_1", "relu2_2", "relu3_1", "relu3_2", "relu3_3"]
VGG_DEFAULT_TAPS = ("relu1_2", "relu2_2", "relu3_3")


class VGG16Extractor(FeatureExtractor):
    """VGG-16 trunk up to ``relu3_3`` with weights loaded from a named-tensor
    checkpoint using torchvision's ``features.<i>.weight`` naming.

    Frames are normalized with ImageNet statistics unless ``normalize=False``.
    """

    def __init__(self, tensors: dict, taps: Sequence[str] = VGG_DEFAULT_TAPS,
                 normalize: bool = True):
        super().__init__()
        unknown = set(taps) - set(_VGG16_NAMES)
        if unknown:
            raise ValidationError(f"unknown VGG tap names {sorted(unknown)}")
        stages = {}
        for pos, ((idx, cin, cout), name) in enumerate(zip(_VGG16_CONVS, _VGG16_NAMES)):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            w = tensors.get(f"features.{idx}.weight")
            b = tensors.get(f"features.{idx}.bias")
            if w is None or b is None:
                raise ValidationError(f"missing VGG weights for features.{idx}")
            if tuple(w.shape) != tuple(conv.weight.shape) or tuple(b.shape) != (cout,):
                raise ValidationError(f"bad shape for features.{idx}")
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(w))
                conv.bias.copy_(torch.as_tensor(b))
            # pooling precedes relu2_1 and relu3_1
            layers = [nn.MaxPool2d(2)] if pos in (2, 4) else []
            stages[name] = nn.Sequential(*layers, conv, nn.ReLU())
        self.stages = nn.ModuleDict(stages)
        self.taps = [n for n in _VGG16_NAMES if n in set(taps)]
        self.normalize = normalize
        self.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, path, taps: Sequence[str] = VGG_DEFAULT_TAPS,
                        normalize: bool = True) -> "VGG16Extractor":
        from .checkpoint import read_ntc

        return cls(read_ntc(path), taps=taps, normalize=normalize)


def _frames(clip: Tensor) -> Tensor:
    # (B, 3, T, H, W) or (3, T, H, W) -> (B*T, 3, H, W)
    if clip.dim() == 4:
        clip = clip.unsqueeze(0)
    b, c, t, h, w = clip.shape
    return clip.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)


def perceptual_loss(x: Tensor, xhat: Tensor, extractor: FeatureExtractor,
                    weights: LossWeights | Sequence[float]) -> Tensor:
    """sum_l w_l * mean |phi_l(x) - phi_l(xhat)|, averaged over all frames."""
    if x.shape != xhat.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(xhat.shape)}")
    lam = weights.layer_weights if isinstance(weights, LossWeights) else list(weights)
    if len(lam) != len(extractor.tap_names):
        raise ValidationError(
            f"{len(extractor.tap_names)} extractor taps but {len(lam)} layer weights")
    with torch.no_grad():
        target = extractor(_frames(x))
    feats = extractor(_frames(xhat))
    total = xhat.new_zeros(())
    for w, a, b in zip(lam, target, feats):
        total = total + w * torch.mean(torch.abs(a - b))
    return total


def total_loss(recon, commit_top, commit_bottom, perc, weights: LossWeights):
    """recon + beta * (commit_top + commit_bottom) + gamma * perc."""
    for name, v in (("recon", recon), ("commit_top", commit_top),
                    ("commit_bottom", commit_bottom), ("perc", perc)):
        f = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(f):
            raise NonFiniteError(f"non-finite loss component {name}={f}")
        if f < 0:
            raise ValidationError(f"negative loss component {name}={f}")
    return recon + weights.beta * (commit_top + commit_bottom) + weights.gamma * perc
