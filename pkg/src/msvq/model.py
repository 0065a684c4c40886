"""Two-level spatiotemporal VQ-VAE built from 3-D residual convolutions.

Wiring (per clip, channels first)::

    x ──enc_b──► h_b ──enc_t──► e_top ──VQ──► q_top
                  │                              │
                  └──concat◄──dec_t◄─────────────┘
                        │
                     proj_b ──► e_bottom ──VQ──► q_bottom

    decoder: concat(up_t(q_top), q_bottom) ──► residual stack ──► upsample ──► x̂

With ``levels=1`` only ``enc_b``/``proj_b`` and the bottom codebook exist
and the decoder consumes ``q_bottom`` alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, ValidationError
from .quantizer import Codebook, commitment_loss, lookup, perplexity, quantize, straight_through


@dataclass
class ModelConfig:
    levels: int = 2
    base_channels: int = 88
    latent_dim: int = 128
    codebook_size_top: int = 1024
    codebook_size_bottom: int = 1024
    bottom_stride: tuple[int, int] = (2, 4)  # (temporal, spatial)
    top_extra_stride: tuple[int, int] = (2, 2)
    residual_blocks_per_stage: int = 2
    deep_groups: int = 4
    output_activation: str = "sigmoid"
    beta: float = 1.0
    gamma: float = 0.4
    ema_decay: float = 0.99
    laplace_eps: float = 1e-5

    def __post_init__(self):
        self.bottom_stride = tuple(int(s) for s in self.bottom_stride)
        self.top_extra_stride = tuple(int(s) for s in self.top_extra_stride)
        self.validate()

    def validate(self) -> None:
        if self.levels not in (1, 2):
            raise ValidationError(f"levels must be 1 or 2, got {self.levels}")
        for name in ("base_channels", "latent_dim", "codebook_size_top",
                     "codebook_size_bottom", "residual_blocks_per_stage", "deep_groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        for name in ("bottom_stride", "top_extra_stride"):
            stride = getattr(self, name)
            if len(stride) != 2 or any(s < 1 or s & (s - 1) for s in stride):
                raise ValidationError(f"{name} entries must be powers of two, got {stride}")
        if (2 * self.base_channels) % self.deep_groups:
            raise ValidationError("2*base_channels must be divisible by deep_groups")
        if self.output_activation not in ("sigmoid", "clamp"):
            raise ValidationError(f"unknown output_activation {self.output_activation!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ValidationError("loss weights must be non-negative")

    @property
    def bottom_factors(self) -> tuple[int, int, int]:
        t, s = self.bottom_stride
        return t, s, s

    @property
    def top_factors(self) -> tuple[int, int, int]:
        t, s = self.bottom_stride
        tt, ts = self.top_extra_stride
        return t * tt, s * ts, s * ts

    def grid_shapes(self, dims: tuple[int, int, int]):
        """Latent grid (T', H', W') for each level, top first (None if absent)."""
        check_dims(dims, self)
        bottom = tuple(d // f for d, f in zip(dims, self.bottom_factors))
        top = tuple(d // f for d, f in zip(dims, self.top_factors)) if self.levels == 2 else None
        return top, bottom

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bottom_stride"] = list(self.bottom_stride)
        d["top_extra_stride"] = list(self.top_extra_stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The small configuration used for gradient checks and overfit tests."""
    base = dict(base_channels=4, latent_dim=8, codebook_size_top=16,
                codebook_size_bottom=16, residual_blocks_per_stage=1)
    base.update(overrides)
    return ModelConfig(**base)


def check_dims(dims, config: ModelConfig) -> None:
    factors = config.top_factors if config.levels == 2 else config.bottom_factors
    if len(dims) != 3 or any(d < 1 or d % f for d, f in zip(dims, factors)):
        raise DimensionError(
            f"clip dims (T, H, W)={tuple(dims)} must be divisible by the cumulative strides {factors}")


def _stride_schedule(temporal: int, spatial: int) -> list[tuple[int, int, int]]:
    """Split a (temporal, spatial) factor into per-layer strides of 1 or 2.

    Spatial halving happens first; temporal halving in the later layers.
    """
    nt, ns = int(math.log2(temporal)), int(math.log2(spatial))
    steps = max(nt, ns)
    out = []
    for i in range(steps):
        st = 2 if i >= steps - nt else 1
        ss = 2 if i < ns else 1
        out.append((st, ss, ss))
    return out


def _down(cin: int, cout: int, stride) -> nn.Conv3d:
    kernel = tuple(4 if s == 2 else 3 for s in stride)
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=1)


def _up(cin: int, cout: int, stride) -> nn.ConvTranspose3d:
    kernel = tuple(4 if s == 2 else 3 for s in stride)
    return nn.ConvTranspose3d(cin, cout, kernel, stride=stride, padding=1)


class ResBlock3d(nn.Module):
    """Pre-activation residual block: x + conv(relu(conv(relu(x))))."""

    def __init__(self, channels: int, groups: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1, groups=groups)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1, groups=groups)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _res_stack(channels: int, n: int, groups: int = 1) -> list[nn.Module]:
    return [ResBlock3d(channels, groups) for _ in range(n)]


class ForwardOutput(NamedTuple):
    reconstruction: Tensor
    commit_loss_top: Tensor
    commit_loss_bottom: Tensor
    indices_top: Optional[Tensor]
    indices_bottom: Tensor
    perplexity_top: float
    perplexity_bottom: float
    e_top: Optional[Tensor]
    e_bottom: Tensor
    q_top: Optional[Tensor]
    q_bottom: Tensor


def _to_vectors(grid: Tensor) -> Tensor:
    # (B, D, t, h, w) -> (B*t*h*w, D)
    d = grid.shape[1]
    return grid.permute(0, 2, 3, 4, 1).reshape(-1, d)


def _to_grid(vectors: Tensor, like_shape) -> Tensor:
    b, d, t, h, w = like_shape
    return vectors.reshape(b, t, h, w, d).permute(0, 4, 1, 2, 3)


class MSVQVAE(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        c2 = 2 * c
        d = config.latent_dim
        nres = config.residual_blocks_per_stage

        # bottom trunk: 3 -> c -> ... -> 2c at (T/ft, H/fs, W/fs)
        strides = _stride_schedule(*config.bottom_stride)
        layers: list[nn.Module] = []
        cin = 3
        for i, s in enumerate(strides):
            cout = c2 if i == len(strides) - 1 else c
            layers += [_down(cin, cout, s), nn.ReLU()]
            cin = cout
        layers += [nn.Conv3d(c2, c2, 3, padding=1), *_res_stack(c2, nres), nn.ReLU()]
        self.enc_b = nn.Sequential(*layers)

        top_strides = _stride_schedule(*config.top_extra_stride)
        if config.levels == 2:
            g = config.deep_groups
            layers = []
            for s in top_strides:
                layers += [_down(c2, c2, s), nn.ReLU()]
            layers += [nn.Conv3d(c2, c2, 3, padding=1), *_res_stack(c2, nres, g), nn.ReLU(),
                       nn.Conv3d(c2, d, 1)]
            self.enc_t = nn.Sequential(*layers)

            layers = [nn.Conv3d(d, c2, 3, padding=1), *_res_stack(c2, nres, g), nn.ReLU()]
            for i, s in enumerate(top_strides):
                cout = d if i == len(top_strides) - 1 else c2
                layers += [_up(c2, cout, s)]
                if i < len(top_strides) - 1:
                    layers += [nn.ReLU()]
            self.dec_t = nn.Sequential(*layers)
            self.proj_b = nn.Conv3d(c2 + d, d, 1)

            layers = []
            for i, s in enumerate(top_strides):
                layers += [_up(d, d, s)]
                if i < len(top_strides) - 1:
                    layers += [nn.ReLU()]
            self.up_t = nn.Sequential(*layers)
            dec_in = 2 * d
            self.codebook_top = Codebook(config.codebook_size_top, d, config.ema_decay,
                                         config.laplace_eps, seed=seed + 1)
        else:
            self.enc_t = self.dec_t = self.up_t = None
            self.proj_b = nn.Conv3d(c2, d, 1)
            dec_in = d
            self.codebook_top = None
        self.codebook_bottom = Codebook(config.codebook_size_bottom, d, config.ema_decay,
                                        config.laplace_eps, seed=seed + 2)

        layers = [nn.Conv3d(dec_in, c2, 3, padding=1), *_res_stack(c2, nres), nn.ReLU()]
        rev = list(reversed(strides))
        for i, s in enumerate(rev):
            last = i == len(rev) - 1
            cout = 3 if last else c
            layers += [_up(c2 if i == 0 else c, cout, s)]
            if not last:
                layers += [nn.ReLU()]
        self.dec = nn.Sequential(*layers)

        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        """Fan-in scaled uniform weights, zero biases."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                w = module.weight
                if isinstance(module, nn.Conv3d):
                    fan_in = w.shape[1] * w[0, 0].numel()
                else:
                    # fan-in of a transposed conv counts contributions per output
                    stride = math.prod(module.stride)
                    fan_in = w.shape[0] * w[0, 0].numel() / stride
                bound = math.sqrt(3.0 / fan_in)
                with torch.no_grad():
                    w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                    module.bias.zero_()

    # ------------------------------------------------------------------
    def _check_input(self, x: Tensor) -> Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if x.dim() != 5 or x.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, T, H, W) or (3, T, H, W), got {tuple(x.shape)}")
        check_dims(tuple(x.shape[2:]), self.config)
        return x

    def _quantize_grid(self, grid: Tensor, codebook: Codebook, residual: Optional[Tensor]):
        vec = _to_vectors(grid)
        if residual is None:
            idx, q = quantize(vec, codebook)
            q_st = straight_through(vec, q)
        else:
            # linearization point supplied: q = v + fixed residual, assignments frozen
            idx = None
            q_st = vec + _to_vectors(residual).detach()
            q = q_st.detach()
        loss = commitment_loss(vec, q)
        q_grid = _to_grid(q_st, grid.shape)
        if idx is not None:
            b, _, t, h, w = grid.shape
            idx = idx.reshape(b, t, h, w)
        return idx, q_grid, loss

    def _encode(self, x: Tensor, residuals=None):
        residuals = residuals or {}
        h_b = self.enc_b(x)
        if self.config.levels == 1:
            return None, None, None, None, h_b, self.proj_b(h_b)
        e_top = self.enc_t(h_b)
        idx_t, q_top, commit_t = self._quantize_grid(e_top, self.codebook_top, residuals.get("top"))
        e_bottom = self.proj_b(torch.cat([h_b, self.dec_t(q_top)], dim=1))
        return e_top, idx_t, q_top, commit_t, h_b, e_bottom

    def encode(self, x: Tensor) -> tuple[Optional[Tensor], Tensor]:
        """Pre-quantization latents ``(e_top, e_bottom)``; ``e_top`` is None
        for single-level models."""
        x = self._check_input(x)
        e_top, _, _, _, _, e_bottom = self._encode(x)
        return e_top, e_bottom

    def decode(self, q_top: Optional[Tensor], q_bottom: Tensor) -> Tensor:
        if q_bottom.dim() == 4:
            q_bottom = q_bottom.unsqueeze(0)
            q_top = q_top.unsqueeze(0) if q_top is not None else None
        d = self.config.latent_dim
        if q_bottom.shape[1] != d:
            raise DimensionError(f"bottom code must have {d} channels, got {q_bottom.shape[1]}")
        if self.config.levels == 2:
            if q_top is None or q_top.dim() != 5 or q_top.shape[1] != d:
                raise DimensionError("two-level model needs a (B, D, t, h, w) top code")
            tt, ts = self.config.top_extra_stride
            expect = (q_bottom.shape[2] // tt, q_bottom.shape[3] // ts, q_bottom.shape[4] // ts)
            got = tuple(q_top.shape[2:])
            if (got != expect or q_top.shape[0] != q_bottom.shape[0]
                    or any(b % s for b, s in zip(q_bottom.shape[2:], (tt, ts, ts)))):
                raise DimensionError(
                    f"inconsistent grids: top {got} vs bottom {tuple(q_bottom.shape[2:])}")
            z = torch.cat([self.up_t(q_top), q_bottom], dim=1)
        else:
            z = q_bottom
        out = self.dec(z)
        if self.config.output_activation == "sigmoid":
            return torch.sigmoid(out)
        return out.clamp(0.0, 1.0)

    def forward(self, x: Tensor, residuals: Optional[dict] = None) -> ForwardOutput:
        """Training forward pass: encode, quantize with straight-through
        gradients, decode.  Codebooks are not modified here; the trainer calls
        :func:`msvq.quantizer.ema_update` with the returned latents/indices.

        ``residuals`` (``{"top": q - e, "bottom": q - e}``, detached) replaces the
        nearest-neighbour step by ``e + residual``; used to linearize the model
        around fixed assignments for finite-difference checks.
        """
        x = self._check_input(x)
        residuals = residuals or {}
        e_top, idx_t, q_top, commit_t, _, e_bottom = self._encode(x, residuals)
        idx_b, q_bottom, commit_b = self._quantize_grid(
            e_bottom, self.codebook_bottom, residuals.get("bottom"))
        recon = self.decode(q_top, q_bottom)
        zero = recon.new_zeros(())
        return ForwardOutput(
            reconstruction=recon,
            commit_loss_top=commit_t if commit_t is not None else zero,
            commit_loss_bottom=commit_b,
            indices_top=idx_t,
            indices_bottom=idx_b,
            perplexity_top=(perplexity(idx_t, self.config.codebook_size_top)
                            if idx_t is not None else 1.0),
            perplexity_bottom=(perplexity(idx_b, self.config.codebook_size_bottom)
                               if idx_b is not None else 1.0),
            e_top=e_top,
            e_bottom=e_bottom,
            q_top=q_top,
            q_bottom=q_bottom,
        )

    # ------------------------------------------------------------------
    @torch.no_grad()
    def encode_indices(self, x: Tensor) -> tuple[Optional[Tensor], Tensor]:
        """Discrete codes ``(indices_top, indices_bottom)``, each (B, t, h, w)."""
        out = self.forward(x)
        return out.indices_top, out.indices_bottom

    @torch.no_grad()
    def decode_indices(self, indices_top: Optional[Tensor], indices_bottom: Tensor) -> Tensor:
        if indices_bottom.dim() == 3:
            indices_bottom = indices_bottom.unsqueeze(0)
            indices_top = indices_top.unsqueeze(0) if indices_top is not None else None
        q_bottom = lookup(indices_bottom, self.codebook_bottom).permute(0, 4, 1, 2, 3)
        q_top = None
        if self.config.levels == 2:
            if indices_top is None:
                raise DimensionError("two-level model needs top indices")
            q_top = lookup(indices_top, self.codebook_top).permute(0, 4, 1, 2, 3)
        return self.decode(q_top, q_bottom)

    def codebooks(self) -> dict[str, Codebook]:
        out = {"bottom": self.codebook_bottom}
        if self.codebook_top is not None:
            out["top"] = self.codebook_top
        return out


class ParamCount(NamedTuple):
    trainable: int
    codebook: int


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_count(config: ModelConfig) -> ParamCount:
    """Learnable conv scalars, and EMA-maintained codebook scalars separately."""
    config.validate()
    model = MSVQVAE(config)
    codebook = sum(cb.embeddings.numel() for cb in model.codebooks().values())
    return ParamCount(count_parameters(model), codebook)
