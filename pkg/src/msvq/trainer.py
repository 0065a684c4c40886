"""Optimization loop, checkpoint persistence and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import bitstream, checkpoint
from .errors import CheckpointError, NonFiniteError, ValidationError
from .losses import FeatureExtractor, LossWeights, ProxyExtractor, VGG16Extractor, \
    perceptual_loss, recon_loss, total_loss
from .metrics import DEFAULT_METRICS, MetricConfig, bpp_deflate, bpp_theoretical, clip_metrics
from .model import ModelConfig, MSVQVAE
from .quantizer import ema_update

log = logging.getLogger(__name__)

LOG_NAME = "log.jsonl"
FINAL_NAME = "final.ntc"
LAST_NAME = "last.ntc"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_max: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    seed: int = 0
    layer_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    perceptual: str = "proxy"
    perceptual_normalize: Optional[bool] = None
    synthetic_dims: list = field(default_factory=lambda: [32, 64, 64])

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValidationError("epochs, batch_size and checkpoint_every must be positive")
        if not self.lr_max > 0:
            raise ValidationError("lr_max must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValidationError("invalid Adam hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a JSON config file ``{"model": {...}, "train": {...}}``."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or set(raw) - {"model", "train"}:
        raise ValidationError(f"{path}: top level must be an object with 'model' and 'train' keys")
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, 0.5 * lr_max * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              hyper: AdamHyper, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValidationError("params, grads and moments must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(hyper.eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _param_items(model: MSVQVAE):
    return [(n, p) for n, p in model.named_parameters()]


def save_checkpoint(path, model: MSVQVAE, state: Optional[AdamState] = None,
                    train_config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if state is not None:
        for (name, _), m, v in zip(_param_items(model), state.m, state.v):
            tensors[f"adam.m.{name}"] = m.detach().cpu().numpy()
            tensors[f"adam.v.{name}"] = v.detach().cpu().numpy()
    meta = {
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "adam_step": state.step if state is not None else None,
    }
    meta.update(extra or {})
    tensors["meta.json"] = checkpoint.pack_text(json.dumps(meta, sort_keys=True))
    checkpoint.write_ntc(path, tensors)


@dataclass
class Restored:
    model: MSVQVAE
    state: Optional[AdamState]
    train_config: Optional[TrainConfig]
    meta: dict


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None) -> Restored:
    tensors = checkpoint.read_ntc(path)
    if "meta.json" not in tensors:
        raise CheckpointError(f"{path}: missing meta.json entry")
    try:
        meta = json.loads(checkpoint.unpack_text(tensors["meta.json"]))
        config = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise CheckpointError(f"{path}: checkpoint model config does not match the requested one")
    model = MSVQVAE(config)
    sd = model.state_dict()
    loaded = {}
    for key, ref in sd.items():
        arr = tensors.get(f"model.{key}")
        if arr is None:
            raise CheckpointError(f"{path}: missing tensor model.{key}")
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: size mismatch for model.{key}: "
                                  f"{tuple(arr.shape)} vs {tuple(ref.shape)}")
        loaded[key] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(loaded)

    state = None
    if meta.get("adam_step") is not None:
        ms, vs = [], []
        for name, p in _param_items(model):
            m = tensors.get(f"adam.m.{name}")
            v = tensors.get(f"adam.v.{name}")
            if m is None or v is None or m.shape != tuple(p.shape) or v.shape != tuple(p.shape):
                raise CheckpointError(f"{path}: missing or mis-sized optimizer moments for {name}")
            ms.append(torch.from_numpy(m.copy()))
            vs.append(torch.from_numpy(v.copy()))
        state = AdamState(int(meta["adam_step"]), ms, vs)
    tc = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    return Restored(model, state, tc, meta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def build_extractor(tc: TrainConfig) -> FeatureExtractor:
    if tc.perceptual == "proxy":
        ext = ProxyExtractor()
        ext.normalize = bool(tc.perceptual_normalize)
        return ext
    normalize = True if tc.perceptual_normalize is None else tc.perceptual_normalize
    return VGG16Extractor.from_checkpoint(tc.perceptual, normalize=normalize)


def schedule(n_clips: int, tc: TrainConfig) -> tuple[int, int]:
    """(batch size, steps per epoch) with drop-last batching."""
    if n_clips < 1:
        raise ValidationError("no training clips")
    batch = min(tc.batch_size, n_clips)
    return batch, n_clips // batch


def batch_indices(step: int, n_clips: int, tc: TrainConfig) -> np.ndarray:
    batch, per_epoch = schedule(n_clips, tc)
    epoch, j = divmod(step, per_epoch)
    order = np.random.default_rng([tc.seed, epoch]).permutation(n_clips)
    return order[j * batch:(j + 1) * batch]


@dataclass
class TrainResult:
    model: MSVQVAE
    state: AdamState
    records: list
    checkpoints: list
    step: int
    total_steps: int


def _record_value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def train_loop(train_config: TrainConfig, model_config: ModelConfig, clips: np.ndarray,
               out_dir=None, extractor: Optional[FeatureExtractor] = None,
               resume=None, max_steps: Optional[int] = None) -> TrainResult:
    """Train on ``clips`` (N, 3, T, H, W).

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs, at the
    end (``final.ntc``) and whenever the loop stops (``last.ntc``).  ``resume``
    is a checkpoint path; ``max_steps`` stops early at that global step.
    """
    torch.set_num_threads(1)
    tc = train_config
    clips = np.asarray(clips, dtype=np.float32)
    if clips.ndim != 5:
        raise ValidationError(f"clips must be (N, 3, T, H, W), got {clips.shape}")
    n = clips.shape[0]
    _, per_epoch = schedule(n, tc)
    total = tc.epochs * per_epoch

    if resume is not None:
        restored = load_checkpoint(resume, expect_config=model_config)
        model, state = restored.model, restored.state
        if state is None:
            raise CheckpointError(f"{resume}: no optimizer state to resume from")
        step = state.step
    else:
        model = MSVQVAE(model_config, seed=tc.seed)
        state = AdamState.zeros_like([p for _, p in _param_items(model)])
        step = 0
    model.train()
    weights = LossWeights(model_config.beta, model_config.gamma, list(tc.layer_weights))
    if weights.gamma > 0 and extractor is None:
        extractor = build_extractor(tc)
    hyper = AdamHyper(tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    params = [p for _, p in _param_items(model)]
    stop = total if max_steps is None else min(total, max_steps)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / LOG_NAME, "a" if resume is not None else "w")
    records, written = [], []
    try:
        while step < stop:
            idx = batch_indices(step, n, tc)
            x = torch.from_numpy(clips[idx])
            lr = cosine_lr(step, total, tc.lr_max)
            fo = model(x)
            rec = recon_loss(x, fo.reconstruction)
            if weights.gamma > 0:
                perc = perceptual_loss(x, fo.reconstruction, extractor, weights)
            else:
                perc = rec.new_zeros(())
            try:
                loss = total_loss(rec, fo.commit_loss_top, fo.commit_loss_bottom, perc, weights)
            except NonFiniteError as exc:
                log.error("non-finite loss at step %d: %s", step, exc)
                raise NonFiniteError(f"step {step}: {exc}") from None
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            try:
                adam_step(params, grads, state, hyper, lr)
            except NonFiniteError:
                log.error("non-finite gradient at step %d", step)
                raise NonFiniteError(f"step {step}: non-finite gradient") from None
            if fo.indices_top is not None:
                ema_update(model.codebook_top, fo.e_top.permute(0, 2, 3, 4, 1), fo.indices_top)
            ema_update(model.codebook_bottom, fo.e_bottom.permute(0, 2, 3, 4, 1), fo.indices_bottom)

            record = {
                "step": step,
                "epoch": step // per_epoch,
                "lr": lr,
                "loss": _record_value(loss),
                "recon": _record_value(rec),
                "commit_top": _record_value(fo.commit_loss_top),
                "commit_bottom": _record_value(fo.commit_loss_bottom),
                "perc": _record_value(perc),
                "perplexity_top": fo.perplexity_top,
                "perplexity_bottom": fo.perplexity_bottom,
            }
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            step += 1
            if out is not None and step % per_epoch == 0:
                epoch = step // per_epoch
                if epoch % tc.checkpoint_every == 0 or step == total:
                    name = FINAL_NAME if step == total else f"ckpt_e{epoch:04d}.ntc"
                    save_checkpoint(out / name, model, state, tc, {"step": step})
                    written.append(out / name)
        if out is not None:
            save_checkpoint(out / LAST_NAME, model, state, tc, {"step": step})
            written.append(out / LAST_NAME)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, state, records, written, step, total)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def encode_clip(model: MSVQVAE, clip: np.ndarray) -> bytes:
    """Encode one ``(3, T, H, W)`` clip to container bytes."""
    x = torch.from_numpy(np.asarray(clip, dtype=np.float32))
    model.eval()
    idx_t, idx_b = model.encode_indices(x)
    cfg = model.config
    return bitstream.serialize(
        idx_t[0].numpy() if idx_t is not None else None, idx_b[0].numpy(),
        tuple(x.shape[1:]), (cfg.codebook_size_top, cfg.codebook_size_bottom))


def decode_container(model: MSVQVAE, data: bytes) -> np.ndarray:
    """Container bytes -> reconstruction ``(3, T, H, W)`` float32."""
    header, cont = bitstream.deserialize(data)
    cfg = model.config
    if cfg.levels == 2 and cont.indices_top is None or cfg.levels == 1 and cont.indices_top is not None:
        raise ValidationError(f"container has {len(header.levels)} level(s), model has {cfg.levels}")
    if cont.alphabet_bottom != cfg.codebook_size_bottom or (
            cfg.levels == 2 and cont.alphabet_top != cfg.codebook_size_top):
        raise ValidationError("container alphabet sizes do not match the checkpoint codebooks")
    top_shape, bottom_shape = cfg.grid_shapes(header.dims)
    if tuple(cont.indices_bottom.shape) != bottom_shape or (
            top_shape is not None and tuple(cont.indices_top.shape) != top_shape):
        raise ValidationError("container grid dims do not match the model strides")
    model.eval()
    it = torch.from_numpy(cont.indices_top) if cont.indices_top is not None else None
    out = model.decode_indices(it, torch.from_numpy(cont.indices_bottom))
    return out[0].numpy()


def evaluate(model: MSVQVAE, clips: Iterable[tuple[str, np.ndarray]],
             metric_config: MetricConfig = DEFAULT_METRICS) -> tuple[list, dict]:
    """Per-clip records (id, psnr, ssim, theoretical_bpp, deflate_bpp) and means.

    Each clip goes through the actual container round trip.
    """
    cfg = model.config
    records = []
    for cid, clip in clips:
        data = encode_clip(model, clip)
        recon = decode_container(model, data)
        p, s = clip_metrics(clip, recon, metric_config)
        t, h, w = clip.shape[1:]
        top, bottom = cfg.grid_shapes((t, h, w))
        n_top = math.prod(top) if top else 0
        records.append({
            "id": cid,
            "psnr": p,
            "ssim": s,
            "theoretical_bpp": bpp_theoretical(n_top, cfg.codebook_size_top, math.prod(bottom),
                                               cfg.codebook_size_bottom, t, h, w),
            "deflate_bpp": bpp_deflate(data, t, h, w),
        })
    if not records:
        raise ValidationError("evaluation split is empty")
    keys = ("psnr", "ssim", "theoretical_bpp", "deflate_bpp")
    agg = {k: float(np.mean([r[k] for r in records])) for k in keys}
    agg["clips"] = len(records)
    return records, agg


def format_report(agg: dict) -> str:
    lines = [
        f"{'Metric':<22}{'Mean':>12}  Unit",
        "-" * 40,
        f"{'PSNR':<22}{agg['psnr']:>12.2f}  dB",
        f"{'SSIM':<22}{agg['ssim']:>12.4f}  -",
        f"{'Theoretical bpp':<22}{agg['theoretical_bpp']:>12.4f}  bit/px",
        f"{'DEFLATE bpp':<22}{agg['deflate_bpp']:>12.4f}  bit/px",
        f"{'Ratio vs 24-bit RGB':<22}{agg['deflate_bpp'] / 24.0:>12.5f}  x",
        f"{'Clips':<22}{agg['clips']:>12d}",
    ]
    return "\n".join(lines)
