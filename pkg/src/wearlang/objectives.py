"""Contrastive, captioning and combined pretraining losses."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .model import decode_multimodal, encode_sensor, encode_text
from .text import PAD


class DenominatorMode(str, enum.Enum):
    INCLUDE_POSITIVE = "include"  # standard InfoNCE
    EXCLUDE_POSITIVE = "exclude"  # literal j != i denominator


@dataclass(frozen=True)
class LossConfig:
    lambda_con: float = 1.0
    lambda_cap: float = 1.0
    tau: float = 0.01
    denominator_mode: DenominatorMode = DenominatorMode.INCLUDE_POSITIVE

    def __post_init__(self) -> None:
        object.__setattr__(self, "denominator_mode", DenominatorMode(self.denominator_mode))
        if self.lambda_con < 0 or self.lambda_cap < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_con + self.lambda_cap <= 0:
            raise ValueError("at least one of lambda_con, lambda_cap must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


LOSS_VARIANTS = {
    "CLIP": LossConfig(1.0, 0.0),
    "Cap": LossConfig(0.0, 1.0),
    "CoCa": LossConfig(1.0, 1.0),
}


@dataclass
class Batch:
    """Model outputs for one batch; parts a loss variant skips may be ``None``."""

    s: torch.Tensor | None = None  # [N, D] unit-norm sensor embeddings
    v: torch.Tensor | None = None  # [N, D] unit-norm text embeddings
    logits: torch.Tensor | None = None  # [N, T, V]
    targets: torch.Tensor | None = None  # [N, T]


def _log_ratio(sim: torch.Tensor, mode: DenominatorMode) -> torch.Tensor:
    """Row-wise ``sim_ii - log sum_j exp(sim_ij)`` over the requested denominator."""
    pos = sim.diagonal()
    if mode is DenominatorMode.INCLUDE_POSITIVE:
        return pos - torch.logsumexp(sim, dim=1)
    eye = torch.eye(sim.shape[0], dtype=torch.bool, device=sim.device)
    return pos - torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)


def contrastive_loss(s: torch.Tensor, v: torch.Tensor, cfg: LossConfig = LossConfig()
                     ) -> torch.Tensor:
    """Symmetric sensor<->text objective, ``-(1/N) * (sum s->t + sum t->s)``."""
    if s.shape != v.shape or s.dim() != 2:
        raise ValueError(f"embedding shapes differ: {tuple(s.shape)} vs {tuple(v.shape)}")
    n = s.shape[0]
    if n < 2 and cfg.denominator_mode is DenominatorMode.EXCLUDE_POSITIVE:
        raise ValueError("ExcludePositive needs N >= 2 (empty denominator)")
    sim = s @ v.T / cfg.tau
    mode = cfg.denominator_mode
    return -(_log_ratio(sim, mode).sum() + _log_ratio(sim.T, mode).sum()) / n


def captioning_loss(logits: torch.Tensor, targets: torch.Tensor,
                    pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``pad_mask`` is true (non-PAD)."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets "
                         f"{tuple(targets.shape)}")
    if pad_mask is None:
        pad_mask = targets != PAD
    if pad_mask.shape != targets.shape:
        raise ValueError("pad_mask must match targets")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets[..., None]).squeeze(-1)
    w = pad_mask.to(nll.dtype)
    return (nll * w).sum() / w.sum().clamp_min(1.0)


def combined_loss(batch: Batch, cfg: LossConfig) -> dict[str, torch.Tensor]:
    """``lambda_con * L_con + lambda_cap * L_cap``; a zero weight skips its term entirely."""
    zero = None
    con = cap = None
    total = 0.0
    if cfg.lambda_con > 0:
        con = contrastive_loss(batch.s, batch.v, cfg)
        total = total + cfg.lambda_con * con
        zero = con.new_zeros(())
    if cfg.lambda_cap > 0:
        cap = captioning_loss(batch.logits, batch.targets)
        total = total + cfg.lambda_cap * cap
        zero = cap.new_zeros(())
    return {
        "total": total,
        "con": con if con is not None else zero,
        "cap": cap if cap is not None else zero,
    }


def model_batch(model, x: torch.Tensor, enc_ids: torch.Tensor, dec_in: torch.Tensor,
                dec_tgt: torch.Tensor, cfg: LossConfig) -> Batch:
    """Run only the forward paths the loss weights need."""
    batch = Batch(targets=dec_tgt)
    if cfg.lambda_con > 0:
        tokens, batch.s = encode_sensor(model, x)
        batch.v = encode_text(model, enc_ids)[1]
    else:
        tokens = model.sensor_encoder(x)
    if cfg.lambda_cap > 0:
        batch.logits = decode_multimodal(model, tokens, dec_in)
    return batch


def model_losses(model, x, enc_ids, dec_in, dec_tgt, cfg: LossConfig) -> dict[str, torch.Tensor]:
    return combined_loss(model_batch(model, x, enc_ids, dec_in, dec_tgt, cfg), cfg)
