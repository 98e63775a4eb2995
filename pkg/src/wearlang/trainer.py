"""Deterministic pretraining loop: Adam, warmup + decay schedule, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .captions import DEFAULT_VARIANT, variant_name
from .data import EventLog, NormStats, SensorDay, normalize
from .model import (CheckpointError, ModelConfig, SensorTextModel, _pack_tensors, _unpack_tensors,
                    grad, save_checkpoint)
from .objectives import LossConfig, model_losses
from .text import Vocabulary, decoder_pair, encoder_ids

log = logging.getLogger(__name__)

SCHEDULES = ("cosine_warmup_linear_decay", "linear_warmup_cosine_decay")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    caption_variant: str = variant_name(DEFAULT_VARIANT)
    clip_norm: float = 1.0
    schedule: str = SCHEDULES[0]

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["denominator_mode"] = self.loss.denominator_mode.value
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Warmup over the first ``warmup_fraction`` of steps, then decay to 0 at ``cfg.steps``.

    The default ramps up along a half cosine and decays linearly; the
    alternative schedule ramps linearly and decays along a half cosine.
    """
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    warm = cfg.warmup_fraction * cfg.steps
    if step < warm:
        frac = step / warm
        if cfg.schedule == "cosine_warmup_linear_decay":
            return cfg.base_lr * 0.5 * (1.0 - math.cos(math.pi * frac))
        return cfg.base_lr * frac
    if cfg.steps == warm:
        return cfg.base_lr
    frac = (cfg.steps - step) / (cfg.steps - warm)
    if cfg.schedule == "cosine_warmup_linear_decay":
        return cfg.base_lr * frac
    return cfg.base_lr * 0.5 * (1.0 - math.cos(math.pi * frac))


@dataclass
class TrainState:
    step: int
    model: SensorTextModel
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    seed: int = 0

    @classmethod
    def fresh(cls, model: SensorTextModel, seed: int = 0) -> "TrainState":
        zeros = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(0, model, zeros, {n: z.clone() for n, z in zeros.items()}, seed)


class TrainingDiverged(FloatingPointError):
    pass


@torch.no_grad()
def adam_step(state: TrainState, grads: dict[str, torch.Tensor], lr: float,
              cfg: TrainConfig = TrainConfig()) -> TrainState:
    """Bias-corrected Adam update in place; a non-finite gradient leaves the state untouched."""
    params = dict(state.model.named_parameters())
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps))
    state.step = t
    return state


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


# --- data assembly ----------------------------------------------------------

@dataclass
class PairedData:
    x: torch.Tensor  # [N, 26, 1440] normalized
    enc_ids: torch.Tensor  # [N, L]
    dec_in: torch.Tensor  # [N, L]
    dec_tgt: torch.Tensor  # [N, L]
    keys: list[tuple[int, int]]
    texts: list[str]

    def __len__(self) -> int:
        return len(self.keys)

    def subset(self, idx) -> "PairedData":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return PairedData(self.x[t], self.enc_ids[t], self.dec_in[t], self.dec_tgt[t],
                          [self.keys[i] for i in idx], [self.texts[i] for i in idx])


def sensor_tensor(days: Sequence[SensorDay], stats: NormStats) -> torch.Tensor:
    return torch.from_numpy(np.stack([normalize(d, stats).values for d in days]))


def pair_data(days: Sequence[SensorDay], captions: dict[tuple[int, int], str],
              vocab: Vocabulary, stats: NormStats, L_text: int) -> PairedData:
    """Align days with captions by ``(person_id, day_id)`` and tokenize."""
    keys = [(d.person_id, d.day_id) for d in days]
    missing = [k for k in keys if k not in captions]
    if missing:
        raise KeyError(f"{len(missing)} days have no caption, e.g. {missing[:3]}")
    texts = [captions[k] for k in keys]
    enc = [encoder_ids(vocab, t, L_text) for t in texts]
    pairs = [decoder_pair(vocab, t, L_text) for t in texts]
    return PairedData(
        sensor_tensor(days, stats),
        torch.tensor(enc, dtype=torch.long),
        torch.tensor([p[0] for p in pairs], dtype=torch.long),
        torch.tensor([p[1] for p in pairs], dtype=torch.long),
        keys, texts,
    )


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: a fresh seeded permutation per epoch, last partial batch dropped."""
    bs = min(batch_size, n)
    per_epoch = max(n // bs, 1)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * bs:(k + 1) * bs]


# --- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SensorTextModel
    state: TrainState
    history: list[dict]


def train(data: PairedData, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: TrainState | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Run (or continue) pretraining; writes ``final.slmc`` and ``train_log.csv`` to ``out_dir``.

    ``stop_at`` halts early after that many total steps without changing the
    schedule, which is how resumption is exercised.
    """
    if resume is None:
        model = SensorTextModel(model_cfg, seed=cfg.seed)
        state = TrainState.fresh(model, cfg.seed)
    else:
        state, model = resume, resume.model
    model.train(model.cfg.dropout > 0)
    torch.manual_seed(cfg.seed + state.step)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        idx = torch.as_tensor(batch_indices(len(data), cfg.batch_size, cfg.seed, state.step))
        parts: dict[str, torch.Tensor] = {}

        def closure():
            parts.update(model_losses(model, data.x[idx], data.enc_ids[idx], data.dec_in[idx],
                                      data.dec_tgt[idx], cfg.loss))
            return parts["total"]

        try:
            grads = grad(model, closure)
        except FloatingPointError as exc:
            if out:
                save_checkpoint(model, out / "last_good.slmc")
                save_train_state(state, out / "last_good.state")
            raise TrainingDiverged(f"step {state.step + 1}: {exc}") from exc
        clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(state.step + 1, cfg)
        adam_step(state, grads, lr, cfg)
        history.append({"step": state.step, "lr": lr, "loss_total": float(parts["total"].detach()),
                        "loss_con": float(parts["con"].detach()),
                        "loss_cap": float(parts["cap"].detach())})
        if state.step % 100 == 0:
            log.info("step %d lr %.2e loss %.4f", state.step, lr, history[-1]["loss_total"])
    model.eval()
    if out:
        save_checkpoint(model, out / "final.slmc")
        save_train_state(state, out / "final.state")
        write_train_log(history, out / "train_log.csv")
    return TrainResult(model, state, history)


def write_train_log(history: list[dict], path: str | Path) -> None:
    cols = ["step", "lr", "loss_total", "loss_con", "loss_cap"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])


STATE_MAGIC = b"SLMS"


def save_train_state(state: TrainState, path: str | Path) -> None:
    """Optimizer sidecar for a checkpoint: step, seed and both Adam moments."""
    meta = json.dumps({"step": state.step, "seed": state.seed}, sort_keys=True).encode()
    tensors = {f"m.{k}": t for k, t in state.m.items()}
    tensors.update({f"v.{k}": t for k, t in state.v.items()})
    Path(path).write_bytes(STATE_MAGIC + struct.pack("<I", len(meta)) + meta
                           + _pack_tensors(tensors))


def load_train_state(model: SensorTextModel, path: str | Path) -> TrainState:
    blob = Path(path).read_bytes()
    if blob[:4] != STATE_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    meta = json.loads(blob[8:8 + mlen])
    tensors, _ = _unpack_tensors(blob, 8 + mlen)
    params = dict(model.named_parameters())
    m, v = {}, {}
    for name, p in params.items():
        for store, prefix in ((m, "m."), (v, "v.")):
            arr = tensors.get(prefix + name)
            if arr is None or arr.shape != tuple(p.shape):
                raise CheckpointError(f"{path}: missing or misshapen moment {prefix}{name}")
            store[name] = torch.from_numpy(arr).to(p.dtype)
    return TrainState(meta["step"], model, m, v, meta["seed"])
