"""Caption-variant and loss-variant ablation grid at desk scale."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation as E
from .captions import ALL_VARIANTS, variant_name
from .config import RunConfig
from .objectives import LOSS_VARIANTS
from .pipeline import caption_corpus, labels_of, load_split, prepare_training
from .text import encoder_ids
from .trainer import TrainConfig, sensor_tensor, train

log = logging.getLogger(__name__)

METRICS = ("zs_auroc", "zs_macro_f1", "zs_bacc", "probe_auroc", "r1_s2t", "r1_t2s", "final_loss")


@dataclass
class Cell:
    group: str  # "caption" or "loss"
    variant: str
    status: str = "ok"
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class AblationReport:
    cells: list[Cell]
    config_digest: str

    def rows(self, group: str) -> list[Cell]:
        return [c for c in self.cells if c.group == group]

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest,
                "cells": [{"group": c.group, "variant": c.variant, "status": c.status,
                           "metrics": {k: _num(v) for k, v in c.metrics.items()}}
                          for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        parts = [f"config: {self.config_digest}"]
        for group, title in (("caption", "caption variants (CoCa loss)"),
                             ("loss", "loss variants")):
            rows = [[c.variant] + [_fmt(c.metrics.get(m)) for m in METRICS] + [c.status]
                    for c in self.rows(group)]
            parts += ["", title, E.format_table(["variant", *METRICS, "status"], rows)]
        return "\n".join(parts) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "variant", *METRICS, "status"])
        for c in self.cells:
            w.writerow([c.group, c.variant] + [_fmt(c.metrics.get(m)) for m in METRICS]
                       + [c.status])
        return buf.getvalue()

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "ablation.json").write_text(self.to_json())
        (directory / "ablation.txt").write_text(self.to_text())
        (directory / "ablation.csv").write_text(self.to_csv())


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _fmt(v) -> str:
    return "-" if _num(v) is None else f"{v:.4f}"


def _evaluate(cfg: RunConfig, model, prep, test_days, test_logs, test_corpus) -> dict[str, float]:
    classes = cfg.data.classes
    xte = sensor_tensor(test_days, prep.stats)
    yte = labels_of(cfg, test_logs)
    s_te = E.sensor_embeddings(model, xte)
    scores = E.zero_shot_scores(s_te, E.class_embeddings(model, prep.vocab, classes))
    preds = np.array([classes.index(p) for p in E.zero_shot_predict(scores, classes)])
    zs = E.classification_metrics(scores, preds, yte)
    s_tr = E.sensor_embeddings(model, prep.data.x)
    _, probe = E.linear_probe(s_tr, prep.labels, s_te, yte, len(classes), cfg.eval.probe_l2)
    ids = torch.tensor([encoder_ids(prep.vocab, test_corpus[(d.person_id, d.day_id)],
                                    model.cfg.L_text) for d in test_days])
    r1 = E.retrieval_recall(s_te, E.text_embeddings(model, ids), 1)
    return {"zs_auroc": zs["auroc"], "zs_macro_f1": zs["macro_f1"], "zs_bacc": zs["balanced_acc"],
            "probe_auroc": probe["auroc"], "r1_s2t": r1[0], "r1_t2s": r1[1]}


def _cell_config(cfg: RunConfig, variant: str, loss_name: str) -> TrainConfig:
    base = cfg.train_config()
    return replace(base, steps=cfg.ablation.steps, batch_size=cfg.ablation.batch_size,
                   loss=replace(LOSS_VARIANTS[loss_name], tau=base.loss.tau,
                                denominator_mode=base.loss.denominator_mode),
                   caption_variant=variant)


def run_cell(cfg: RunConfig, group: str, variant: str, loss_name: str, splits) -> Cell:
    cell = Cell(group, variant if group == "caption" else loss_name)
    try:
        (days, logs), (test_days, test_logs) = splits
        corpus = caption_corpus(cfg, days, logs, variant)
        test_corpus = caption_corpus(cfg, test_days, test_logs, variant)
        prep = prepare_training(cfg, days, logs, corpus)
        result = train(prep.data, prep.model_cfg, _cell_config(cfg, variant, loss_name))
        cell.metrics = _evaluate(cfg, result.model, prep, test_days, test_logs, test_corpus)
        cell.metrics["final_loss"] = (result.history[-1]["loss_total"] if result.history
                                      else float("nan"))
    except Exception as exc:  # one failed cell must not stop the grid
        log.error("ablation cell %s/%s failed: %s", group, cell.variant, exc)
        cell.status = f"failed: {type(exc).__name__}: {exc}"
    return cell


def run_ablation_grid(cfg: RunConfig) -> AblationReport:
    """Seven caption-variant cells under the CoCa loss, then CLIP / Cap / CoCa on the default
    caption variant."""
    splits = (load_split(cfg, "train"), load_split(cfg, "test"))
    cells = []
    for levels in ALL_VARIANTS:
        name = variant_name(levels)
        log.info("ablation: caption variant %s", name)
        cells.append(run_cell(cfg, "caption", name, "CoCa", splits))
    for loss_name in LOSS_VARIANTS:
        log.info("ablation: loss variant %s", loss_name)
        cells.append(run_cell(cfg, "loss", cfg.train.caption_variant, loss_name, splits))
    digest = E.config_digest({"config": cfg.to_dict(), "task": "ablation"})
    return AblationReport(cells, digest)
