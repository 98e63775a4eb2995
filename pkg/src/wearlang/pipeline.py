"""File-level stages shared by the command line and the ablation grid.

Run directory layout::

    <out_dir>/<name>/
        config.toml
        data/{train,test}.slmd (+ .jsonl event logs)
        captions/{train,test}.<variant>.jsonl
        checkpoints/{final.slmc, final.state, vocab.txt, norm_stats.json}
        logs/train_log.csv
        reports/
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evaluation as E
from .captions import caption_rng, compose_caption, default_pool, load_template_pool
from .config import RunConfig
from .data import (EventLog, NormStats, SensorDay, build_dataset, compute_norm_stats,
                   primary_label, read_dataset, write_dataset)
from .model import ModelConfig, SensorTextModel, load_checkpoint
from .text import (Vocabulary, build_vocab, encoder_ids, make_prompt_set, normalize_text,
                   split_words)
from .trainer import (PairedData, TrainResult, load_train_state, pair_data,
                      sensor_tensor, train)

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
MAX_AUTO_L_TEXT = 160


class PipelineError(RuntimeError):
    pass


@dataclass
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.toml"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def captions(self) -> Path:
        return self.root / "captions"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def dataset(self, split: str) -> Path:
        return self.data / f"{split}.slmd"

    def caption_file(self, split: str, variant: str) -> Path:
        return self.captions / f"{split}.{variant}.jsonl"


def archive_config(cfg: RunConfig) -> RunPaths:
    paths = RunPaths(cfg.run_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(cfg.to_toml(), encoding="utf-8")
    return paths


def _refuse_existing(targets: Sequence[Path], force: bool) -> None:
    existing = [p for p in targets if p.exists()]
    if existing and not force:
        raise PipelineError(f"{existing[0]} exists; pass --force to overwrite")


# --- data --------------------------------------------------------------------

def generate_splits(cfg: RunConfig) -> dict[str, tuple[list[SensorDay], list[EventLog]]]:
    d = cfg.data
    first_test = len(d.classes) * d.days_per_class
    return {
        "train": build_dataset(d.classes, d.days_per_class, cfg.seed, 0, d.people),
        "test": build_dataset(d.classes, d.test_days_per_class, cfg.seed, first_test, d.people),
    }


def gen_data(cfg: RunConfig, force: bool = False) -> dict[str, dict[str, int]]:
    """Write both splits; returns per-split, per-class day counts."""
    paths = RunPaths(cfg.run_dir)
    _refuse_existing([paths.dataset(s) for s in SPLITS], force)
    paths.data.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, (days, logs) in generate_splits(cfg).items():
        write_dataset(days, logs, paths.dataset(split))
        counts[split] = {c: 0 for c in cfg.data.classes}
        for ev in logs:
            counts[split][primary_label(ev)] += 1
    return counts


def load_split(cfg: RunConfig, split: str) -> tuple[list[SensorDay], list[EventLog]]:
    path = RunPaths(cfg.run_dir).dataset(split)
    if not path.exists():
        raise PipelineError(f"dataset {path} missing; run gen-data first")
    return read_dataset(path)


def labels_of(cfg: RunConfig, logs: Sequence[EventLog]) -> np.ndarray:
    return np.array([cfg.data.classes.index(primary_label(ev)) for ev in logs])


# --- captions ----------------------------------------------------------------

def template_pool(cfg: RunConfig):
    return load_template_pool(cfg.captions.templates) if cfg.captions.templates else default_pool()


def caption_corpus(cfg: RunConfig, days: Sequence[SensorDay], logs: Sequence[EventLog],
                   variant: str) -> dict[tuple[int, int], str]:
    pool = template_pool(cfg)
    return {(d.person_id, d.day_id):
            compose_caption(d, ev, variant, caption_rng(cfg.seed, d.day_id),
                            cfg.captions.budget, pool).text
            for d, ev in zip(days, logs)}


def write_captions(corpus: dict[tuple[int, int], str], variant: str, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (pid, did), txt in corpus.items():
            fh.write(json.dumps({"person_id": pid, "day_id": did, "variant": variant,
                                 "text": txt}, sort_keys=True) + "\n")


def read_captions(path: Path) -> dict[tuple[int, int], str]:
    if not path.exists():
        raise PipelineError(f"caption corpus {path} missing; run gen-captions first")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[(rec["person_id"], rec["day_id"])] = rec["text"]
    return out


def gen_captions(cfg: RunConfig, force: bool = False) -> list[Path]:
    paths = RunPaths(cfg.run_dir)
    targets = [paths.caption_file(s, v) for s in SPLITS for v in cfg.captions.variants]
    _refuse_existing(targets, force)
    paths.captions.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        days, logs = load_split(cfg, split)
        for variant in cfg.captions.variants:
            write_captions(caption_corpus(cfg, days, logs, variant), variant,
                           paths.caption_file(split, variant))
    return targets


# --- training ----------------------------------------------------------------

def save_norm_stats(stats: NormStats, path: Path) -> None:
    path.write_text(json.dumps({"mean": stats.mean.tolist(), "std": stats.std.tolist()}) + "\n")


def load_norm_stats(path: Path) -> NormStats:
    raw = json.loads(path.read_text())
    return NormStats(np.array(raw["mean"], dtype=np.float64),
                     np.array(raw["std"], dtype=np.float64))


def corpus_vocab(cfg: RunConfig, texts: Sequence[str]) -> Vocabulary:
    """Vocabulary over the training captions plus the configured classes' zero-shot prompts."""
    prompts = [p for c in cfg.data.classes for p in make_prompt_set(c).prompts]
    return build_vocab(list(texts) + prompts)


def auto_L_text(cfg: RunConfig, texts: Sequence[str]) -> int:
    if cfg.model.L_text > 0:
        return cfg.model.L_text
    need = max(len(split_words(t)) for t in texts) + 2
    if need > MAX_AUTO_L_TEXT:
        log.warning("longest caption needs %d tokens; truncating at %d", need, MAX_AUTO_L_TEXT)
    return min(need, MAX_AUTO_L_TEXT)


@dataclass
class Prepared:
    data: PairedData
    vocab: Vocabulary
    stats: NormStats
    model_cfg: ModelConfig
    labels: np.ndarray


def prepare_training(cfg: RunConfig, days, logs, corpus: dict[tuple[int, int], str]) -> Prepared:
    texts = [corpus[(d.person_id, d.day_id)] for d in days]
    vocab = corpus_vocab(cfg, texts)
    L = auto_L_text(cfg, texts)
    stats = compute_norm_stats(days)
    model_cfg = cfg.model.build(len(vocab), L)
    return Prepared(pair_data(days, corpus, vocab, stats, L), vocab, stats, model_cfg,
                    labels_of(cfg, logs))


def run_training(cfg: RunConfig, force: bool = False, resume: bool = False,
                 stop_at: int | None = None) -> TrainResult:
    paths = RunPaths(cfg.run_dir)
    ckpt = paths.checkpoints
    if not resume:
        _refuse_existing([ckpt / "final.slmc"], force)
    days, logs = load_split(cfg, "train")
    corpus = read_captions(paths.caption_file("train", cfg.train.caption_variant))
    prep = prepare_training(cfg, days, logs, corpus)
    ckpt.mkdir(parents=True, exist_ok=True)
    paths.logs.mkdir(parents=True, exist_ok=True)
    prep.vocab.save(ckpt / "vocab.txt")
    save_norm_stats(prep.stats, ckpt / "norm_stats.json")
    state = None
    if resume:
        model = load_checkpoint(ckpt / "final.slmc", expect=prep.model_cfg)
        state = load_train_state(model, ckpt / "final.state")
        old_log = paths.logs / "train_log.csv"
        prior = old_log.read_text().splitlines()[1:] if old_log.exists() else []
    result = train(prep.data, prep.model_cfg, cfg.train_config(), out_dir=ckpt, resume=state,
                   stop_at=stop_at)
    produced = ckpt / "train_log.csv"
    if resume and prior:
        lines = produced.read_text().splitlines()
        produced.write_text("\n".join(lines[:1] + prior + lines[1:]) + "\n")
    shutil.move(str(produced), paths.logs / "train_log.csv")
    return result


@dataclass
class Trained:
    model: SensorTextModel
    vocab: Vocabulary
    stats: NormStats


def load_trained(cfg: RunConfig, checkpoint: str | Path | None = None,
                 untrained: bool = False) -> Trained:
    """The run's checkpoint, or a freshly initialized model of the same shape."""
    ckpt = RunPaths(cfg.run_dir).checkpoints
    path = Path(checkpoint) if checkpoint else ckpt / "final.slmc"
    if untrained:
        days, logs = load_split(cfg, "train")
        variant = cfg.train.caption_variant
        corpus = read_captions(RunPaths(cfg.run_dir).caption_file("train", variant))
        prep = prepare_training(cfg, days, logs, corpus)
        model = SensorTextModel(prep.model_cfg, seed=cfg.seed).eval()
        return Trained(model, prep.vocab, prep.stats)
    if not path.exists():
        raise PipelineError(f"checkpoint {path} missing; run train first")
    side = path.parent
    return Trained(load_checkpoint(path).eval(), Vocabulary.load(side / "vocab.txt"),
                   load_norm_stats(side / "norm_stats.json"))


# --- evaluation --------------------------------------------------------------

def _sensor_x(days, stats) -> torch.Tensor:
    return sensor_tensor(days, stats)


def eval_digest(cfg: RunConfig, task: str, split: str, untrained: bool) -> str:
    return E.config_digest({"config": cfg.to_dict(), "task": task, "split": split,
                            "untrained": untrained})


def zero_shot_report(cfg: RunConfig, tr: Trained, split: str = "test",
                     untrained: bool = False) -> E.EvalReport:
    days, logs = load_split(cfg, split)
    y = labels_of(cfg, logs)
    classes = cfg.data.classes
    scores = E.zero_shot_scores(E.sensor_embeddings(tr.model, _sensor_x(days, tr.stats)),
                                E.class_embeddings(tr.model, tr.vocab, classes))
    preds = np.array([classes.index(p) for p in E.zero_shot_predict(scores, classes)])
    metrics = E.classification_metrics(scores, preds, y)
    per_auc = E.auroc_per_class(scores, y)
    per_f1 = E.per_class_f1(preds, y)
    rows = [{"class": c, "support": int((y == k).sum()), "auroc": per_auc.get(k, float("nan")),
             "f1": per_f1.get(k, 0.0)} for k, c in enumerate(classes)]
    return E.EvalReport("zeroshot", metrics, rows, eval_digest(cfg, "zeroshot", split, untrained),
                        ["macro one-vs-rest AUROC; ties count half",
                         "prompt ensemble of 30 templates per class"])


def retrieval_report(cfg: RunConfig, tr: Trained, split: str = "test",
                     untrained: bool = False) -> E.EvalReport:
    days, _ = load_split(cfg, split)
    corpus = read_captions(RunPaths(cfg.run_dir).caption_file(split, cfg.train.caption_variant))
    ids = torch.tensor([encoder_ids(tr.vocab, corpus[(d.person_id, d.day_id)],
                                    tr.model.cfg.L_text) for d in days])
    s = E.sensor_embeddings(tr.model, _sensor_x(days, tr.stats))
    v = E.text_embeddings(tr.model, ids)
    metrics, notes = {}, ["ties broken by ascending index"]
    for k in cfg.eval.recall_k:
        if k > len(days):
            notes.append(f"R@{k} skipped: only {len(days)} items")
            continue
        s2t, t2s = E.retrieval_recall(s, v, k)
        metrics[f"recall@{k}_sensor_to_text"] = s2t
        metrics[f"recall@{k}_text_to_sensor"] = t2s
    return E.EvalReport("retrieval", metrics, [], eval_digest(cfg, "retrieval", split, untrained),
                        notes)


def fewshot_report(cfg: RunConfig, tr: Trained, untrained: bool = False) -> E.EvalReport:
    train_days, train_logs = load_split(cfg, "train")
    test_days, test_logs = load_split(cfg, "test")
    Xtr = E.sensor_embeddings(tr.model, _sensor_x(train_days, tr.stats))
    Xte = E.sensor_embeddings(tr.model, _sensor_x(test_days, tr.stats))
    ytr, yte = labels_of(cfg, train_logs), labels_of(cfg, test_logs)
    K = len(cfg.data.classes)
    curve = E.few_shot_eval(Xtr, ytr, Xte, yte, K, cfg.eval.few_shot_sizes,
                            range(cfg.eval.few_shot_seeds), cfg.eval.probe_l2)
    _, full = E.linear_probe(Xtr, ytr, Xte, yte, K, cfg.eval.probe_l2)
    metrics = {f"linear_probe_{k}": v for k, v in full.items()}
    metrics.update({f"auroc@{n}": c["auroc_mean"] for n, c in curve.items()})
    rows = [{"n_per_class": n, "auroc_mean": c["auroc_mean"], "auroc_std": c["auroc_std"],
             "runs": c["runs"]} for n, c in curve.items()]
    return E.EvalReport("fewshot", metrics, rows, eval_digest(cfg, "fewshot", "train->test",
                                                              untrained),
                        ["class-weighted multinomial logistic regression on frozen embeddings"])


def generated_captions(cfg: RunConfig, tr: Trained, split: str) -> list[dict]:
    days, _ = load_split(cfg, split)
    corpus = read_captions(RunPaths(cfg.run_dir).caption_file(split, cfg.train.caption_variant))
    max_len = cfg.eval.caption_max_len or tr.model.cfg.L_text
    hyps = E.generate_texts(tr.model, tr.vocab, _sensor_x(days, tr.stats), max_len)
    out = []
    for d, h in zip(days, hyps):
        ref = corpus[(d.person_id, d.day_id)]
        out.append({"person_id": d.person_id, "day_id": d.day_id, "generated": h,
                    "reference": ref, "exact": h == normalize_text(ref)})
    return out


def caption_report(cfg: RunConfig, tr: Trained, split: str = "test",
                   untrained: bool = False) -> tuple[E.EvalReport, list[dict]]:
    gen = generated_captions(cfg, tr, split)
    scores = [E.caption_metrics(g["generated"], g["reference"]) for g in gen]
    metrics = {"token_f1": float(np.mean([s["token_f1"] for s in scores])),
               "rouge_l": float(np.mean([s["rouge_l"] for s in scores])),
               "exact_match": float(np.mean([g["exact"] for g in gen]))}
    notes = [f"{m} unavailable: needs external resources" for m in E.UNAVAILABLE_CAPTION_METRICS]
    return (E.EvalReport("caption", metrics, [], eval_digest(cfg, "caption", split, untrained),
                         notes), gen)


def write_jsonl(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

