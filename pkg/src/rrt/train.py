"""Supervised training of the pair scorer.

Pairs are mined the retrieve-then-label way: positives are drawn uniformly
from the anchor's label class, negatives uniformly from the anchor's top
global neighbors with a different label (with a uniform fallback over all
different-label images when the pool has none).  Neighbor lists are computed
once from the frozen global descriptors before training starts.  One positive
and one negative per anchor keeps every batch balanced.

Training is single-threaded with a single seeded generator, so a given
(seed, config, dataset) reproduces the loss history bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import bce_with_logits
from .data import ImageRecord
from .errors import ConfigError, TrainingDiverged
from .model import ModelConfig, ModelParams, forward_pair_logits, init_params, save_checkpoint
from .optim import AdamW, clip_global_grad_norm, global_grad_norm
from .retrieval import build_index, knn_search, query_vector

__all__ = [
    "TrainConfig",
    "PairSample",
    "PairSampler",
    "train",
    "evaluate_loss",
    "write_loss_history",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 4e-4
    epochs: int = 15
    batch_size: int = 8           # anchors per step; pairs per step is twice this
    seed: int = 0
    grad_clip_norm: Optional[float] = None  # 0.1 is the stabilizing value when on
    neg_pool_size: int = 100
    steps_per_epoch: Optional[int] = None
    lr_step_schedule: bool = False  # x0.1 after 60% and 80% of the epochs

    def validate(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        for name in ("epochs", "batch_size", "neg_pool_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive when set")


@dataclass(frozen=True)
class PairSample:
    anchor_id: int
    partner_id: int
    label: int  # 1 same instance, 0 different


class PairSampler:
    """Draws one positive and one negative partner for an anchor."""

    def __init__(
        self,
        records: Sequence[ImageRecord],
        neighbor_ids: dict[int, list[int]],
        neg_pool_size: int = 100,
    ):
        self.label_of = {r.id: r.label for r in records}
        self.same: dict[int, list[int]] = {}
        by_label: dict[int, list[int]] = {}
        for r in records:
            by_label.setdefault(r.label, []).append(r.id)
        for r in records:
            self.same[r.id] = [i for i in by_label[r.label] if i != r.id]
        all_ids = [r.id for r in records]
        self.diff_by_label = {
            lab: [i for i in all_ids if self.label_of[i] != lab] for lab in by_label
        }
        self.neighbors = neighbor_ids
        self.neg_pool_size = neg_pool_size

    def has_positive(self, anchor_id: int) -> bool:
        return bool(self.same.get(anchor_id))

    def sample_pair(
        self, anchor_id: int, rng: np.random.Generator
    ) -> Optional[tuple[PairSample, PairSample]]:
        """(positive, negative) for the anchor; None when the anchor has no
        same-label partner (caller skips it)."""
        same = self.same.get(anchor_id, [])
        if not same:
            return None
        pos = same[int(rng.integers(len(same)))]
        lab = self.label_of[anchor_id]
        pool = [
            g
            for g in self.neighbors.get(anchor_id, [])[: self.neg_pool_size]
            if self.label_of[g] != lab
        ]
        if not pool:
            pool = self.diff_by_label[lab]
            if not pool:
                raise ConfigError("dataset has a single label; no negatives exist")
        neg = pool[int(rng.integers(len(pool)))]
        return PairSample(anchor_id, pos, 1), PairSample(anchor_id, neg, 0)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.lr_step_schedule:
        return cfg.lr
    factor = 1.0
    if epoch >= int(0.6 * cfg.epochs):
        factor *= 0.1
    if epoch >= int(0.8 * cfg.epochs):
        factor *= 0.1
    return cfg.lr * factor


def mine_neighbor_ids(records: Sequence[ImageRecord], pool: int) -> dict[int, list[int]]:
    """Per-record ranked neighbor ids over the raw globals, self excluded.

    One gemm over the whole gallery; ordering matches knn_search's total
    order (score desc, id asc)."""
    index = build_index(records)
    k = min(pool, len(records) - 1)
    sims = index.vectors @ index.vectors.T
    ids = index.ids
    out = {}
    take = max(k, 1) + 1  # one extra row in case self ranks inside the cut
    for row, r in enumerate(records):
        order = np.lexsort((ids, -sims[row].astype(np.float64)))[:take]
        out[r.id] = [int(ids[i]) for i in order if ids[i] != r.id][: max(k, 1)]
    return out


def train(
    records: Sequence[ImageRecord],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    params: Optional[ModelParams] = None,
    out_dir=None,
) -> tuple[ModelParams, list[dict]]:
    """Train on a labeled gallery; returns (params, per-step loss history).

    Records should be unit-normalized (see data.normalize_records).  When
    out_dir is given, a checkpoint lands there after every epoch plus a final
    model.rrtm and loss_history.csv.  A non-finite loss aborts with
    diagnostics before any parameter update is applied.
    """
    cfg.validate()
    if len({r.label for r in records}) < 2:
        raise ConfigError("training needs at least two distinct labels")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(model_cfg, seed=cfg.seed)

    neighbor_ids = mine_neighbor_ids(records, cfg.neg_pool_size)
    sampler = PairSampler(records, neighbor_ids, cfg.neg_pool_size)
    by_id = {r.id: r for r in records}
    anchors = [r.id for r in records if sampler.has_positive(r.id)]
    if not anchors:
        raise ConfigError("no anchor has a same-label partner")

    opt = AdamW(
        params.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    trainable = params.trainable()
    history: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = _epoch_lr(cfg, epoch)
        order = rng.permutation(len(anchors))
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            if cfg.steps_per_epoch is not None and n_steps >= cfg.steps_per_epoch:
                break
            batch = order[start : start + cfg.batch_size]
            pairs, targets = [], []
            for ai in batch:
                drawn = sampler.sample_pair(anchors[int(ai)], rng)
                if drawn is None:
                    continue
                for ps in drawn:
                    pairs.append((by_id[ps.anchor_id], by_id[ps.partner_id]))
                    targets.append(float(ps.label))
            if not pairs:
                continue
            logits, _ = forward_pair_logits(params, model_cfg, pairs)
            loss = bce_with_logits(logits, np.array(targets, dtype=logits.dtype)).mean()
            loss_val = float(loss.data)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip_norm is not None:
                grad_norm = clip_global_grad_norm(trainable, cfg.grad_clip_norm)
            else:
                grad_norm = global_grad_norm(trainable)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(step=step + 1, lr=opt.lr, grad_norm=grad_norm)
            opt.step()
            step += 1
            n_steps += 1
            history.append(
                {"step": step, "epoch": epoch, "loss": loss_val, "grad_norm": grad_norm}
            )
        if out_path is not None:
            save_checkpoint(params, model_cfg, out_path / f"checkpoint_epoch{epoch + 1:03d}.rrtm")
    if out_path is not None:
        save_checkpoint(params, model_cfg, out_path / "model.rrtm")
        write_loss_history(out_path / "loss_history.csv", history)
    return params, history


def evaluate_loss(
    records: Sequence[ImageRecord],
    params: ModelParams,
    model_cfg: ModelConfig,
    pairs: Sequence[PairSample],
    chunk: int = 256,
) -> float:
    """Mean binary cross entropy over a fixed pair list; no mutation."""
    if not pairs:
        raise ValueError("evaluate_loss needs at least one pair")
    by_id = {r.id: r for r in records}
    from .autograd import no_grad

    total = 0.0
    with no_grad():
        for start in range(0, len(pairs), chunk):
            block = pairs[start : start + chunk]
            rec_pairs = [(by_id[p.anchor_id], by_id[p.partner_id]) for p in block]
            t = np.array([float(p.label) for p in block])
            logits, _ = forward_pair_logits(params, model_cfg, rec_pairs)
            z = logits.data.astype(np.float64)
            total += float(
                (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum()
            )
    return total / len(pairs)


def write_loss_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss", "grad_norm"])
        for row in history:
            w.writerow([row["step"], row["epoch"], repr(row["loss"]), repr(row["grad_norm"])])
