"""Cascade training: candidate filtering, balanced sampling, the epoch loop, hard negatives.

Coordinates pooled over several cases are rows ``(case_index, x, y, z)``.
Every random choice draws from ``SeedSequence([rng_seed, stage])`` so runs
with equal seeds are bit-identical.
"""
from __future__ import annotations

import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.dense import dense_probability
from .engine.network import Network, build_network
from .engine.optim import Adadelta, AdadeltaConfig
from .errors import (
    EmptyPatchSet,
    HardNegativeTopUpWarning,
    MissingFlairChannel,
    MissingMask,
    NoPositives,
    SamplingShortfallWarning,
    SingleClassData,
    UntrainedNetwork,
)
from .inference import PRUNE_THRESHOLD, L_MIN_GRID, T_BIN_GRID, cascade_maps, optimize_test_params
from .volume import MultiChannelCase, PatchSet, build_pooled_patchset

log = logging.getLogger(__name__)

# seed streams
STAGE_SAMPLE1, STAGE_TRAIN1, STAGE_SAMPLE2, STAGE_TRAIN2 = 1, 2, 3, 4
SPLIT, INIT, SHUFFLE, DROPOUT, CAP = 11, 12, 13, 14, 15


def derive_seed(seed: int, *path: int) -> int:
    """A 63-bit child seed of ``seed`` along ``path``."""
    state = np.random.SeedSequence([int(seed), *path]).generate_state(2, np.uint32)
    return int(state[0]) << 31 ^ int(state[1])


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 11
    max_epochs: int = 400
    early_stop_patience: int = 50
    batch_size: int = 128
    validation_fraction: float = 0.25
    flair_threshold: float = 0.5
    augmentation: bool = True
    rng_seed: int = 0
    # keep at most this many patches of each class in F1 and F2 (None: all)
    max_patches_per_class: int | None = None
    dropout: float = 0.5
    adadelta: AdadeltaConfig = field(default_factory=AdadeltaConfig)
    flair_channel: str = "FLAIR"
    channel_order: tuple[str, ...] | None = None
    t_bin_grid: tuple[float, ...] = T_BIN_GRID
    l_min_grid: tuple[int, ...] = L_MIN_GRID
    chunk: int | None = 16

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience cannot exceed max_epochs")
        if self.max_epochs < 1 or self.early_stop_patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd integer")
        if self.batch_size < 2 or (self.augmentation and self.batch_size % 4):
            raise ValueError("batch_size must be >= 2, and a multiple of 4 with augmentation")
        if self.max_patches_per_class is not None and self.max_patches_per_class < 1:
            raise ValueError("max_patches_per_class must be positive")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    best: bool

    def record(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_loss!r},{self.val_acc!r},{int(self.best)}"


LOG_HEADER = "epoch,train_loss,val_loss,val_acc,best"


def format_log(logs: Sequence[EpochLog]) -> str:
    return "\n".join([LOG_HEADER] + [e.record() for e in logs]) + "\n"


@dataclass
class CascadeModel:
    cnn1: Network
    cnn2: Network
    t_bin: float
    l_min: int
    channel_order: list[str]
    p: int = 11
    seeds: dict[str, int] = field(default_factory=dict)
    logs: dict[str, list[EpochLog]] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.cnn1.input_shape) != tuple(self.cnn2.input_shape):
            raise ValueError("both networks must share one input shape")
        if not 0 < self.t_bin < 1:
            raise ValueError(f"t_bin must be in (0, 1), got {self.t_bin}")
        if self.l_min < 0:
            raise ValueError("l_min must be non-negative")


# ------------------------------------------------------------ sampling

def candidate_voxels(case: MultiChannelCase, flair_threshold: float = 0.5,
                     flair_channel: str = "FLAIR") -> tuple[np.ndarray, np.ndarray]:
    """All lesion voxels, and the non-lesion voxels with FLAIR >= threshold."""
    if flair_channel not in case.channel_names:
        raise MissingFlairChannel(f"case {case.case_id} has no {flair_channel} channel")
    if case.mask is None:
        raise MissingMask(f"case {case.case_id} has no mask")
    lesion = case.mask.data.astype(bool)
    bright = case.channel(flair_channel).data >= flair_threshold
    return np.argwhere(lesion), np.argwhere(bright & ~lesion)


def _draw(n: int, k: int, seed) -> np.ndarray:
    """``k`` of ``range(n)`` uniformly without replacement, sorted."""
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def balanced_sample(pos: np.ndarray, neg: np.ndarray, rng_seed) -> np.ndarray:
    """All positives followed by as many uniformly drawn negatives."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    if len(pos) == 0:
        raise NoPositives("balanced sampling needs at least one positive")
    if len(neg) < len(pos):
        warnings.warn(f"only {len(neg)} negatives for {len(pos)} positives; taking all",
                      SamplingShortfallWarning, stacklevel=2)
        return np.concatenate([pos, neg]).astype(np.int64)
    return np.concatenate([pos, neg[_draw(len(neg), len(pos), rng_seed)]]).astype(np.int64)


def select_hard_negatives(pos: np.ndarray, neg: np.ndarray, neg_scores: np.ndarray,
                          rng_seed) -> tuple[np.ndarray, int]:
    """Positives plus misclassified negatives (Y1 > 0.5), topped up by score if scarce.

    Returns the coordinates and the number of top-up negatives (0 normally).
    """
    pos, neg = np.asarray(pos), np.asarray(neg)
    neg_scores = np.asarray(neg_scores)
    if len(pos) == 0:
        raise NoPositives("hard-negative selection needs at least one positive")
    hard = np.flatnonzero(neg_scores > PRUNE_THRESHOLD)
    if len(hard) >= len(pos):
        chosen = hard[_draw(len(hard), len(pos), rng_seed)]
        return np.concatenate([pos, neg[chosen]]).astype(np.int64), 0
    rest = np.setdiff1d(np.arange(len(neg)), hard)
    # highest score first, lower index on ties
    rest = rest[np.lexsort((rest, -neg_scores[rest].astype(np.float64)))]
    topup = rest[:len(pos) - len(hard)]
    warnings.warn(f"{len(hard)} misclassified negatives for {len(pos)} positives; "
                  f"topped up with {len(topup)} highest-scoring negatives",
                  HardNegativeTopUpWarning, stacklevel=2)
    if len(hard) + len(topup) < len(pos):
        warnings.warn(f"only {len(neg)} negatives for {len(pos)} positives",
                      SamplingShortfallWarning, stacklevel=2)
    chosen = np.sort(np.concatenate([hard, topup]))
    return np.concatenate([pos, neg[chosen]]).astype(np.int64), len(topup)


def hard_negative_coords(cnn1: Network, candidates: PatchSet, rng_seed,
                         scores: np.ndarray | None = None) -> np.ndarray:
    """Hard-negative selection over a labelled candidate patch set."""
    if not getattr(cnn1, "trained", False):
        raise UntrainedNetwork("hard-negative mining needs a trained CNN1")
    if scores is None:
        scores = cnn1.predict_proba(candidates.patches)
    labels = np.asarray(candidates.labels).astype(bool)
    coords, _ = select_hard_negatives(candidates.coords[labels], candidates.coords[~labels],
                                      np.asarray(scores)[~labels], rng_seed)
    return coords


def cap_per_class(coords: np.ndarray, n_pos: int, cap: int | None, rng_seed) -> np.ndarray:
    """Uniformly keep at most ``cap`` rows of each half of a ``[pos; neg]`` selection."""
    if cap is None:
        return coords
    pos, neg = coords[:n_pos], coords[n_pos:]
    if len(pos) > cap:
        pos = pos[_draw(len(pos), cap, derive_seed(rng_seed, 0))]
    if len(neg) > cap:
        neg = neg[_draw(len(neg), cap, derive_seed(rng_seed, 1))]
    return np.concatenate([pos, neg])


# --------------------------------------------------------- augmentation

def rot180_axial(x: np.ndarray) -> np.ndarray:
    """Reverse x and y jointly on ``(..., x, y, z)`` patches."""
    return x[..., ::-1, ::-1, :]


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1, :, :]


def augment_batch(batch: np.ndarray, labels: np.ndarray | None = None):
    """``[x; rot180(x); hflip(x); hflip(rot180(x))]``, labels repeated four times."""
    rot = rot180_axial(batch)
    out = np.concatenate([batch, rot, hflip(batch), hflip(rot)])
    if labels is None:
        return out
    return out, np.tile(np.asarray(labels), 4)


# ------------------------------------------------------------- training

def stratified_split(labels: np.ndarray, fraction: float, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Sorted ``(train_idx, val_idx)`` holding out ``fraction`` of each class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng_seed)
    val = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        n_val = int(round(fraction * len(idx)))
        n_val = min(max(n_val, 1), len(idx) - 1) if len(idx) > 1 else 0
        val.append(rng.permutation(idx)[:n_val])
    val = np.sort(np.concatenate(val))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    # batch-norm cannot train on one sample; fold a trailing singleton into its neighbour
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train_network(patchset: PatchSet, cfg: TrainConfig, rng_seed=None,
                  progress: Callable[[EpochLog], None] | None = None) -> tuple[Network, list[EpochLog]]:
    """ADADELTA training with early stopping on validation loss.

    Returns the network restored to its lowest-validation-loss epoch.
    """
    if len(patchset) == 0:
        raise EmptyPatchSet("cannot train on an empty patch set")
    labels = np.asarray(patchset.labels).astype(np.int64)
    if labels.min() == labels.max():
        raise SingleClassData("training data holds a single class")
    seed = cfg.rng_seed if rng_seed is None else rng_seed
    train_idx, val_idx = stratified_split(labels, cfg.validation_fraction, derive_seed(seed, SPLIT))
    if len(train_idx) < 2 or len(val_idx) == 0:
        raise EmptyPatchSet("too few patches for a train/validation split")
    net = build_network(patchset.n_channels, patchset.p, seed=derive_seed(seed, INIT),
                        dropout=cfg.dropout)
    opt = Adadelta(cfg.adadelta)
    opt.init_state(net)
    shuffle_rng = np.random.default_rng(derive_seed(seed, SHUFFLE))
    dropout_rng = np.random.default_rng(derive_seed(seed, DROPOUT))
    per_batch = cfg.batch_size // 4 if cfg.augmentation else cfg.batch_size
    x_val, y_val = patchset.patches[val_idx], labels[val_idx]

    logs: list[EpochLog] = []
    best_loss, best_state, wait = np.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        total, seen = 0.0, 0
        for rows in _batches(shuffle_rng.permutation(train_idx), per_batch):
            x, y = patchset.patches[rows], labels[rows]
            if cfg.augmentation:
                x, y = augment_batch(x, y)
            total += net.loss_and_grad(x, y, rng=dropout_rng) * len(y)
            seen += len(y)
            opt.step(net)
        val_loss, val_acc = net.evaluate(x_val, y_val)
        improved = val_loss < best_loss
        if improved:
            best_loss, best_state, wait = val_loss, net.state_dict(), 0
        else:
            wait += 1
        entry = EpochLog(epoch, total / seen, float(val_loss), float(val_acc), improved)
        logs.append(entry)
        log.info("epoch %d train %.5f val %.5f acc %.4f%s", epoch, entry.train_loss,
                 entry.val_loss, entry.val_acc, " *" if improved else "")
        if progress is not None:
            progress(entry)
        if not improved and wait >= cfg.early_stop_patience:
            break
    net.load_state_dict(best_state)
    net.trained = True
    return net, logs


# -------------------------------------------------------------- cascade

def _pool(cases, cfg):
    pos, neg = [], []
    for k, case in enumerate(cases):
        p, n = candidate_voxels(case, cfg.flair_threshold, cfg.flair_channel)
        pos.append(np.column_stack([np.full(len(p), k), p]))
        neg.append(np.column_stack([np.full(len(n), k), n]))
    return np.concatenate(pos).astype(np.int64), np.concatenate(neg).astype(np.int64)


def first_stage_set(cases: Sequence[MultiChannelCase], cfg: TrainConfig):
    """Pooled candidates ``(pos, neg)`` and the balanced CNN1 selection F1, before capping."""
    if not cases:
        raise EmptyPatchSet("no training cases")
    pos, neg = _pool(cases, cfg)
    if len(pos) == 0:
        raise NoPositives("no lesion voxels in the training cases")
    return pos, neg, balanced_sample(pos, neg, derive_seed(cfg.rng_seed, STAGE_SAMPLE1))


def second_stage_set(cnn1: Network, cases: Sequence[MultiChannelCase], pos: np.ndarray, neg: np.ndarray,
                     cfg: TrainConfig, order: Sequence[str] | None = None):
    """CNN2 selection F2 from CNN1's dense Y1 maps.

    Returns ``(f2, n_topup, y1_maps)``; ``n_topup`` counts negatives taken below Y1 = 0.5.
    """
    if not getattr(cnn1, "trained", False):
        raise UntrainedNetwork("hard-negative mining needs a trained CNN1")
    order = list(order or cfg.channel_order or cases[0].channel_names)
    y1_maps = [dense_probability(cnn1, case.stack(order), cfg.chunk) for case in cases]
    # neg rows are grouped by case in order, so the concatenation lines up with neg
    scores = np.concatenate([y1_maps[k][tuple(neg[neg[:, 0] == k, 1:].T)] for k in range(len(cases))])
    f2, n_topup = select_hard_negatives(pos, neg, scores, derive_seed(cfg.rng_seed, STAGE_SAMPLE2))
    if n_topup:
        log.warning("hard-negative top-up used for %d negatives", n_topup)
    return f2, n_topup, y1_maps


def train_cascade(cases: Sequence[MultiChannelCase], cfg: TrainConfig,
                  progress: Callable[[str, EpochLog], None] | None = None,
                  maps: dict | None = None) -> CascadeModel:
    """Train CNN1 on balanced candidates, CNN2 on CNN1's hard negatives, then pick (t_bin, l_min).

    Cases must already be intensity-normalized. If ``maps`` is a dict it
    receives the training-case probability maps under ``"y1"`` (CNN1 alone)
    and ``"cascade"``.
    """
    if not cases:
        raise EmptyPatchSet("no training cases")
    order = list(cfg.channel_order or cases[0].channel_names)
    p, seed = cfg.patch_size, cfg.rng_seed
    t0 = time.perf_counter()
    pos, neg, f1 = first_stage_set(cases, cfg)
    log.info("candidates: %d positives, %d negatives", len(pos), len(neg))

    def fit(coords, n_pos, stage_sample, stage_train, name):
        coords = cap_per_class(coords, n_pos, cfg.max_patches_per_class,
                               derive_seed(seed, stage_sample, CAP))
        ps = build_pooled_patchset(cases, coords, p, order)
        cb = (lambda e: progress(name, e)) if progress else None
        return train_network(ps, cfg, derive_seed(seed, stage_train), cb)

    cnn1, log1 = fit(f1, len(pos), STAGE_SAMPLE1, STAGE_TRAIN1, "cnn1")
    log.info("CNN1 trained in %.1f s", time.perf_counter() - t0)

    f2, _, y1_maps = second_stage_set(cnn1, cases, pos, neg, cfg, order)
    stacks = [case.stack(order) for case in cases]
    cnn2, log2 = fit(f2, len(pos), STAGE_SAMPLE2, STAGE_TRAIN2, "cnn2")
    log.info("CNN2 trained at %.1f s", time.perf_counter() - t0)

    probs = [cascade_maps(cnn1, cnn2, s, cfg.chunk, y1)[1] for s, y1 in zip(stacks, y1_maps)]
    if maps is not None:
        maps.update(y1=y1_maps, cascade=probs)
    t_bin, l_min = optimize_test_params(None, cases, cfg.t_bin_grid, cfg.l_min_grid, prob_maps=probs)
    log.info("t_bin=%.2f l_min=%d after %.1f s", t_bin, l_min, time.perf_counter() - t0)
    seeds = {"rng_seed": seed, "cnn1": derive_seed(seed, STAGE_TRAIN1), "cnn2": derive_seed(seed, STAGE_TRAIN2)}
    return CascadeModel(cnn1, cnn2, t_bin, l_min, order, p, seeds, {"cnn1": log1, "cnn2": log2})


# ----------------------------------------------------------- model dirs

MANIFEST = "model.txt"


def save_model(model: CascadeModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(os.path.join(directory, "cnn1.cnet"), model.cnn1)
    save_checkpoint(os.path.join(directory, "cnn2.cnet"), model.cnn2)
    lines = [f"t_bin={model.t_bin!r}", f"l_min={model.l_min}",
             f"channels={','.join(model.channel_order)}", f"patch_size={model.p}"]
    lines += [f"seed.{k}={v}" for k, v in sorted(model.seeds.items())]
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for name, logs in model.logs.items():
        with open(os.path.join(directory, f"{name}_train.log"), "w") as fh:
            fh.write(format_log(logs))


def load_model(directory) -> CascadeModel:
    values = {}
    with open(os.path.join(directory, MANIFEST)) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    cnn1, _ = load_checkpoint(os.path.join(directory, "cnn1.cnet"))
    cnn2, _ = load_checkpoint(os.path.join(directory, "cnn2.cnet"))
    seeds = {k[5:]: int(v) for k, v in values.items() if k.startswith("seed.")}
    return CascadeModel(cnn1, cnn2, float(values["t_bin"]), int(values["l_min"]),
                        values["channels"].split(","), int(values["patch_size"]), seeds)

