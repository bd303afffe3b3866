"""Training procedures: the CNN loop, master model and target-centre calibration."""

from __future__ import annotations

import copy
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..evaluation import SingleClass, f1_optimal_threshold, slide_score
from ..patchset import PatchSet
from . import convnet
from .augment import AugmentConfig, augment
from .forest import ForestConfig, train_forest
from .hybrid import MASTER, HybridModel, calibrated_tag
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

# calibration data is expected at 1/20 .. 1/5 of the reference training set
CALIBRATION_RATIO = (1 / 20, 1 / 5)


class EmptyClass(ValueError):
    pass


class DataRatioWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    lr: float = 0.001
    dtype: str = "float32"
    input_side: int = 64
    channels: tuple = convnet.DEFAULT_CHANNELS

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    n_train: int = 0
    n_val: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _require_both_classes(ps: PatchSet, name: str) -> None:
    neg, pos = ps.class_counts()
    if neg == 0 or pos == 0:
        raise EmptyClass(f"{name} set has {pos} IC and {neg} Rest patches; both classes are required")


def mean_loss(params: dict, patches: PatchSet, batch_size: int = 32) -> float:
    x = convnet.to_input(patches.images, params["conv1_w"].dtype)
    logits, _ = convnet.predict_logits(params, x, batch_size)
    losses, _ = convnet.bce_loss(convnet.sigmoid(logits), patches.labels)
    return float(losses.mean())


def _augmented_batch(images: np.ndarray, idx: np.ndarray, acfg: AugmentConfig,
                     seed: int, epoch: int) -> np.ndarray:
    out = np.empty((len(idx),) + images.shape[1:], dtype=np.uint8)
    for j, i in enumerate(idx):
        # per-sample stream: independent of batch composition and worker layout
        rng = np.random.default_rng([seed, epoch, int(i)])
        out[j] = augment(images[i], acfg, rng)
    return out


def train_cnn(train: PatchSet, val: PatchSet, tcfg: TrainConfig = TrainConfig(),
              acfg: AugmentConfig = AugmentConfig(),
              init: Optional[dict] = None) -> tuple[dict, TrainingLog]:
    """Mini-batch Adam on mean BCE with early stopping on validation loss.

    Returns the parameters of the best validation epoch.
    """
    _require_both_classes(train, "training")
    _require_both_classes(val, "validation")
    dtype = np.dtype(tcfg.dtype)
    if init is None:
        params = convnet.init_params(tcfg.seed, tcfg.channels)
    else:
        params = copy.deepcopy(init)
    params = {k: v.astype(dtype) for k, v in params.items()}
    state = AdamState.fresh(params, lr=tcfg.lr)
    labels = train.labels.astype(np.float64)

    history = TrainingLog(n_train=len(train), n_val=len(val))
    best = copy.deepcopy(params)
    wait = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train))
        batch_losses = []
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            x = convnet.to_input(_augmented_batch(train.images, idx, acfg, tcfg.seed, epoch), dtype)
            cache = []
            convnet.forward(params, x, cache)
            loss, grads = convnet.backward(params, cache, labels[idx])
            state, params = adam_step(state, params, grads)
            batch_losses.append(loss * len(idx))
        train_loss = float(sum(batch_losses) / len(train))
        val_loss = mean_loss(params, val, tcfg.batch_size)
        history.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                               "seconds": round(time.perf_counter() - t0, 3)})
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < history.best_val_loss - tcfg.min_delta:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = copy.deepcopy(params)
            wait = 0
        else:
            wait += 1
            if wait >= tcfg.patience:
                history.stopped_early = True
                break
    return best, history


def fit_thresholds(model: HybridModel, val: PatchSet) -> dict:
    """Set the patch threshold by F1 on validation patches, then the slide
    threshold by F1 on the validation slides' scores at that patch threshold."""
    scores = model.predict_proba(val.images)
    model.patch_threshold = f1_optimal_threshold(scores, val.labels)
    slide_ids = sorted(val.slide_labels)
    s_ic, s_lab = [], []
    for sid in slide_ids:
        mine = scores[val.slide_ids == sid]
        s_ic.append(slide_score(mine, model.patch_threshold))
        s_lab.append(val.slide_labels[sid])
    try:
        model.slide_threshold = f1_optimal_threshold(s_ic, s_lab)
    except SingleClass:
        warnings.warn("validation slides hold a single class; slide threshold left at 0.0")
        model.slide_threshold = 0.0
    return {"patch_threshold": model.patch_threshold, "slide_threshold": model.slide_threshold,
            "validation_slide_scores": dict(zip(slide_ids, s_ic))}


def _fit_head_and_forest(params: dict, train: PatchSet, val: PatchSet, fcfg: ForestConfig,
                         tcfg: TrainConfig, provenance: str, workers: int, meta: dict) -> HybridModel:
    from .hybrid import extract_features

    feats = extract_features(params, train.images)
    forest = train_forest(feats, train.labels, fcfg, seed=tcfg.seed, workers=workers)
    model = HybridModel(params, forest, provenance=provenance, input_side=tcfg.input_side,
                        seed=tcfg.seed, meta=meta)
    meta["thresholds"] = fit_thresholds(model, val)
    return model


def train_master(train: PatchSet, val: PatchSet, tcfg: TrainConfig = TrainConfig(),
                 acfg: AugmentConfig = AugmentConfig(), fcfg: ForestConfig = ForestConfig(),
                 workers: int = 1) -> tuple[HybridModel, TrainingLog]:
    if train.side != tcfg.input_side:
        raise convnet.ShapeMismatch(f"training patches are {train.side}px, config says {tcfg.input_side}")
    params, history = train_cnn(train, val, tcfg, acfg)
    meta = {"reference_train_patches": len(train), "train_patches": len(train),
            "val_patches": len(val)}
    model = _fit_head_and_forest(params, train, val, fcfg, tcfg, MASTER, workers, meta)
    return model, history


def calibrate(master: HybridModel, train: PatchSet, val: PatchSet, center: str,
              tcfg: TrainConfig = TrainConfig(), acfg: AugmentConfig = AugmentConfig(),
              fcfg: ForestConfig = ForestConfig(), workers: int = 1) -> tuple[HybridModel, TrainingLog]:
    """Fine-tune the master backbone on target-centre data, then refit the forest
    and both thresholds on that centre. The master model is not modified."""
    if train.side != master.input_side:
        raise convnet.ShapeMismatch(f"target patches are {train.side}px, model expects {master.input_side}")
    ref = master.meta.get("reference_train_patches")
    if ref:
        ratio = len(train) / ref
        lo, hi = CALIBRATION_RATIO
        if not lo <= ratio <= hi:
            warnings.warn(f"target training set is {ratio:.3f} of the reference set "
                          f"(expected {lo:.3f}..{hi:.3f})", DataRatioWarning)
    params, history = train_cnn(train, val, tcfg, acfg, init=master.params)
    meta = {"reference_train_patches": ref, "train_patches": len(train), "val_patches": len(val),
            "calibrated_from": master.provenance}
    model = _fit_head_and_forest(params, train, val, fcfg, tcfg, calibrated_tag(center), workers, meta)
    return model, history
