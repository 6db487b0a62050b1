"""Training, evaluation and inference loops.

All randomness derives from ``numpy.random.default_rng([seed, purpose, ...])``
keyed by epoch/step/sample, so a run is a pure function of (seed, config)
and resuming from an epoch checkpoint replays the unbroken trajectory.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from mist.autodiff import ParamStore, Tensor, no_grad, ops, shape_only
from mist.decoder import Ablation
from mist.harness import checkpoint as ckpt_mod
from mist.harness import config as config_mod
from mist.harness.config import RunConfig
from mist.harness.data import (
    SegSample,
    augment,
    batch_arrays,
    gen_synthetic,
    load_dataset,
    overlay,
    read_ppm,
    split,
    write_pgm,
    write_ppm,
)
from mist.harness.optim import adamw_step
from mist.loss import total_loss
from mist.metrics import Summary, evaluate_case, format_text, write_delimited
from mist.model import MIST

log = logging.getLogger(__name__)

_SHUFFLE, _AUGMENT, _DROPOUT = 1, 2, 3
LOG_NAME = "train_log.csv"


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    val_hd95: float


@dataclass
class TrainResult:
    model: MIST
    store: ParamStore
    history: List[EpochRecord]
    best_dice: float
    best_epoch: int
    out_dir: Optional[Path]


def build_model(cfg: RunConfig) -> MIST:
    return MIST(cfg.encoder, cfg.decoder, cfg.image_size, seed=cfg.seed)


def load_samples(cfg: RunConfig) -> List[SegSample]:
    if cfg.data.dir:
        return load_dataset(cfg.data.dir, cfg.decoder.n_classes, cfg.image_size)
    return gen_synthetic(cfg.seed, cfg.data.count, cfg.image_size, cfg.decoder.n_classes, cfg.data.shapes)


def predict(model: MIST, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Class probabilities [N,K,H,W] in eval mode."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.predict_proba(Tensor(images[i : i + batch_size])))
    return np.concatenate(out)


def evaluate_samples(model: MIST, samples: Sequence[SegSample], n_classes: int) -> Summary:
    if not samples:
        return Summary([])
    images, masks = batch_arrays(samples)
    probs = predict(model, images)
    return Summary([evaluate_case(p, m, n_classes, s.id) for p, m, s in zip(probs, masks, samples)])


def train_step(model: MIST, store: ParamStore, images: np.ndarray, masks: np.ndarray, cfg: RunConfig,
               rng: np.random.Generator) -> float:
    model.train()
    model.set_rng(rng)
    maps = model(Tensor(images))
    loss = total_loss(maps.deep_supervision(), masks, cfg.loss)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {store.step + 1}")
    loss.backward()
    adamw_step(store, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return value


def _epoch_batches(cfg: RunConfig, train: Sequence[SegSample], epoch: int):
    order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(len(train))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch = []
        for i in idx:
            s = train[i]
            if cfg.augment.enabled:
                a = cfg.augment
                s = augment(s, np.random.default_rng([cfg.seed, _AUGMENT, epoch, int(i)]), a.prob, a.rotation, a.zoom, a.shift)
            batch.append(s)
        yield batch


def train(
    cfg: RunConfig,
    out_dir=None,
    resume=None,
    samples: Optional[Sequence[SegSample]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Fit the model; keeps ``last.ckpt`` and the best-validation ``best.ckpt`` in ``out_dir``."""
    cfg = cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config_mod.save(cfg, out / "config.txt")
    data = list(samples) if samples is not None else load_samples(cfg)
    train_set, val_set = split(data, cfg.data.val_fraction, cfg.seed)

    model = build_model(cfg)
    store = model.param_store()
    start, best_dice, best_epoch = 0, float("-inf"), -1
    if resume is not None:
        ck = resume if isinstance(resume, ckpt_mod.Checkpoint) else ckpt_mod.load(resume)
        _check_compatible(ck.cfg, cfg)
        ck.restore(store)
        start, best_dice, best_epoch = ck.epoch + 1, ck.best_dice, ck.best_epoch

    history = []
    for epoch in range(start, cfg.epochs):
        losses = []
        for b, batch in enumerate(_epoch_batches(cfg, train_set, epoch)):
            images, masks = batch_arrays(batch)
            rng = np.random.default_rng([cfg.seed, _DROPOUT, epoch, b])
            losses.append(train_step(model, store, images, masks, cfg, rng))
        summary = evaluate_samples(model, val_set, cfg.decoder.n_classes)
        rec = EpochRecord(epoch, float(np.mean(losses)), summary.mean_dice, summary.mean_hd95)
        history.append(rec)
        improved = rec.val_dice > best_dice
        if improved:
            best_dice, best_epoch = rec.val_dice, epoch
        log.info("epoch %d loss %.6f val dice %.6f hd95 %.4f", epoch, rec.train_loss, rec.val_dice, rec.val_hd95)
        if out is not None:
            with open(out / LOG_NAME, "a") as fh:
                fh.write(f"{epoch},{rec.train_loss:.6f},{rec.val_dice:.6f},{rec.val_hd95:.6f}\n")
            ck = ckpt_mod.Checkpoint.from_store(cfg, store, epoch=epoch, best_dice=best_dice, best_epoch=best_epoch)
            ckpt_mod.save(ck, out / "last.ckpt")
            if improved:
                ckpt_mod.save(ck, out / "best.ckpt")
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, store, history, best_dice, best_epoch, out)


def _check_compatible(saved: RunConfig, current: RunConfig) -> None:
    # only the schedule length may differ when resuming
    if replace(saved, epochs=current.epochs, output_dir=current.output_dir) != current:
        raise ckpt_mod.CheckpointError("checkpoint was written with a different configuration")


def model_from_checkpoint(path) -> Tuple[MIST, ckpt_mod.Checkpoint]:
    ck = ckpt_mod.load(path)
    model = build_model(ck.cfg)
    ck.restore(model.param_store())
    return model, ck


def evaluate(checkpoint, samples: Optional[Sequence[SegSample]] = None, out_dir=None,
             cfg: Optional[RunConfig] = None, overlays: int = 0) -> Summary:
    """Per-case DICE/HD95 of the checkpoint on ``samples`` (default: its validation split)."""
    model, ck = model_from_checkpoint(checkpoint)
    if cfg is not None and replace(cfg, epochs=ck.cfg.epochs, output_dir=ck.cfg.output_dir) != ck.cfg:
        raise ckpt_mod.CheckpointError("evaluation config does not match the checkpoint")
    if samples is None:
        _, samples = split(load_samples(ck.cfg), ck.cfg.data.val_fraction, ck.cfg.seed)
    summary = evaluate_samples(model, samples, ck.cfg.decoder.n_classes)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(format_text(summary))
        with open(out / "metrics.csv", "w") as fh:
            write_delimited(summary, fh)
        if overlays:
            images, _ = batch_arrays(samples[:overlays])
            labels = predict(model, images).argmax(axis=1)
            for s, lab in zip(samples[:overlays], labels):
                write_ppm(out / f"{s.id}_truth.ppm", overlay(s.image, s.mask))
                write_ppm(out / f"{s.id}_pred.ppm", overlay(s.image, lab))
    return summary


def infer(checkpoint, image_path, out_dir) -> Tuple[Path, Path]:
    """Write ``<stem>_mask.pgm`` (class ids) and ``<stem>_overlay.ppm``."""
    model, ck = model_from_checkpoint(checkpoint)
    image = read_ppm(image_path)
    size = ck.cfg.image_size
    if image.shape[1:] != (size, size):
        raise ValueError(f"image is {image.shape[2]}x{image.shape[1]}, model expects {size}x{size}")
    labels = predict(model, image[None])[0].argmax(axis=0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    mask_path, overlay_path = out / f"{stem}_mask.pgm", out / f"{stem}_overlay.ppm"
    write_pgm(mask_path, labels)
    write_ppm(overlay_path, overlay(image, labels))
    return mask_path, overlay_path


# -- ablation grid and parameter counts ---------------------------------------------

DILATION_CHOICES = ((2, 3), (1, 2))


def ablation_grid():
    """All 16 switch combinations; the first is the default (best) setting."""
    for mixing, proj, dil, agg in itertools.product((True, False), ("conv", "linear"), DILATION_CHOICES, ("concat", "sum")):
        yield dict(attention_mixing=mixing, msa_projection=proj, dilations=dil, swc_aggregation=agg)


def with_switches(cfg: RunConfig, attention_mixing, msa_projection, dilations, swc_aggregation) -> RunConfig:
    ab = Ablation(attention_mixing, msa_projection, swc_aggregation)
    return replace(cfg, decoder=replace(cfg.decoder, dilations=tuple(dilations), ablation=ab))


def ablate(cfg: RunConfig, out_dir=None, samples=None) -> List[dict]:
    rows = []
    data = list(samples) if samples is not None else load_samples(cfg)
    for i, sw in enumerate(ablation_grid()):
        run_cfg = with_switches(cfg, **sw)
        run_dir = Path(out_dir) / f"run{i:02d}" if out_dir is not None else None
        res = train(run_cfg, run_dir, samples=data)
        final = res.history[-1]
        rows.append(dict(sw, params=res.model.num_parameters(), final_loss=final.train_loss,
                         best_dice=res.best_dice, val_hd95=final.val_hd95))
    if out_dir is not None:
        (Path(out_dir) / "ablation.txt").write_text(format_ablation(rows))
    return rows


def format_ablation(rows: Sequence[dict]) -> str:
    head = f"{'mixing':<7}{'msa':<8}{'dil':<6}{'agg':<8}{'params':>10}{'loss':>11}{'dice':>10}{'hd95':>10}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{'yes' if r['attention_mixing'] else 'no':<7}{r['msa_projection']:<8}"
            f"{'%d,%d' % tuple(r['dilations']):<6}{r['swc_aggregation']:<8}{r['params']:>10d}"
            f"{r['final_loss']:>11.4f}{r['best_dice']:>10.4f}{r['val_hd95']:>10.3f}"
        )
    return "\n".join(lines) + "\n"


def parameter_counts(cfg: RunConfig) -> dict:
    """Encoder/decoder/total parameters under conv and linear MSA projection (no weights allocated)."""
    out = {}
    with shape_only():
        for proj in ("conv", "linear"):
            c = replace(cfg, decoder=replace(cfg.decoder, ablation=replace(cfg.decoder.ablation, msa_projection=proj)))
            out[proj] = MIST(c.encoder, c.decoder, c.image_size, seed=None).parameter_breakdown()
    conv, lin = out["conv"]["total"], out["linear"]["total"]
    out["reduction_percent"] = 100.0 * (lin - conv) / lin
    return out
