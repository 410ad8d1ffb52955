"""Orchestration of the self-training stage, model collaboration, and co-training loop.

Run directory layout (all records canonical JSON, paths run-root relative):

    run/<name>/
      selftrain/                    co-training's inner self-training stage
        baseline.json
        cycle_<k>/branch1/          selected pseudo-label set + cycle record
      cycle_<k>/{branch1,branch2}/  exchanged pseudo-label sets per branch
      cycle_<k>/record.json
      final/                        full-set pseudo-labels + final model record
      trainer/                      session working dirs and the shared model store

Every random draw derives its generator from (seed, stage tag, cycle), so an
interrupted run resumed from its records replays bit-identically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from segcotrain.core import (
    ConfidenceStack,
    CoTrainParams,
    CurriculumParams,
    DatasetSplit,
    LabelMap,
    ModelHandle,
    SelfTrainParams,
    ThresholdVector,
)
from segcotrain.errors import ConfigError
from segcotrain.labeling import (
    PseudoLabelSet,
    apply_thresholds,
    combine_void,
    compute_class_thresholds,
    curriculum_fraction,
    fuse,
    load_pseudolabel_set,
    run_pseudolabel,
    save_pseudolabel_set,
    select_top_n,
    ClassConfidenceSample,
)
from segcotrain.manifest import SplitLoader
from segcotrain.metrics import IoUResult, confusion_accumulate, iou_per_class, miou
from segcotrain.preprocess import SamplingWeights, load_label_map
from segcotrain import recordio
from segcotrain import trainer as trainer_ops
from segcotrain.trainer import TrainerConfig, TrainerSession

logger = logging.getLogger(__name__)

# rng stage tags
_DRAW_SELFTRAIN = 1
_DRAW_COTRAIN = 2
_BATCH_SELFTRAIN = 3
_BATCH_COTRAIN_B1 = 4
_BATCH_COTRAIN_B2 = 5
_BATCH_FINAL = 6


def _rng(seed: int, stage: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stage, k])


def draw_candidates(rng: np.random.Generator, split: DatasetSplit, N: int) -> DatasetSplit:
    """Seeded N-image draw without replacement, id-ordered for determinism."""
    entries = sorted(split.entries, key=lambda e: e.image_id)
    picks = sorted(rng.choice(len(entries), size=N, replace=False).tolist())
    return DatasetSplit(split.kind, tuple(entries[i] for i in picks), split.label_space)


def sort_rank(v) -> np.ndarray:
    """Class ids sorted by value descending, ties by ascending class id."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(sorted(range(v.shape[0]), key=lambda c: (-v[c], c)), dtype=np.int64)


@dataclass(frozen=True)
class ClassImageIndex:
    """Per class, the (image_id, image_confidence) list of images containing it.

    Lists are ordered by descending confidence (ties by ascending id) so the
    collaboration exchange admits the most confident images first.
    """

    lists: tuple[tuple[tuple[str, float], ...], ...]


def class_image_stats(pls: Mapping[str, object], num_classes: int) -> ClassImageIndex:
    buckets: list[list[tuple[str, float]]] = [[] for _ in range(num_classes)]
    for image_id in sorted(pls):
        im = pls[image_id]
        present = np.unique(im.labels.values)
        conf = float(im.image_confidence)
        for c in present:
            if c < num_classes:
                buckets[int(c)].append((image_id, conf))
    ordered = tuple(
        tuple(sorted(b, key=lambda t: (-t[1], t[0]))) for b in buckets
    )
    return ClassImageIndex(lists=ordered)


def _exchange_direction(
    donor_set: PseudoLabelSet,
    donor_index: ClassImageIndex,
    class_order: np.ndarray,
    n: int,
    lam: float,
) -> PseudoLabelSet:
    """Walk classes in the given order, admitting donor images above the dynamic threshold."""
    out: PseudoLabelSet = {}
    for c in class_order:
        if len(out) >= n:
            break
        lst = donor_index.lists[int(c)]
        if not lst:
            continue
        confs = [conf for _, conf in lst]
        t_c = lam * max(confs) + (1.0 - lam) * min(confs)
        for image_id, conf in lst:
            if len(out) >= n:
                break
            if conf > t_c and image_id not in out:
                out[image_id] = donor_set[image_id]
    return out


def collaboration_exchange(
    set1: PseudoLabelSet,
    vct1: ThresholdVector,
    set2: PseudoLabelSet,
    vct2: ThresholdVector,
    n: int,
    lam: float,
    mode: str = "cross",
) -> tuple[PseudoLabelSet, PseudoLabelSet]:
    """Exchange pseudo-labeled images between branches.

    The default cross mode feeds each branch from the *other* branch's set,
    visiting first the classes on which the donor branch is more confident
    (largest threshold advantage); per class, images pass when their
    image-level confidence exceeds t_c = lam*max + (1-lam)*min over that
    class's list. The listing mode reproduces the literal single-branch
    reading for comparison: each branch re-selects from its own set.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must be in [0, 1]")
    if mode not in ("cross", "listing"):
        raise ConfigError(f"unknown collab_source mode {mode!r}")
    nc = vct1.num_classes
    idx1 = class_image_stats(set1, nc)
    idx2 = class_image_stats(set2, nc)
    adv1 = sort_rank(vct1.per_class.astype(np.float64) - vct2.per_class.astype(np.float64))
    adv2 = sort_rank(vct2.per_class.astype(np.float64) - vct1.per_class.astype(np.float64))

    if mode == "cross":
        # new set for branch 1 comes from branch 2's images, and vice versa
        new1 = _exchange_direction(set2, idx2, adv2, n, lam)
        new2 = _exchange_direction(set1, idx1, adv1, n, lam)
    else:
        new1 = _exchange_direction(set1, idx1, adv2, n, lam)
        new2 = _exchange_direction(set2, idx2, adv1, n, lam)

    for name, new in (("branch1", new1), ("branch2", new2)):
        if len(new) < n:
            logger.warning("collaboration produced %d < n=%d images for %s", len(new), n, name)
    return new1, new2


def ensemble_confidence(a: ConfidenceStack, b: ConfidenceStack) -> ConfidenceStack:
    """Elementwise mean of two normalized stacks (still normalized per pixel)."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"stack shape mismatch: {a.values.shape} vs {b.values.shape}")
    return ConfidenceStack((a.values + b.values) / np.float32(2.0))


def evaluate_model(
    session: TrainerSession,
    model: ModelHandle,
    eval_split: DatasetSplit,
    subset: tuple[int, ...] | None = None,
) -> tuple[float, IoUResult]:
    """Plain argmax predictions against the split's labels; returns (mIoU, per-class)."""
    space = eval_split.label_space
    stacks = session.predict(model, eval_split)
    cm = None
    for entry, stack in zip(eval_split.entries, stacks):
        pred = LabelMap(stack.values.argmax(axis=0).astype(np.uint8))
        gt = LabelMap(load_label_map(entry.label_path))
        cm = confusion_accumulate(pred, gt, space, cm)
    ious = iou_per_class(cm)
    return miou(ious, subset) * 100.0, ious


@dataclass
class PipelineContext:
    """Everything the orchestrators need, bundled once."""

    source: DatasetSplit
    unlabeled: DatasetSplit
    st: SelfTrainParams
    trainer_config: TrainerConfig
    seed: int
    run_dir: Path
    loader: SplitLoader
    ct: CoTrainParams | None = None
    ct_curriculum: CurriculumParams | None = None
    cb_weights: SamplingWeights | None = None
    collab_source: str = "cross"
    eval_split: DatasetSplit | None = None
    eval_each_cycle: bool = False
    trace: list[str] = field(default_factory=list)

    def metric_snapshot(self, session: TrainerSession, model: ModelHandle):
        if self.eval_split is None or not self.eval_each_cycle:
            return None
        score, _ = evaluate_model(session, model, self.eval_split)
        return {"miou": score}


def _vct_record(vct: ThresholdVector) -> dict:
    return {
        "per_class": [float(t) for t in vct.per_class],
        "curriculum_fraction": vct.curriculum_fraction,
        "cycle": vct.cycle,
    }


def self_training_stage(
    ctx: PipelineContext, session: TrainerSession, stage_dir: Path | None = None
) -> tuple[ModelHandle, ModelHandle]:
    """Single-model self-training loop producing the two snapshot models.

    Trains W_0 on the source split, then for k = 0..K_M draws N candidates,
    pseudo-labels them with the current model, keeps the top-n, fuses into the
    cumulative set, and fine-tunes from W_0. Snapshots at K_m and K_M are
    returned. Completed cycles resume from their persisted records.
    """
    st = ctx.st
    if st.N > len(ctx.unlabeled):
        raise ConfigError(f"N={st.N} exceeds the unlabeled pool ({len(ctx.unlabeled)})")
    stage_dir = ctx.run_dir if stage_dir is None else stage_dir
    space = ctx.source.label_space

    baseline_rec = stage_dir / "baseline.json"
    if baseline_rec.exists():
        rec = recordio.read_record(baseline_rec)
        w0 = ModelHandle(**rec["model"])
    else:
        w0 = trainer_ops.baseline_train(session, ctx.trainer_config, ctx.source, tag="st_w0")
        recordio.write_record(baseline_rec, {"model": vars(w0)})
    ctx.trace.append("selftrain:baseline")

    fused: PseudoLabelSet = {}
    current = w0
    w_km = w_kM = None
    for k in range(st.K_M + 1):
        cdir = stage_dir / f"cycle_{k:02d}" / "branch1"
        record_path = stage_dir / f"cycle_{k:02d}" / "record.json"
        if record_path.exists():
            rec = recordio.read_record(record_path)
            selected, _ = load_pseudolabel_set(cdir, void_id=space.void_id)
            fused = fuse(fused, selected)
            current = ModelHandle(**rec["model"])
        else:
            subset = draw_candidates(_rng(ctx.seed, _DRAW_SELFTRAIN, k), ctx.unlabeled, st.N)
            candidates, vct = run_pseudolabel(
                session.predict, current, subset, k, st.T, source_model="1"
            )
            selected = select_top_n(candidates, st.n)
            fused = fuse(fused, selected)
            save_pseudolabel_set(cdir, selected, vct)
            current = trainer_ops.finetune(
                session,
                w0,
                ctx.trainer_config,
                ctx.source,
                fused,
                st.M_df,
                vct,
                loader=ctx.loader,
                rng=_rng(ctx.seed, _BATCH_SELFTRAIN, k),
                tag=f"st_c{k:02d}",
                collage=True,
                cb_weights=ctx.cb_weights,
            )
            recordio.write_record(
                record_path,
                {
                    "cycle": k,
                    "thresholds": {"branch1": _vct_record(vct)},
                    "selected": sorted(selected),
                    "fused_size": len(fused),
                    "model": vars(current),
                    "metrics": ctx.metric_snapshot(session, current),
                },
            )
        ctx.trace.append(f"selftrain:cycle{k}")
        if k == st.K_m:
            w_km = current
        if k == st.K_M:
            w_kM = current
    assert w_km is not None and w_kM is not None
    return w_km, w_kM


def _predict_stacks(
    selector: str,
    sessions: tuple[TrainerSession, TrainerSession],
    models: tuple[ModelHandle, ModelHandle],
    images: DatasetSplit,
) -> list[ConfidenceStack]:
    if selector == "branch1":
        return sessions[0].predict(models[0], images)
    if selector == "branch2":
        return sessions[1].predict(models[1], images)
    stacks1 = sessions[0].predict(models[0], images)
    stacks2 = sessions[1].predict(models[1], images)
    return [ensemble_confidence(a, b) for a, b in zip(stacks1, stacks2)]


def final_training(
    ctx: PipelineContext,
    sessions: tuple[TrainerSession, TrainerSession],
    models: tuple[ModelHandle, ModelHandle],
    cycle: int,
) -> ModelHandle:
    """Pseudo-label the full unlabeled pool and train a fresh model on the mix.

    The selected predictor (one branch or the confidence-averaging ensemble)
    labels every unlabeled image at the most permissive curriculum fraction
    reached; training restarts from initial weights with the collage disabled
    but mini-batch mixing still on.
    """
    assert ctx.ct is not None
    final_dir = ctx.run_dir / "final"
    record_path = final_dir / "record.json"
    if record_path.exists():
        rec = recordio.read_record(record_path)
        return ModelHandle(**rec["model"])

    w = ctx.ct.w
    space = ctx.unlabeled.label_space
    T = ctx.ct_curriculum or ctx.st.T
    tag = {"ensemble": "ensemble", "branch1": "1", "branch2": "2"}[w]
    stacks = _predict_stacks(w, sessions, models, ctx.unlabeled)
    sample = ClassConfidenceSample.build(stacks, space.num_classes)
    p = curriculum_fraction(cycle, T)
    vct = compute_class_thresholds(sample, p, T, cycle=cycle)
    full_set: PseudoLabelSet = {}
    for entry, stack in zip(ctx.unlabeled.entries, stacks):
        full_set[entry.image_id] = apply_thresholds(
            stack, vct, image_id=entry.image_id, source_cycle=cycle,
            source_model=tag, void_id=space.void_id,
        )
    save_pseudolabel_set(final_dir / "pseudolabels", full_set, vct)
    ctx.trace.append("final:pseudolabel")

    model = trainer_ops.finetune(
        sessions[0],
        None,  # fresh model from initial weights
        ctx.trainer_config,
        ctx.source,
        full_set,
        ctx.st.M_df,
        vct,
        loader=ctx.loader,
        rng=_rng(ctx.seed, _BATCH_FINAL),
        tag="final",
        collage=False,
        cb_weights=ctx.cb_weights,
        n_batches=ctx.trainer_config.final_batches,
    )
    metrics = None
    if ctx.eval_split is not None:
        score, _ = evaluate_model(sessions[0], model, ctx.eval_split)
        metrics = {"miou": score}
    recordio.write_record(
        record_path,
        {"model": vars(model), "w": w, "pseudo_size": len(full_set), "metrics": metrics},
    )
    ctx.trace.append("final:train")
    return model


def co_training(
    ctx: PipelineContext,
    sessions: tuple[TrainerSession, TrainerSession],
    selftrain_session: TrainerSession | None = None,
) -> ModelHandle:
    """The full two-model procedure: self-training stage, collaboration loop, final training."""
    if ctx.ct is None:
        raise ConfigError("co_training needs CoTrainParams")
    st, ct = ctx.st, ctx.ct
    space = ctx.unlabeled.label_space

    w01, w02 = self_training_stage(
        ctx, selftrain_session or sessions[0], stage_dir=ctx.run_dir / "selftrain"
    )
    ctx.trace.append("cotrain:init")

    fused1: PseudoLabelSet = {}
    fused2: PseudoLabelSet = {}
    w1, w2 = w01, w02
    for k in range(ct.K + 1):
        cdir = ctx.run_dir / f"cycle_{k:02d}"
        record_path = cdir / "record.json"
        if record_path.exists():
            rec = recordio.read_record(record_path)
            new1, _ = load_pseudolabel_set(cdir / "branch1", void_id=space.void_id)
            new2, _ = load_pseudolabel_set(cdir / "branch2", void_id=space.void_id)
            fused1 = fuse(fused1, new1)
            fused2 = fuse(fused2, new2)
            w1 = ModelHandle(**rec["models"]["branch1"])
            w2 = ModelHandle(**rec["models"]["branch2"])
            ctx.trace.append(f"cotrain:cycle{k}:resumed")
            continue

        T_ct = ctx.ct_curriculum or st.T
        subset = draw_candidates(_rng(ctx.seed, _DRAW_COTRAIN, k), ctx.unlabeled, st.N)
        set1, vct1 = run_pseudolabel(sessions[0].predict, w1, subset, k, T_ct, source_model="1")
        set2, vct2 = run_pseudolabel(sessions[1].predict, w2, subset, k, T_ct, source_model="2")
        ctx.trace.append(f"cotrain:cycle{k}:run")

        combined1: PseudoLabelSet = {}
        combined2: PseudoLabelSet = {}
        for image_id in set1:
            a, b = combine_void(set1[image_id], set2[image_id])
            combined1[image_id] = a
            combined2[image_id] = b
        ctx.trace.append(f"cotrain:cycle{k}:combine")

        new1, new2 = collaboration_exchange(
            combined1, vct1, combined2, vct2, st.n, ct.lam, mode=ctx.collab_source
        )
        ctx.trace.append(f"cotrain:cycle{k}:collaborate")

        fused1 = fuse(fused1, new1)
        fused2 = fuse(fused2, new2)
        save_pseudolabel_set(cdir / "branch1", new1, vct1)
        save_pseudolabel_set(cdir / "branch2", new2, vct2)

        w1 = trainer_ops.finetune(
            sessions[0], w01, ctx.trainer_config, ctx.source, fused1, st.M_df, vct1,
            loader=ctx.loader, rng=_rng(ctx.seed, _BATCH_COTRAIN_B1, k),
            tag=f"ct_c{k:02d}_b1", collage=True, cb_weights=ctx.cb_weights,
        )
        w2 = trainer_ops.finetune(
            sessions[1], w02, ctx.trainer_config, ctx.source, fused2, st.M_df, vct2,
            loader=ctx.loader, rng=_rng(ctx.seed, _BATCH_COTRAIN_B2, k),
            tag=f"ct_c{k:02d}_b2", collage=True, cb_weights=ctx.cb_weights,
        )
        ctx.trace.append(f"cotrain:cycle{k}:train")

        recordio.write_record(
            record_path,
            {
                "cycle": k,
                "thresholds": {"branch1": _vct_record(vct1), "branch2": _vct_record(vct2)},
                "exchanged": {"branch1": sorted(new1), "branch2": sorted(new2)},
                "fused_size": {"branch1": len(fused1), "branch2": len(fused2)},
                "models": {"branch1": vars(w1), "branch2": vars(w2)},
                "metrics": {
                    "branch1": ctx.metric_snapshot(sessions[0], w1),
                    "branch2": ctx.metric_snapshot(sessions[1], w2),
                },
            },
        )

    return final_training(ctx, sessions, (w1, w2), cycle=ct.K)
