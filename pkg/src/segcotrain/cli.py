"""Command-line surface.

Subcommands: toygen | lab-align | baseline | selftrain | cotrain |
pseudolabel | evaluate. Exit codes: 0 ok, 2 config error, 3 data error,
4 trainer protocol error. $SEGCOTRAIN_TRAINER overrides the external
trainer command and $SEGCOTRAIN_RUN_ROOT the run root.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from segcotrain import datagen, pipeline, recordio
from segcotrain.config import RunConfig
from segcotrain.core import DatasetSplit, LabelMap, ModelHandle
from segcotrain.errors import ConfigError, DataError, TrainerError
from segcotrain.labeling import (
    compute_class_thresholds,
    curriculum_fraction,
    run_pseudolabel,
    save_pseudolabel_set,
    ClassConfidenceSample,
)
from segcotrain.manifest import (
    EVAL_SUBSETS,
    SplitLoader,
    load_manifest,
    resolve_label_space,
    save_manifest,
)
from segcotrain.metrics import confusion_accumulate, iou_per_class, miou
from segcotrain.preprocess import (
    SamplingWeights,
    class_balance_weights,
    dataset_lab_stats,
    lab_align_image,
    load_image,
)
from segcotrain.trainer import ExternalTrainerSession, ToyTrainerSession, TrainerSession


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segcotrain")
    parser.add_argument("--config", help="run config JSON")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved config and exit")
    parser.add_argument("--jobs", type=int, default=1,
                        help="cap on internal worker count (current stages run serially)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("toygen", help="generate the synthetic source/target datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-count", type=int, default=200)
    p.add_argument("--target-count", type=int, default=200)
    p.add_argument("--eval-count", type=int, default=50)
    p.add_argument("--source-eval-count", type=int, default=50)

    p = sub.add_parser("lab-align", help="align a source manifest to target LAB statistics")
    p.add_argument("--manifest", required=True, help="source manifest to align")
    p.add_argument("--target-manifest", required=True, help="manifest providing target stats")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sample-size", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-balance", action="store_true",
                   help="annotate the output manifest with class-balance weights")

    p = sub.add_parser("baseline", help="train the source-only model")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("selftrain", help="run the self-training stage")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("cotrain", help="run the full co-training procedure")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("pseudolabel", help="pseudo-label a manifest with a trained model")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--model", default="final",
                   help="final | selftrain | a run-relative record path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cycle", type=int, default=None,
                   help="curriculum cycle for thresholds (default: K)")

    p = sub.add_parser("evaluate", help="per-class IoU / mIoU of predictions vs ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    p.add_argument("--gt", required=True, help="labeled manifest or directory of label PNGs")
    p.add_argument("--label-space", default="toy8")
    p.add_argument("--subset", default="all", help="all or a named subset (16, 13)")
    p.add_argument("--csv", default=None, help="write the per-class table as CSV")
    return parser


# --- run preparation ---------------------------------------------------------


def _load_config(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config)
    return RunConfig()


def _require_manifest(path: str | None, name: str):
    if not path:
        raise ConfigError(f"config is missing {name}")
    return load_manifest(path)


def _materialize_aligned_source(
    cfg: RunConfig, source: DatasetSplit, unlabeled: DatasetSplit, out_dir: Path
) -> tuple[DatasetSplit, SamplingWeights | None]:
    manifest_path = out_dir / "manifest.json"
    weights = class_balance_weights(source) if cfg.class_balance else None
    if not manifest_path.exists():
        src_stats = dataset_lab_stats(source, cfg.lab_sample_size, cfg.seed)
        tgt_stats = dataset_lab_stats(unlabeled, cfg.lab_sample_size, cfg.seed)
        entries = []
        for e in source.entries:
            aligned = lab_align_image(load_image(e.image_path), src_stats, tgt_stats)
            recordio.write_image_png(out_dir / f"{e.image_id}.png", aligned)
            rec = {"image_id": e.image_id, "image_path": f"{e.image_id}.png"}
            if e.label_path:
                from segcotrain.preprocess import load_label_map

                recordio.write_label_png(
                    out_dir / f"{e.image_id}_labels.png", load_label_map(e.label_path)
                )
                rec["label_path"] = f"{e.image_id}_labels.png"
            if weights is not None:
                rec["sampling_weight"] = weights.weights[e.image_id]
            entries.append(rec)
        save_manifest(manifest_path, "aligned-source", "toy8"
                      if source.label_space.num_classes == 8 else "cityscapes19",
                      entries, source.kind)
        recordio.write_record(
            out_dir / "stats.json",
            {
                "source": {"mean": src_stats.mean.tolist(), "std": src_stats.std.tolist(),
                           "sample_size": src_stats.sample_size},
                "target": {"mean": tgt_stats.mean.tolist(), "std": tgt_stats.std.tolist(),
                           "sample_size": tgt_stats.sample_size},
            },
        )
    aligned_split = load_manifest(manifest_path)
    return aligned_split, weights


class RunSetup:
    """Shared state for the training subcommands."""

    def __init__(self, cfg: RunConfig, run_dir: Path, resume: bool):
        self.cfg = cfg
        self.run_dir = run_dir
        if run_dir.exists() and any(run_dir.iterdir()) and not resume:
            raise ConfigError(
                f"run directory {run_dir} is not empty; pass --resume to continue it"
            )
        run_dir.mkdir(parents=True, exist_ok=True)
        recordio.write_record(run_dir / "config.json", cfg.to_dict())

        raw_source = _require_manifest(cfg.source_manifest, "source_manifest")
        self.unlabeled = _require_manifest(cfg.unlabeled_manifest, "unlabeled_manifest")
        self.eval_split = load_manifest(cfg.eval_manifest) if cfg.eval_manifest else None

        if cfg.lab_align:
            self.source, self.cb_weights = _materialize_aligned_source(
                cfg, raw_source, self.unlabeled, run_dir / "aligned_source"
            )
        else:
            self.source = raw_source
            self.cb_weights = class_balance_weights(raw_source) if cfg.class_balance else None

        self.loader = SplitLoader(self.source, self.unlabeled)
        self._sessions: list[TrainerSession] = []

    def session(self, branch: str) -> TrainerSession:
        store = self.run_dir / "trainer" / "store"
        if self.cfg.trainer == "toy":
            s: TrainerSession = ToyTrainerSession(
                store, self.source.label_space.num_classes, branch=branch
            )
        else:
            command = self.cfg.resolved_trainer_command()
            s = ExternalTrainerSession(
                self.run_dir / "trainer" / f"branch{branch}", store, command,
                num_classes=self.source.label_space.num_classes,
                void_id=self.source.label_space.void_id, branch=branch,
            )
        self._sessions.append(s)
        return s

    def close(self):
        for s in self._sessions:
            s.close()

    def context(self) -> pipeline.PipelineContext:
        cfg = self.cfg
        return pipeline.PipelineContext(
            source=self.source,
            unlabeled=self.unlabeled,
            st=cfg.self_train_params(),
            ct=cfg.co_train_params(),
            ct_curriculum=cfg.ct_curriculum(),
            trainer_config=cfg.trainer_config(),
            seed=cfg.seed,
            run_dir=self.run_dir,
            loader=self.loader,
            cb_weights=self.cb_weights,
            collab_source=cfg.collab_source,
            eval_split=self.eval_split,
        )


# --- subcommands -------------------------------------------------------------


def cmd_toygen(args) -> int:
    out = Path(args.out)
    datagen.generate_split(datagen.default_source_spec(), args.source_count,
                           args.seed, True, out / "source", "src")
    datagen.generate_split(datagen.default_target_spec(), args.target_count,
                           args.seed + 1, False, out / "target", "tgt")
    datagen.generate_split(datagen.default_target_spec(), args.eval_count,
                           args.seed + 2, True, out / "target_eval", "tev")
    datagen.generate_split(datagen.default_source_spec(), args.source_eval_count,
                           args.seed + 3, True, out / "source_eval", "sev")
    print(f"wrote toy datasets under {out}")
    return 0


def cmd_lab_align(args) -> int:
    source = load_manifest(args.manifest)
    target = load_manifest(args.target_manifest)
    cfg = RunConfig(lab_sample_size=args.sample_size, seed=args.seed,
                    class_balance=args.class_balance)
    _materialize_aligned_source(cfg, source, target, Path(args.out))
    print(f"wrote aligned dataset under {args.out}")
    return 0


def _print_eval(name_scores: list[tuple[str, float | None]], score: float) -> None:
    width = max(len(n) for n, _ in name_scores)
    for name, iou in name_scores:
        cell = "-" if iou is None else f"{iou * 100.0:6.2f}"
        print(f"  {name:<{width}}  {cell}")
    print(f"mIoU: {score:.2f}")


def cmd_baseline(args, cfg: RunConfig) -> int:
    setup = RunSetup(cfg, Path(args.run_dir), args.resume)
    try:
        session = setup.session("1")
        record_path = setup.run_dir / "baseline.json"
        if record_path.exists():
            model = ModelHandle(**recordio.read_record(record_path)["model"])
        else:
            model = session.baseline_train("baseline", cfg.trainer_config(), setup.source)
        metrics = None
        if setup.eval_split is not None:
            score, _ = pipeline.evaluate_model(session, model, setup.eval_split)
            metrics = {"miou": score}
            print(f"baseline mIoU: {score:.2f}")
        recordio.write_record(record_path, {"model": vars(model), "metrics": metrics})
    finally:
        setup.close()
    return 0


def cmd_selftrain(args, cfg: RunConfig) -> int:
    setup = RunSetup(cfg, Path(args.run_dir), args.resume)
    try:
        session = setup.session("1")
        ctx = setup.context()
        w_km, w_kM = pipeline.self_training_stage(ctx, session)
        summary: dict = {"models": {"K_m": vars(w_km), "K_M": vars(w_kM)}}
        if setup.eval_split is not None:
            for name, model in (("K_m", w_km), ("K_M", w_kM)):
                score, _ = pipeline.evaluate_model(session, model, setup.eval_split)
                summary.setdefault("metrics", {})[name] = {"miou": score}
                print(f"self-training W_{name} mIoU: {score:.2f}")
        recordio.write_record(setup.run_dir / "summary.json", summary)
    finally:
        setup.close()
    return 0


def cmd_cotrain(args, cfg: RunConfig) -> int:
    setup = RunSetup(cfg, Path(args.run_dir), args.resume)
    try:
        sessions = (setup.session("1"), setup.session("2"))
        ctx = setup.context()
        final = pipeline.co_training(ctx, sessions)
        summary: dict = {"final_model": vars(final)}
        if setup.eval_split is not None:
            score, _ = pipeline.evaluate_model(sessions[0], final, setup.eval_split)
            summary["metrics"] = {"miou": score}
            print(f"co-training final mIoU: {score:.2f}")
        recordio.write_record(setup.run_dir / "summary.json", summary)
    finally:
        setup.close()
    return 0


def _model_from_run(run_dir: Path, name: str) -> ModelHandle:
    if name == "final":
        rec = recordio.read_record(run_dir / "final" / "record.json")
        return ModelHandle(**rec["model"])
    if name == "selftrain":
        rec = recordio.read_record(run_dir / "summary.json")
        return ModelHandle(**rec["models"]["K_M"])
    rec = recordio.read_record(run_dir / name)
    if "model" in rec:
        return ModelHandle(**rec["model"])
    raise DataError(f"record {name} does not reference a model")


def cmd_pseudolabel(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run_dir)
    images = load_manifest(args.manifest)
    if images.kind == "labeled":
        raise DataError("pseudolabel expects an unlabeled manifest")
    model = _model_from_run(run_dir, args.model)
    store = run_dir / "trainer" / "store"
    if cfg.trainer == "toy":
        session: TrainerSession = ToyTrainerSession(store, images.label_space.num_classes)
    else:
        session = ExternalTrainerSession(
            run_dir / "trainer" / "pseudolabel", store, cfg.resolved_trainer_command(),
            num_classes=images.label_space.num_classes, void_id=images.label_space.void_id,
        )
    try:
        k = cfg.K if args.cycle is None else args.cycle
        pls, vct = run_pseudolabel(session.predict, model, images, k, cfg.ct_curriculum())
        save_pseudolabel_set(Path(args.out), pls, vct)
        print(f"wrote {len(pls)} pseudo-labeled images under {args.out}")
    finally:
        session.close()
    return 0


def _collect_pairs(pred_dir: Path, gt: str) -> list[tuple[Path, Path]]:
    preds = sorted(p for p in pred_dir.glob("*.png") if not p.name.endswith("_conf.png"))
    if not preds:
        raise DataError(f"no label PNGs found under {pred_dir}")
    gt_path = Path(gt)
    pairs = []
    if gt_path.is_dir():
        for p in preds:
            q = gt_path / p.name
            if not q.exists():
                raise DataError(f"missing ground truth for {p.name} under {gt_path}")
            pairs.append((p, q))
    else:
        split = load_manifest(gt_path)
        by_id = {e.image_id: e for e in split.entries}
        for p in preds:
            image_id = p.stem.removesuffix("_labels")
            entry = by_id.get(image_id)
            if entry is None or entry.label_path is None:
                raise DataError(f"no labeled manifest entry for prediction {p.name}")
            pairs.append((p, Path(entry.label_path)))
    return pairs


def cmd_evaluate(args) -> int:
    space = resolve_label_space(args.label_space)
    subset = None
    if args.subset != "all":
        named = EVAL_SUBSETS.get(args.label_space, {})
        if args.subset not in named:
            raise ConfigError(
                f"unknown subset {args.subset!r} for {args.label_space}; known: {sorted(named)}"
            )
        subset = named[args.subset]

    cm = None
    for pred_path, gt_path in _collect_pairs(Path(args.pred), args.gt):
        pred = LabelMap(recordio.read_label_png(pred_path))
        gt_map = LabelMap(recordio.read_label_png(gt_path))
        cm = confusion_accumulate(pred, gt_map, space, cm)
    ious = iou_per_class(cm)
    score = miou(ious, subset) * 100.0

    rows: list[tuple[str, float | None]] = []
    indices = subset if subset is not None else range(space.num_classes)
    for c in indices:
        rows.append((space.class_names[c], float(ious.values[c]) if ious.present[c] else None))
    _print_eval(rows, score)
    if args.csv:
        lines = ["class,iou"]
        for name, iou in rows:
            lines.append(f"{name},{'-' if iou is None else f'{iou * 100.0:.2f}'}")
        lines.append(f"mIoU,{score:.2f}")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.print_config:
            print(_load_config(args).dumps(), end="")
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        if args.command == "toygen":
            return cmd_toygen(args)
        if args.command == "lab-align":
            return cmd_lab_align(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        cfg = _load_config(args)
        if args.command == "baseline":
            return cmd_baseline(args, cfg)
        if args.command == "selftrain":
            return cmd_selftrain(args, cfg)
        if args.command == "cotrain":
            return cmd_cotrain(args, cfg)
        if args.command == "pseudolabel":
            return cmd_pseudolabel(args, cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainerError as exc:
        print(f"trainer error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
