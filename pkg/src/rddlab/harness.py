"""Teacher pretraining, student distillation, ablation grids and map export."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import rdd
from . import segmodel as sm
from .config import ExperimentConfig
from .metrics import ConfusionMatrix, MetricsWriter, accumulate, miou, per_class_iou, pixel_accuracy
from .synth import SegBatch, apply_hflip, epoch_order, flip_mask, generate, materialize

log = logging.getLogger(__name__)

METHODS = ("baseline_ce", "kd_only", "rdd", "rdd_plus_at")
GRIDS = {
    "p": [0.0, 0.1, 0.2, 0.3],
    "t": [0.60, 0.65, 0.70, 0.75, 0.80],
    "mode": ["XOR", "AND", "OR", "STRICT"],
}
TRAIN_LOG_COLUMNS = [
    "iter", "stage", "lr", "loss_total", "loss_task_weighted", "loss_kd", "loss_extras",
    "mean_rd", "active_fraction", "empty_mask",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class RunRecord:
    config: dict
    method: str
    seed: int
    metrics: list[dict]
    checkpoint: str
    wall_clock: float
    stage_transition: int | None
    run_dir: str
    empty_mask_events: int = 0
    stage_counts: dict = field(default_factory=dict)

    @property
    def final_miou(self) -> float:
        return self.metrics[-1]["miou"]

    def manifest(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "checkpoint": self.checkpoint,
            "wall_clock_s": self.wall_clock,
            "stage_transition_iter": self.stage_transition,
            "final_miou": self.final_miou,
            "empty_mask_events": self.empty_mask_events,
            "stage_counts": self.stage_counts,
        }


# --------------------------------------------------------------------------
# data plumbing


class _Data:
    """Materialised train/val sets, shared between runs of one config."""

    _cache: dict = {}

    def __init__(self, config: ExperimentConfig):
        key = (repr(config.scene), config.train_size, config.val_size)
        if key not in self._cache:
            self._cache.clear()
            self._cache[key] = (
                materialize(config.scene, "train", config.train_size),
                materialize(config.scene, "val", config.val_size),
            )
        self.train, self.val = self._cache[key]


def _batches(data: SegBatch, config: ExperimentConfig, seed: int) -> Iterator[SegBatch]:
    n = len(data.indices)
    bs = config.batch_size
    epoch = 0
    while True:
        order = epoch_order(n, "train", seed, epoch)
        # drop the ragged tail so every step sees a full batch
        for b, start in enumerate(range(0, n - bs + 1 if n >= bs else 1, bs)):
            idx = order[start : start + bs]
            batch = SegBatch(data.images[idx], data.labels[idx], data.clean_labels[idx], idx)
            if config.scene.hflip:
                batch = apply_hflip(batch, flip_mask(len(idx), seed, epoch, b))
            yield batch
        epoch += 1


def evaluate(params: sm.Params, config: ExperimentConfig, val: SegBatch | None = None) -> dict:
    """mIoU / pixel accuracy of the primary head against clean validation labels."""
    if val is None:
        val = _Data(config).val
    cm = ConfusionMatrix(config.scene.num_classes)
    bs = config.eval_batch_size
    with ad.no_grad():
        for start in range(0, len(val.indices), bs):
            out = sm.forward(params, val.images[start : start + bs], want_aux=False)
            accumulate(cm, out.primary.data.argmax(axis=1), val.clean_labels[start : start + bs])
    iou = per_class_iou(cm)
    return {"miou": miou(cm), "pixel_acc": pixel_accuracy(cm), "iou": iou, "cm": cm}


def _metric_row(it: int, stage: str, ev: dict, diag: dict, num_classes: int) -> dict:
    row = {"iter": it, "stage": stage, "miou": ev["miou"], "pixel_acc": ev["pixel_acc"]}
    for c in range(num_classes):
        row[f"iou_{c}"] = float(ev["iou"][c])
    nan = float("nan")
    for k in ("mean_rd", "active_fraction", "loss_total", "loss_task_weighted", "loss_kd", "loss_extras"):
        row[k] = float(diag.get(k, nan))
    return row


class _TrainLog:
    def __init__(self, path: Path):
        self.fh = path.open("w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(TRAIN_LOG_COLUMNS)

    def write(self, row: dict) -> None:
        self.writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in TRAIN_LOG_COLUMNS])

    def close(self) -> None:
        self.fh.close()


def _check_finite(loss: ad.DiffTensor, it: int) -> None:
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingDiverged(it, v)


def _write_manifest(run_dir: Path, payload: dict) -> None:
    (run_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# --------------------------------------------------------------------------
# teacher


def pretrain_teacher(config: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None) -> Path:
    """Train the dual-head teacher with CE(primary) + w * CE(aux); returns the checkpoint path."""
    config.validate()
    seed = config.teacher_seed if seed is None else seed
    run_dir = Path(out_dir) if out_dir else Path(config.output_dir) / "teacher" / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    data = _Data(config)
    params = sm.build(config.teacher_spec, seed)
    total = config.resolved_teacher_iters
    C = config.scene.num_classes
    writer = MetricsWriter(run_dir / "metrics.csv", C)
    tlog = _TrainLog(run_dir / "train_log.csv")
    t0 = time.perf_counter()
    rows = []

    ev = evaluate(params, config, data.val)
    rows.append(_metric_row(0, "init", ev, {}, C))
    writer.write(rows[-1])
    opt = config.optimizer
    stream = _batches(data.train, config, seed)
    ones = None
    try:
        for it in range(1, total + 1):
            batch = next(stream)
            lr = sm.poly_lr(it - 1, total, opt.base_lr)
            with ad.Tape():
                out = sm.forward(params, batch.images, want_aux=True)
                if ones is None or ones.shape != batch.labels.shape:
                    ones = np.ones(batch.labels.shape)
                ce_main = rdd.weighted_task_loss(out.primary, batch.labels, ones)
                ce_aux = rdd.weighted_task_loss(out.auxiliary, batch.labels, ones)
                loss = ad.add(ce_main, ad.mul(ce_aux, config.teacher_aux_weight))
                _check_finite(loss, it)
                ad.backward(loss)
            sm.sgd_step(params, lr, opt.momentum, opt.weight_decay)
            diag = {
                "loss_total": loss.item(), "loss_task_weighted": ce_main.item(),
                "loss_kd": 0.0, "loss_extras": config.teacher_aux_weight * ce_aux.item(),
                "mean_rd": 1.0, "active_fraction": 1.0,
            }
            tlog.write({"iter": it, "stage": "PRETRAIN", "lr": lr, "empty_mask": 0, **diag})
            if it % config.eval_every == 0 or it == total:
                ev = evaluate(params, config, data.val)
                rows.append(_metric_row(it, "PRETRAIN", ev, diag, C))
                writer.write(rows[-1])
                log.info("teacher iter %d  loss %.4f  mIoU %.4f", it, diag["loss_total"], ev["miou"])
    finally:
        tlog.close()

    ckpt = sm.save_checkpoint(params, run_dir / "teacher.ckpt")
    _write_manifest(run_dir, {
        "role": "teacher", "seed": seed, "config": config.to_dict(), "checkpoint": str(ckpt),
        "wall_clock_s": time.perf_counter() - t0, "initial_miou": rows[0]["miou"],
        "final_miou": rows[-1]["miou"],
    })
    return ckpt


# --------------------------------------------------------------------------
# student


def _teacher_outputs(teacher: sm.Params, images: np.ndarray, batch: int = 16):
    prim, aux = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            out = sm.forward(teacher, images[s : s + batch], want_aux=teacher.spec.has_aux_head)
            prim.append(out.primary.data)
            aux.append(out.auxiliary.data if out.auxiliary is not None else None)
    aux_arr = np.concatenate(aux) if aux and aux[0] is not None else None
    return np.concatenate(prim), aux_arr


def _at_pairs(student_feats, teacher_feats):
    k = len(student_feats)
    return list(student_feats), list(teacher_feats[-k:])


def _at_betas(student_feats, teacher_feats, base: float) -> list[float]:
    betas = []
    for fs, ft in zip(student_feats, teacher_feats):
        size = max(fs.shape[2], ft.shape[2])
        betas.append(base / (size * size * fs.shape[0]))
    return betas


def distill(
    config: ExperimentConfig,
    teacher_checkpoint: str | Path,
    method: str = "rdd",
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Train a student with one of :data:`METHODS` and persist its run record."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    config.validate()
    seed = config.seeds[0] if seed is None else seed
    dcfg = config.distill
    teacher = sm.load_checkpoint(teacher_checkpoint, requires_grad=False)
    if teacher.spec.num_classes != config.scene.num_classes:
        raise ValueError("teacher checkpoint num_classes does not match scene config")
    uses_rdd = method in ("rdd", "rdd_plus_at")
    if uses_rdd and dcfg.tfe_iters > 0 and not teacher.spec.has_aux_head:
        raise ValueError(f"method {method!r} with p > 0 needs a teacher with an auxiliary head")

    run_dir = Path(out_dir) if out_dir else Path(config.output_dir) / method / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    data = _Data(config)
    C = config.scene.num_classes
    params = sm.build(config.student_spec, seed)
    total = config.total_iters
    opt = config.optimizer

    live_teacher = config.scene.hflip or method == "rdd_plus_at"
    if not live_teacher:
        t_prim, t_aux = _teacher_outputs(teacher, data.train.images)
        tfe_all = rdd.rd_tfe(t_prim, t_aux).values if (uses_rdd and t_aux is not None) else None

    writer = MetricsWriter(run_dir / "metrics.csv", C)
    tlog = _TrainLog(run_dir / "train_log.csv")
    t0 = time.perf_counter()
    rows = []
    ev = evaluate(params, config, data.val)
    rows.append(_metric_row(0, "init", ev, {}, C))
    writer.write(rows[-1])

    stream = _batches(data.train, config, seed)
    stage_counts: dict[str, int] = {}
    empty_events = 0
    ones = None
    try:
        for it in range(1, total + 1):
            batch = next(stream)
            lr = sm.poly_lr(it - 1, total, opt.base_lr)
            if live_teacher:
                with ad.no_grad():
                    t_out, t_feats = sm.forward(teacher, batch.images, want_aux=teacher.spec.has_aux_head,
                                                return_features=True)
                teacher_pair = sm.LogitPair(t_out.primary.data,
                                            None if t_out.auxiliary is None else t_out.auxiliary.data)
                tfe_map = None
            else:
                idx = batch.indices
                teacher_pair = sm.LogitPair(t_prim[idx], None if t_aux is None else t_aux[idx])
                tfe_map = rdd.DifficultyMap(tfe_all[idx], rdd.Stage.TFE) if tfe_all is not None else None

            with ad.Tape():
                if method == "rdd_plus_at":
                    out, s_feats = sm.forward(params, batch.images, want_aux=False, return_features=True)
                else:
                    out = sm.forward(params, batch.images, want_aux=False)
                zs = out.primary
                if uses_rdd:
                    hooks = {}
                    if method == "rdd_plus_at":
                        fs, ft = _at_pairs(s_feats, t_feats)
                        betas = _at_betas(fs, ft, config.at_beta)
                        hooks["at"] = lambda: rdd.at_hook(fs, ft, betas)
                    bd = rdd.rdd_total_loss(it, dcfg, out, teacher_pair, batch.labels, hooks, tfe_map)
                    stage = bd.stage.value
                    loss = bd.total
                    diag = {**bd.scalars(), "mean_rd": bd.mean_rd, "active_fraction": bd.active_pixel_fraction}
                    empty = int(bd.empty_mask)
                else:
                    if ones is None or ones.shape != batch.labels.shape:
                        ones = np.ones(batch.labels.shape)
                    task = rdd.weighted_task_loss(zs, batch.labels, ones)
                    if method == "kd_only":
                        kd = rdd.pixelwise_kd_loss(zs, teacher_pair.primary, dcfg.T)
                        loss = ad.add(task, kd)
                        stage = "KD"
                    else:
                        kd = None
                        loss = task
                        stage = "CE"
                    diag = {
                        "loss_total": loss.item(), "loss_task_weighted": task.item(),
                        "loss_kd": kd.item() if kd is not None else 0.0, "loss_extras": 0.0,
                        "mean_rd": 1.0, "active_fraction": 1.0,
                    }
                    empty = 0
                _check_finite(loss, it)
                ad.backward(loss)
            sm.sgd_step(params, lr, opt.momentum, opt.weight_decay)
            stage_counts[stage] = stage_counts.get(stage, 0) + 1
            if empty:
                empty_events += 1
                log.info("iter %d: TSE mask empty; only distillation terms contribute", it)
            tlog.write({"iter": it, "stage": stage, "lr": lr, "empty_mask": empty, **diag})
            if it % config.eval_every == 0 or it == total:
                ev = evaluate(params, config, data.val)
                rows.append(_metric_row(it, stage, ev, diag, C))
                writer.write(rows[-1])
                log.info("%s seed %d iter %d  loss %.4f  mIoU %.4f", method, seed, it, diag["loss_total"], ev["miou"])
    finally:
        tlog.close()

    ckpt = sm.save_checkpoint(params, run_dir / "student.ckpt")
    record = RunRecord(
        config=config.to_dict(),
        method=method,
        seed=seed,
        metrics=rows,
        checkpoint=str(ckpt),
        wall_clock=time.perf_counter() - t0,
        stage_transition=dcfg.tfe_iters if uses_rdd else None,
        run_dir=str(run_dir),
        empty_mask_events=empty_events,
        stage_counts=stage_counts,
    )
    _write_manifest(run_dir, record.manifest())
    return record


# --------------------------------------------------------------------------
# grids


def _set_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    new = config.replace()
    if axis == "mode":
        value = rdd.Mode(str(value).upper()).value
    else:
        value = float(value)
    setattr(new.distill, axis, value)
    new.validate()
    return new


def summarize(results: dict, axis: str) -> tuple[list[dict], list[dict]]:
    """Median/min/max per grid point plus pairwise median orderings."""
    table = []
    for value, scores in results.items():
        arr = np.array(scores, dtype=np.float64)
        table.append({
            "axis": axis, "value": value, "n_seeds": len(arr),
            "median_miou": float(np.median(arr)), "min_miou": float(arr.min()), "max_miou": float(arr.max()),
        })
    order = []
    for i, a in enumerate(table):
        for b in table[i + 1 :]:
            d = a["median_miou"] - b["median_miou"]
            order.append({"a": a["value"], "b": b["value"], "median_diff": d, "a_ge_b": int(d >= 0)})
    return table, order


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def ablate(
    config: ExperimentConfig,
    teacher_checkpoint: str | Path,
    grid: dict,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
) -> dict:
    """Run the ``rdd`` method over one varied axis of {p, t, mode} times every seed."""
    if len(grid) != 1:
        raise ValueError(
            f"ablate varies exactly one axis per invocation, got {sorted(grid)}; "
            "run factorial grids explicitly"
        )
    (axis, values), = grid.items()
    if axis not in GRIDS:
        raise ValueError(f"unknown grid axis {axis!r}; choose from {sorted(GRIDS)}")
    values = list(GRIDS[axis] if values is None else values)
    seeds = list(config.seeds if seeds is None else seeds)
    out = Path(out_dir) if out_dir else Path(config.output_dir) / f"ablate_{axis}"
    out.mkdir(parents=True, exist_ok=True)
    results: dict = {}
    records: dict = {}
    for value in values:
        cfg = _set_axis(config, axis, value)
        key = getattr(cfg.distill, axis)
        for seed in seeds:
            rec = distill(cfg, teacher_checkpoint, "rdd", seed, out / f"{axis}={key}" / f"seed_{seed}")
            results.setdefault(key, []).append(rec.final_miou)
            records[(key, seed)] = rec
    table, order = summarize(results, axis)
    _write_rows(out / "comparison.csv", table)
    _write_rows(out / "orderings.csv", order)
    return {"table": table, "orderings": order, "records": records, "scores": results}


def compare_methods(
    config: ExperimentConfig,
    teacher_checkpoint: str | Path,
    methods: Sequence[str] = ("baseline_ce", "kd_only", "rdd"),
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
) -> dict:
    seeds = list(config.seeds if seeds is None else seeds)
    out = Path(out_dir) if out_dir else Path(config.output_dir)
    results: dict = {}
    records: dict = {}
    for method in methods:
        for seed in seeds:
            rec = distill(config, teacher_checkpoint, method, seed, out / method / f"seed_{seed}")
            results.setdefault(method, []).append(rec.final_miou)
            records[(method, seed)] = rec
    table, order = summarize(results, "method")
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "comparison.csv", table)
    _write_rows(out / "orderings.csv", order)
    return {"table": table, "orderings": order, "records": records, "scores": results}


# --------------------------------------------------------------------------
# map export


def export_maps(
    config: ExperimentConfig,
    teacher_checkpoint: str | Path,
    student_checkpoint: str | Path,
    samples: Sequence[int],
    out_dir: str | Path,
    split: str = "val",
) -> list[dict]:
    """Write input/label/difficulty/confidence images for each sample index."""
    from PIL import Image

    from .metrics import difficulty_stats

    teacher = sm.load_checkpoint(teacher_checkpoint, requires_grad=False)
    student = sm.load_checkpoint(student_checkpoint, requires_grad=False)
    if not teacher.spec.has_aux_head:
        raise ValueError("export needs a dual-head teacher for the TFE map")
    count = config.train_size if split == "train" else config.val_size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = []
    for index in samples:
        if not 0 <= int(index) < count:
            raise ValueError(f"sample index {index} outside [0, {count}) for split {split!r}")
        img, noisy, _ = generate(config.scene, split, int(index))
        with ad.no_grad():
            t = sm.forward(teacher, img[None], want_aux=True)
            s = sm.forward(student, img[None], want_aux=False)
        tfe = rdd.rd_tfe(t.primary, t.auxiliary)
        s_conf, t_conf = rdd.confidence_map(s.primary), rdd.confidence_map(t.primary)
        tse = rdd.rd_tse(s_conf, t_conf, config.distill.t, rdd.Mode.XOR)
        stem = f"{split}_{index}"
        rgb = np.rint(np.transpose(img, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / f"{stem}_input.png")
        Image.fromarray(noisy.astype(np.uint8), mode="L").save(out / f"{stem}_label.pgm")
        rdd.write_map(tfe.values[0], out / f"{stem}_TFE.pgm")
        rdd.write_map(tse.values[0], out / f"{stem}_TSE.pgm")
        rdd.write_map(s_conf[0], out / f"{stem}_student_conf.pgm", csv=False)
        rdd.write_map(t_conf[0], out / f"{stem}_teacher_conf.pgm", csv=False)
        stats.append({"index": int(index), "TFE": difficulty_stats(tfe), "TSE": difficulty_stats(tse)})
    return stats
