"""Reproducible run steps behind the CLI verbs: gen, train, eval, infer."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import CheckpointError, ConfigError
from .masking import apply_mask
from .metrics import IouCounts, MetricsReport, RayCounts, make_ray_set
from .scene import CLASS_NAMES, Scene, generate_scene, load_scene, make_prototypes, save_scene
from .training import FmoccModel, TrainingError, TrainState, fit, infer

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOG_COLUMNS = ("step", "epoch", "flow_loss", "ce_loss", "p_drop")


class DataError(RuntimeError):
    pass


def scene_filename(seed: int) -> str:
    return f"scene_{seed}.fmoc"


def class_names(num_classes: int) -> list[str]:
    names = list(CLASS_NAMES[:num_classes])
    names += [f"class{i}" for i in range(len(names), num_classes)]
    return names


# --- gen --------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, n_scenes: int, out_dir, first_seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.scene.spec()
    seeds = list(range(first_seed, first_seed + n_scenes))
    paths = []
    notes = {}
    for s in seeds:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scene = generate_scene(spec, s)
        if scene.warnings:
            notes[str(s)] = scene.warnings
        path = out / scene_filename(s)
        save_scene(path, scene)
        paths.append(path)
    manifest = {
        "scene_hash": cfg.scene_hash(),
        "seeds": seeds,
        "scene": cfg.to_dict()["scene"],
        "prototypes": make_prototypes(spec.num_classes, spec.channels,
                                      spec.prototype_seed).tolist(),
        "warnings": notes,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return paths


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"{data_dir}: no {MANIFEST}; run `fmocc gen` first")
    return json.loads(path.read_text())


def load_dataset(cfg: RunConfig, data_dir) -> list[tuple[int, Scene]]:
    """Scenes listed in the manifest, after checking the manifest matches ``cfg``."""
    manifest = read_manifest(data_dir)
    if manifest["scene_hash"] != cfg.scene_hash():
        raise ConfigError(
            f"{data_dir}: scenes were generated with scene config {manifest['scene_hash'][:12]}, "
            f"but the current config hashes to {cfg.scene_hash()[:12]}; regenerate the data "
            "or use the matching config"
        )
    missing = [s for s in manifest["seeds"] if not (Path(data_dir) / scene_filename(s)).exists()]
    if missing:
        raise DataError(f"{data_dir}: missing scene files for seeds {missing}")
    return [(s, load_scene(Path(data_dir) / scene_filename(s))) for s in manifest["seeds"]]


# --- train ------------------------------------------------------------------------


def write_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for step, epoch, fl, ce, p in history:
            w.writerow([step, epoch, repr(float(fl)), repr(float(ce)), repr(float(p))])


def latest_checkpoint(run_dir) -> Path | None:
    cks = sorted(Path(run_dir).glob("ckpt_step*.fmck"), key=lambda p: int(p.stem[9:]))
    return cks[-1] if cks else None


def cmd_train(cfg: RunConfig, data_dir, run_dir, resume: bool = True,
              stop_after: int | None = None) -> Path:
    """Train to completion (or ``stop_after`` steps) and return the final checkpoint path."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    scenes = load_dataset(cfg, data_dir)
    cfg.save(run / "config.yaml")
    (run / "config.hash").write_text(cfg.hash() + "\n")
    model = FmoccModel.from_config(cfg)
    state: TrainState | None = None
    ck = latest_checkpoint(run) if resume else None
    if ck is not None:
        state = load_checkpoint(ck, model, cfg.hash())
        log.info("resumed from %s at step %d", ck, state.step)

    every = cfg.train.checkpoint_every

    def on_step(st: TrainState, losses) -> None:
        if stop_after is not None and st.step >= stop_after:
            save_checkpoint(run / f"ckpt_step{st.step}.fmck", model, st, cfg.hash())
            write_log(run / "log.csv", st.history)
            raise _Stopped(st.step)

    def on_epoch_end(st: TrainState) -> None:
        epoch = st.step // st.steps_per_epoch
        if every > 0 and epoch % every == 0:
            save_checkpoint(run / f"ckpt_step{st.step}.fmck", model, st, cfg.hash())
            write_log(run / "log.csv", st.history)

    try:
        state = fit(model, scenes, cfg, state, on_step=on_step, on_epoch_end=on_epoch_end)
    except _Stopped as stop:
        return run / f"ckpt_step{stop.step}.fmck"
    except TrainingError as exc:
        last = latest_checkpoint(run)
        raise TrainingError(
            f"{exc} (scene seed {exc.scene_seed}); last good checkpoint: {last}", exc.scene_seed
        ) from exc
    final = run / "final.fmck"
    save_checkpoint(final, model, state, cfg.hash())
    write_log(run / "log.csv", state.history)
    return final


class _Stopped(Exception):
    def __init__(self, step: int):
        super().__init__(step)
        self.step = step


# --- eval / infer -------------------------------------------------------------------


def load_model(cfg: RunConfig, checkpoint) -> FmoccModel:
    model = FmoccModel.from_config(cfg)
    load_checkpoint(checkpoint, model, cfg.hash())
    return model


@dataclass
class EvalResult:
    mask_ratio: float
    report: MetricsReport
    per_scene: list[tuple[int, float]]


def evaluate(model: FmoccModel, cfg: RunConfig, scenes: Sequence[tuple[int, Scene]],
             mask_ratio: float, with_rays: bool = True) -> EvalResult:
    k = cfg.scene.num_classes
    iou = IouCounts(k)
    rays = RayCounts(k)
    dirs = make_ray_set(cfg.eval.n_azimuth, cfg.eval.n_elevation, cfg.eval.elevation_deg)
    origin = np.asarray(cfg.scene.ego, dtype=np.float64) + 0.5
    per_scene = []
    for seed, sc in scenes:
        feats = apply_mask(sc.features, mask_ratio, [cfg.eval.mask_seed, seed])
        pred = infer(feats, model, cfg.flow.n_euler_steps)
        iou.update(pred, sc.labels)
        per_scene.append((seed, IouCounts(k).update(pred, sc.labels).miou()))
        if with_rays:
            rays.update(pred, sc.labels, origin, dirs, cfg.scene.voxel_size_m)
    report = MetricsReport.from_counts(iou, rays, class_names(k))
    report.extra["mask_ratio"] = mask_ratio
    report.extra["scenes"] = len(scenes)
    return EvalResult(mask_ratio, report, per_scene)


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, out_dir, mask_ratios: Sequence[float],
             with_rays: bool = True) -> list[EvalResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(cfg, checkpoint)
    scenes = load_dataset(cfg, data_dir)
    results = []
    for r in mask_ratios:
        res = evaluate(model, cfg, scenes, r, with_rays)
        (out / f"metrics_mask{r:.2f}.txt").write_text(res.report.to_document())
        results.append(res)
    with open(out / "per_scene.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask_ratio", "seed", "miou"])
        for res in results:
            for seed, m in res.per_scene:
                w.writerow([res.mask_ratio, seed, repr(m)])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask_ratio", "miou", "rayiou.1m", "rayiou.2m", "rayiou.4m", "rayiou.mean"])
        for res in results:
            rep = res.report
            w.writerow([res.mask_ratio] + [repr(v) for v in (
                rep.miou, rep.rayiou_1m, rep.rayiou_2m, rep.rayiou_4m, rep.rayiou_mean)])
    return results


def cmd_infer(cfg: RunConfig, checkpoint, scene_path, out_path, mask_ratio: float = 0.0) -> Scene:
    """Write a scene file whose labels are the model's prediction."""
    model = load_model(cfg, checkpoint)
    scene = load_scene(scene_path)
    if scene.channels != model.channels:
        raise CheckpointError(
            f"{scene_path}: scene has {scene.channels} channels, model expects {model.channels}"
        )
    feats = apply_mask(scene.features, mask_ratio, [cfg.eval.mask_seed, 0])
    pred = infer(feats, model, cfg.flow.n_euler_steps)
    out = Scene(pred.astype(np.int64), scene.features, scene.visible, scene.num_classes,
                scene.voxel_size_m)
    save_scene(out_path, out)
    return out
