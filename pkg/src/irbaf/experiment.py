"""Experiment configuration, the staged pipeline, and repeat-run summaries."""
from __future__ import annotations

import configparser
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import flow_style
from .dataset import DatasetManifest, assign_style_pairs, load_manifest
from .fda_swap import SwapConfig, apply_to_manifest
from .irb import DEFAULT_RATIOS, initial_blend, irb_loop
from .seg_train import ExperimentRecord, TrainConfig, build_model, evaluate, train

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1
BLEND_MODES = ("none", "random", "irb")
ENV_OUTPUT = "IRBAF_OUTPUT_ROOT"
ENV_THREADS = "IRBAF_THREADS"


class PipelineError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    source: str = "data/source"
    target: str = "data/target"
    output: str = "runs/default"
    use_style_transfer: bool = False
    use_fourier_swap: bool = False
    blend: str = "irb"
    blend_total: int = 10
    repeats: int = 3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    max_irb_iterations: int = 7
    ratios: list[int] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    prep_seed: int = 0  # style pairing / Fourier target draws
    train: TrainConfig = field(default_factory=TrainConfig)
    swap: SwapConfig = field(default_factory=SwapConfig)
    style: flow_style.StyleConfig = field(default_factory=flow_style.StyleConfig)

    def validate(self) -> None:
        if self.blend not in BLEND_MODES:
            raise ValueError(f"blend must be one of {BLEND_MODES}, got {self.blend!r}")
        if self.repeats < 1 or len(self.seeds) != self.repeats:
            raise ValueError(f"repeats={self.repeats} but {len(self.seeds)} seeds given")
        if self.blend != "none" and (self.blend_total <= 0 or self.blend_total % 10):
            raise ValueError("blend_total must be a positive multiple of 10")
        self.train.validate()

    @property
    def group(self) -> str:
        total = 0 if self.blend == "none" else self.blend_total
        tags = ("+st" if self.use_style_transfer else "") + ("+fda" if self.use_fourier_swap else "")
        return f"{self.blend}-{total}{tags}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["widths"] = list(self.train.widths)
        return d


# --------------------------------------------------------------------------- config files

_SECTIONS = {"train": TrainConfig, "swap": SwapConfig, "style": flow_style.StyleConfig}


def _parse(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, (list, tuple)):
        items = [int(v) for v in raw.replace(" ", "").split(",") if v]
        return type(like)(items)
    return type(like)(raw)


def _fill(cls, section) -> object:
    obj = cls()
    for f in fields(cls):
        if section is not None and f.name in section:
            setattr(obj, f.name, _parse(section[f.name], getattr(obj, f.name)))
    return obj


def load_config(path) -> ExperimentConfig:
    """Read an INI experiment file: [experiment] plus optional [train], [swap], [style]."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    schema = int(exp.get("schema", CONFIG_SCHEMA))
    if schema != CONFIG_SCHEMA:
        raise ValueError(f"{path}: unsupported config schema {schema}")
    cfg = ExperimentConfig()
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            setattr(cfg, f.name, _fill(_SECTIONS[f.name], cp[f.name] if cp.has_section(f.name) else None))
        elif f.name in exp:
            setattr(cfg, f.name, _parse(exp[f.name], getattr(cfg, f.name)))
    if "seeds" not in exp:
        cfg.seeds = list(range(cfg.repeats))
    base = Path(path).resolve().parent
    for key in ("source", "target", "output"):
        p = Path(getattr(cfg, key))
        setattr(cfg, key, str(p if p.is_absolute() else base / p))
    cfg.validate()
    return cfg


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def save_config(cfg: ExperimentConfig, path) -> None:
    cp = configparser.ConfigParser()
    exp = {"schema": str(CONFIG_SCHEMA)}
    for f in fields(ExperimentConfig):
        if f.name not in _SECTIONS:
            exp[f.name] = _fmt(getattr(cfg, f.name))
    cp["experiment"] = exp
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(sub, f.name)) for f in fields(sub)}
    with open(path, "w") as fh:
        cp.write(fh)


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    if os.environ.get(ENV_OUTPUT):
        cfg.output = os.environ[ENV_OUTPUT]
    if os.environ.get(ENV_THREADS):
        import torch

        torch.set_num_threads(int(os.environ[ENV_THREADS]))
    return cfg


# --------------------------------------------------------------------------- pipeline


class StageLog:
    """Ordered stage start/finish times, persisted next to (not inside) the records."""

    def __init__(self, path: Path):
        self.path = path
        self.stages: list[dict] = []

    def run(self, name, fn, *args, seed=None):
        entry = {"stage": name, "index": len(self.stages), "started_ns": time.time_ns()}
        try:
            result = fn(*args)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage {name!r} failed (seed {seed}): {exc}") from exc
        entry["finished_ns"] = time.time_ns()
        self.stages.append(entry)
        self.path.write_text(json.dumps(self.stages, indent=2) + "\n")
        return result


def _style_stage(cfg: ExperimentConfig, source, target, out: Path) -> DatasetManifest:
    pairs = assign_style_pairs(source, target, cfg.prep_seed)
    st = cfg.style
    net = flow_style.FlowNetwork(3, st.num_blocks, st.steps_per_block, st.hidden, st.seed)
    net, history = flow_style.train_style(net, source, target, pairs, st)
    (out / "style").mkdir(parents=True, exist_ok=True)
    flow_style.save_checkpoint(net, out / "style" / "flow.pt", st)
    history.to_csv(out / "style" / "losses.csv")
    return flow_style.stylize_dataset(net, source, target, pairs, out / "stylized")


def _blend_stage(cfg: ExperimentConfig, source, target) -> list[ExperimentRecord]:
    labeled = source.load_all()
    pool = {i: target.load_image(i) for i in target.ids()}
    records = []
    for seed in cfg.seeds:
        try:
            records.append(_blend_one(cfg, target, labeled, pool, seed))
        except Exception as exc:
            raise PipelineError(f"stage 'blend_training' failed (seed {seed}): {exc}") from exc
    return records


def _blend_one(cfg: ExperimentConfig, target, labeled, pool, seed) -> ExperimentRecord:
    def fit(blend_ids, run_seed, label):
        tc = TrainConfig(**{**asdict(cfg.train), "seed": int(run_seed)})
        test = [pool[i] for i in pool if i not in set(blend_ids)]
        model = build_model(target.num_classes, tc)
        return train(model, labeled + [pool[i] for i in blend_ids], test, tc, label)

    if cfg.blend == "irb":
        rounds = {}

        def trainer(blend_ids, run_seed):
            model, rec = fit(blend_ids, run_seed, "irb")
            rounds[run_seed] = rec
            return model

        def evaluator(model, test_ids):
            return evaluate(model, [pool[i] for i in test_ids], cfg.train.input_size)

        state = irb_loop(trainer, evaluator, target, cfg.blend_total, seed, cfg.max_irb_iterations, cfg.ratios)
        best = state.best_step
        rec = rounds[best.seed]
        rec.label, rec.report, rec.seed = best.plan.label, best.report, int(seed)
        rec.extra["irb"] = state.to_dict()
        rec.extra["round_seed"] = best.seed
        rec.wall_clock_seconds = sum(r.wall_clock_seconds for r in rounds.values())
        blend_ids = best.plan.image_ids
    else:
        if cfg.blend == "random":
            plan = initial_blend(target, cfg.blend_total, seed)
            blend_ids, label = plan.image_ids, plan.label
        else:
            blend_ids, label = (), "0-r"
        model, rec = fit(blend_ids, seed, label)
        rec.report = evaluate(model, [pool[i] for i in pool if i not in set(blend_ids)], cfg.train.input_size)
    rec.config = cfg.to_dict()
    rec.config["seed"] = int(seed)
    rec.extra["group"] = cfg.group
    rec.extra["split"] = {"blended": list(blend_ids), "test_count": len(pool) - len(blend_ids)}
    return rec


def run_pipeline(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    """Style transfer -> Fourier swap -> blended training, each repeat seeded from ``cfg.seeds``."""
    cfg.validate()
    out = Path(cfg.output)
    (out / "records").mkdir(parents=True, exist_ok=True)
    stages = StageLog(out / "stages.json")
    source = load_manifest(cfg.source)
    target = load_manifest(cfg.target)
    if cfg.use_style_transfer:
        source = stages.run("style_transfer", _style_stage, cfg, source, target, out, seed=cfg.prep_seed)
    if cfg.use_fourier_swap:
        source = stages.run(
            "fourier_swap", apply_to_manifest, source, target, cfg.swap, out / "fda", cfg.prep_seed, seed=cfg.prep_seed
        )
    records = stages.run("blend_training", _blend_stage, cfg, source, target, seed=cfg.seeds)
    timings = {}
    for rec in records:
        rec.extra["stages"] = [s["stage"] for s in stages.stages]
        write_record(rec, out / "records")
        timings[rec.run_id] = rec.wall_clock_seconds
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return records


def write_record(rec: ExperimentRecord, directory: Path) -> Path:
    path = Path(directory) / f"{rec.run_id}.json"
    path.write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_records(directory) -> list[ExperimentRecord]:
    return [ExperimentRecord.from_dict(json.loads(p.read_text())) for p in sorted(Path(directory).glob("*.json"))]


# --------------------------------------------------------------------------- summaries


def _group_of(rec: ExperimentRecord) -> str:
    return rec.extra.get("group", rec.label)


def summarize(records: list[ExperimentRecord]) -> list[dict]:
    """Per configuration: mean mIoU, stability (max - min mIoU), std, and per-class means."""
    if not records:
        raise ValueError("no records to summarize")
    groups: dict[str, list[ExperimentRecord]] = {}
    for rec in records:
        groups.setdefault(_group_of(rec), []).append(rec)
    rows = []
    for name, recs in groups.items():
        mious = np.array([r.report.miou for r in recs])
        classes = sorted({c for r in recs for c in r.report.iou_per_class})
        row = {
            "config": name,
            "labels": "/".join(sorted({r.label for r in recs})),
            "runs": len(recs),
            "mean_miou": float(mious.mean()),
            "stability": float(mious.max() - mious.min()),
            "std_miou": float(mious.std()),
            "mean_macc": float(np.mean([r.report.macc for r in recs])),
        }
        for c in classes:
            row[f"iou_{c}"] = float(np.mean([r.report.iou_per_class.get(c, np.nan) for r in recs]))
            row[f"acc_{c}"] = float(np.mean([r.report.acc_per_class.get(c, np.nan) for r in recs]))
        rows.append(row)
    return rows


def boxplot_data(records: list[ExperimentRecord]) -> list[dict]:
    return [
        {"config": _group_of(r), "label": r.label, "seed": r.seed, "miou": r.report.miou}
        for r in sorted(records, key=lambda r: (_group_of(r), r.seed))
    ]


def _write_csv(rows: list[dict], path: Path) -> None:
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_summary(records: list[ExperimentRecord], out) -> list[dict]:
    out = Path(out)
    rows = summarize(records)
    _write_csv(rows, out / "summary.csv")
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    box = boxplot_data(records)
    _write_csv(box, out / "boxplot.csv")
    try:
        _render_boxplot(box, out / "boxplot.png")
    except Exception as exc:  # plotting is optional
        log.warning("boxplot rendering skipped: %s", exc)
    return rows


def _render_boxplot(box: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted({b["config"] for b in box})
    data = [[100 * b["miou"] for b in box if b["config"] == n] for n in names]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(names) + 1), names)
    for i, vals in enumerate(data, 1):
        ax.scatter([i] * len(vals), vals, s=12)
    ax.plot(range(1, len(names) + 1), [np.mean(v) for v in data], marker="o")
    ax.set_ylabel("mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
