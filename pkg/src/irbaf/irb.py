"""IoU-ranking blend curriculum.

Round 0 injects ``total`` uniformly drawn target images into the source
training set.  Every later round ranks the foreground classes by the IoU
measured on the remaining target images and re-draws the blend so the worst
class gets the largest share (5:3:2 for three organs).  Rounds stop at the
first ranking already seen; the best-mIoU round wins.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import DatasetManifest
from .metrics import MetricsReport

DEFAULT_RATIOS = (5, 3, 2)


class BlendError(ValueError):
    pass


class IrbError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassRanking:
    order: tuple[int, ...]  # best IoU first
    ious: tuple[float, ...]

    def worst_first(self) -> tuple[int, ...]:
        return tuple(reversed(self.order))

    def to_dict(self) -> dict:
        return {"order": list(self.order), "ious": list(self.ious)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRanking":
        return cls(tuple(d["order"]), tuple(d["ious"]))


@dataclass
class BlendPlan:
    total: int
    per_class: dict[int, int]
    ranking_used: ClassRanking | None  # None: random draw
    label: str
    image_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "total": self.total,
            "per_class": {str(c): n for c, n in sorted(self.per_class.items())},
            "ranking_used": "random" if self.ranking_used is None else self.ranking_used.to_dict(),
            "image_ids": list(self.image_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlendPlan":
        ranking = d["ranking_used"]
        return cls(
            int(d["total"]),
            {int(c): int(n) for c, n in d["per_class"].items()},
            None if ranking == "random" else ClassRanking.from_dict(ranking),
            d["label"],
            tuple(d["image_ids"]),
        )


def _check_total(total: int) -> int:
    if not isinstance(total, (int, np.integer)) or total <= 0 or total % 10:
        raise BlendError(f"blend total must be a positive multiple of 10, got {total!r}")
    return int(total)


def check_ratios(ratios, num_classes: int) -> tuple[int, ...]:
    """Shares must sum to 10, never grow from worst to best, and end on an even share >= 2."""
    ratios = tuple(int(r) for r in ratios)
    if len(ratios) != num_classes:
        raise BlendError(f"{len(ratios)} ratios for {num_classes} foreground classes")
    if sum(ratios) != 10:
        raise BlendError(f"ratios {ratios} do not sum to 10")
    if any(a < b for a, b in zip(ratios, ratios[1:])):
        raise BlendError(f"ratios {ratios} give a better-ranked class a larger share")
    if ratios[-1] < 2 or ratios[-1] % 2:
        raise BlendError(f"smallest share {ratios[-1]} is not a positive multiple of 2")
    return ratios


def initial_blend(target: DatasetManifest, total: int, rng_seed: int) -> BlendPlan:
    total = _check_total(total)
    ids = target.ids()
    if len(ids) < total:
        raise BlendError(f"target pool has {len(ids)} images, {total} requested")
    rng = np.random.default_rng(rng_seed)
    picked = tuple(ids[i] for i in rng.choice(len(ids), size=total, replace=False))
    per_class: dict[int, int] = {}
    for image_id in picked:
        c = target.entry(image_id).primary
        per_class[c] = per_class.get(c, 0) + 1
    return BlendPlan(total, per_class, None, f"{total}-r", picked)


def rank_classes(report: MetricsReport, foreground_classes) -> ClassRanking:
    missing = [c for c in foreground_classes if c not in report.iou_per_class]
    if missing:
        raise BlendError(f"report has no IoU for classes {missing}")
    order = sorted(foreground_classes, key=lambda c: (-report.iou_per_class[c], c))
    return ClassRanking(tuple(order), tuple(report.iou_per_class[c] for c in order))


def proportioned_blend(
    ranking: ClassRanking,
    total: int,
    target: DatasetManifest,
    rng_seed: int,
    ratios=DEFAULT_RATIOS,
) -> BlendPlan:
    total = _check_total(total)
    ratios = check_ratios(ratios, len(ranking.order))
    n = total // 10
    rng = np.random.default_rng(rng_seed)
    shares, per_class, picked = {}, {}, []
    taken: set[str] = set()
    # an image holding several organs counts only for the class it was drawn for
    for cls, ratio in zip(ranking.worst_first(), ratios):
        need = ratio * n
        pool = [i for i in target.ids_with_class(cls) if i not in taken]
        if len(pool) < need:
            raise BlendError(f"class {cls} needs {need} images, only {len(pool)} available")
        chosen = [pool[i] for i in rng.choice(len(pool), size=need, replace=False)]
        taken.update(chosen)
        picked.extend(chosen)
        shares[cls], per_class[cls] = ratio, need
    digits = "".join(str(shares[c]) for c in sorted(shares))
    return BlendPlan(total, per_class, ranking, f"{total}-{digits}", tuple(picked))


def blend_percentage(class_count: int, blends: int) -> float:
    """Share (in percent) of blended images within one class subset."""
    if class_count <= 0 or blends < 0:
        raise ValueError("class_count must be positive and blends non-negative")
    return 100.0 * blends / (class_count + blends)


@dataclass
class IrbStep:
    plan: BlendPlan
    report: MetricsReport
    seed: int
    ranking: ClassRanking

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "report": self.report.to_dict(),
            "seed": self.seed,
            "ranking": self.ranking.to_dict(),
        }


@dataclass
class IrbState:
    iteration: int = 0
    history: list[IrbStep] = field(default_factory=list)
    seen_rankings: set[tuple[int, ...]] = field(default_factory=set)
    best: int = -1

    @property
    def best_step(self) -> IrbStep:
        return self.history[self.best]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "best": self.best,
            "seen_rankings": sorted(list(r) for r in self.seen_rankings),
            "history": [s.to_dict() for s in self.history],
        }


def round_seed(base_seed: int, iteration: int) -> int:
    """Round 0 reuses ``base_seed`` so it matches a plain random-blend run."""
    if iteration == 0:
        return int(base_seed)
    return int(np.random.SeedSequence([int(base_seed), iteration]).generate_state(1)[0])


def irb_loop(
    trainer: Callable[[tuple[str, ...], int], object],
    evaluator: Callable[[object, list[str]], MetricsReport],
    target: DatasetManifest,
    total: int,
    base_seed: int,
    max_iterations: int = 10,
    ratios=DEFAULT_RATIOS,
) -> IrbState:
    """Run blend rounds until a ranking repeats or ``max_iterations`` is hit.

    ``trainer(blend_ids, seed)`` must build a freshly initialised model from
    ``seed`` and train it on source + blended images.  ``evaluator(model,
    test_ids)`` scores it on the target images that were not blended.
    """
    if max_iterations < 1:
        raise IrbError("max_iterations must be >= 1")
    foreground = target.foreground_classes
    state = IrbState()
    ranking = None
    for it in range(max_iterations):
        seed = round_seed(base_seed, it)
        try:
            if ranking is None:
                plan = initial_blend(target, total, seed)
            else:
                plan = proportioned_blend(ranking, total, target, seed, ratios)
            blended = set(plan.image_ids)
            test_ids = [i for i in target.ids() if i not in blended]
            model = trainer(plan.image_ids, seed)
            rep = evaluator(model, test_ids)
            ranking = rank_classes(rep, foreground)
        except Exception as exc:
            raise IrbError(f"IRB iteration {it} (seed {seed}) failed: {exc}") from exc
        state.history.append(IrbStep(plan, rep, seed, ranking))
        state.iteration = it
        if state.best < 0 or rep.miou > state.history[state.best].report.miou:
            state.best = len(state.history) - 1
        if ranking.order in state.seen_rankings:
            break
        state.seen_rankings.add(ranking.order)
    return state
