"""Desk-scale segmentation network, losses and the seeded train/evaluate harness."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DatasetManifest, LabeledImage
from .metrics import ConfusionMatrix, MetricsReport, report

log = logging.getLogger(__name__)

RECORD_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 40
    entropy_weight: float = 0.0
    seed: int = 0
    input_size: int = 128
    hflip: bool = True
    widths: tuple[int, ...] = (8, 16, 32)

    def validate(self) -> None:
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0 or self.entropy_weight < 0:
            raise ValueError("learning_rate, momentum, weight_decay and entropy_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.input_size < 8:
            raise ValueError("batch_size >= 1, epochs >= 0 and input_size >= 8 required")
        if self.input_size % (2 ** len(self.widths)):
            raise ValueError(f"input_size {self.input_size} must be divisible by {2 ** len(self.widths)}")


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    """U-Net style encoder-decoder: one downsampling stage per entry of ``widths``."""

    def __init__(self, num_classes: int, widths=(8, 16, 32), seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.stem = _conv_block(3, widths[0])
        self.down = nn.ModuleList(_conv_block(a, b) for a, b in zip(widths, list(widths[1:]) + [2 * widths[-1]]))
        rev = [2 * widths[-1]] + list(reversed(widths))
        self.up = nn.ModuleList(nn.ConvTranspose2d(a, b, 2, stride=2) for a, b in zip(rev, rev[1:]))
        self.dec = nn.ModuleList(_conv_block(2 * b, b) for b in rev[1:])
        self.head = nn.Conv2d(widths[0], num_classes, 1)
        reset_parameters(self, seed)

    def forward(self, x):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for up, dec in zip(self.up, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        return self.head(y)


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> None:
    """He-scaled Gaussian kernels, zero biases, unit norm scales; a pure function of ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel()
            m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_running_stats()
            m.weight.fill_(1.0)
            m.bias.zero_()


def build_model(num_classes: int, config: TrainConfig) -> SegModel:
    return SegModel(num_classes, config.widths, config.seed)


# --------------------------------------------------------------------------- losses


def supervised_loss(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel negative log-likelihood; scores are (N, K, H, W) or (K, H, W)."""
    if scores.dim() == 3:
        scores, mask = scores.unsqueeze(0), mask.unsqueeze(0)
    if int(mask.max()) >= scores.shape[1] or int(mask.min()) < 0:
        raise ValueError(f"mask holds class id outside [0, {scores.shape[1]})")
    return F.cross_entropy(scores, mask.long())


def entropy_loss(scores: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the Shannon entropy (nats) of the softmax prediction."""
    dim = 1 if scores.dim() == 4 else 0
    logp = F.log_softmax(scores, dim=dim)
    # p * log p -> 0 as p -> 0; xlogy-style guard keeps one-hot inputs finite
    ent = -(logp.exp() * logp).nan_to_num(0.0).sum(dim=dim)
    return ent.mean()


# --------------------------------------------------------------------------- harness


@dataclass
class ExperimentRecord:
    config: dict
    label: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    report: MetricsReport | None = None
    wall_clock_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        mode = self.config.get("blend", "train")
        return f"{mode}_{self.label}_seed{self.seed}"

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock time is kept out so re-runs compare byte for byte."""
        return {
            "version": RECORD_VERSION,
            "run_id": self.run_id,
            "label": self.label,
            "seed": self.seed,
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "report": self.report.to_dict() if self.report else None,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        rep = MetricsReport.from_dict(d["report"]) if d.get("report") else None
        return cls(d["config"], d["label"], d["seed"], d["epoch_losses"], rep, 0.0, d.get("extra", {}))


def _stack(images: list[LabeledImage], size: int) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([im.pixels for im in images]).astype(np.float32)).permute(0, 3, 1, 2)
    y = torch.from_numpy(np.stack([im.mask for im in images]).astype(np.int64))
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        y = F.interpolate(y[:, None].float(), size=(size, size), mode="nearest")[:, 0].long()
    return x.contiguous(), y


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )


def train(
    model: SegModel,
    labeled: list[LabeledImage],
    unlabeled: list[LabeledImage] | None,
    config: TrainConfig,
    label: str = "train",
) -> tuple[SegModel, ExperimentRecord]:
    """Momentum SGD on supervised loss (+ entropy on unlabeled target images when weighted)."""
    config.validate()
    if not labeled:
        raise TrainingError("labeled set is empty")
    start = time.perf_counter()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x_all, y_all = _stack(labeled, config.input_size)
    use_entropy = config.entropy_weight > 0 and unlabeled
    if use_entropy:
        u_all, _ = _stack(unlabeled, config.input_size)
    opt = make_optimizer(model, config)
    record = ExperimentRecord(asdict(config), label, config.seed)
    n = len(labeled)
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b, start_idx in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[start_idx : start_idx + config.batch_size])
            x, y = x_all[idx], y_all[idx]
            if config.hflip:
                flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
                y = torch.where(flip[:, None, None], y.flip(-1), y)
            if len(idx) == 1:
                # batch norm needs more than one value per channel
                x, y = torch.cat([x, x.flip(-1)]), torch.cat([y, y.flip(-1)])
            loss = supervised_loss(model(x), y)
            if use_entropy:
                u_idx = torch.from_numpy(rng.choice(len(u_all), size=min(config.batch_size, len(u_all)), replace=False))
                u = u_all[u_idx] if len(u_idx) > 1 else u_all[u_idx].repeat(2, 1, 1, 1)
                loss = loss + config.entropy_weight * entropy_loss(model(u))
            if not torch.isfinite(loss):
                ids = [labeled[i].id for i in idx.tolist()]
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (ids {ids})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        record.epoch_losses.append(total / batches)
        log.debug("epoch %d loss %.4f", epoch, record.epoch_losses[-1])
    record.wall_clock_seconds = time.perf_counter() - start
    model.eval()
    return model, record


@torch.no_grad()
def predict(model: SegModel, image: LabeledImage, input_size: int | None = None) -> np.ndarray:
    model.eval()
    x = torch.from_numpy(image.pixels.astype(np.float32)).permute(2, 0, 1)[None]
    h, w = x.shape[-2:]
    if input_size and (h, w) != (input_size, input_size):
        x = F.interpolate(x, size=(input_size, input_size), mode="bilinear", align_corners=False)
    scores = model(x)
    if scores.shape[-2:] != (h, w):
        scores = F.interpolate(scores, size=(h, w), mode="bilinear", align_corners=False)
    return scores.argmax(dim=1)[0].numpy()


def evaluate(
    model: SegModel,
    data: DatasetManifest | list[LabeledImage],
    input_size: int | None = None,
) -> MetricsReport:
    images = data.load_all() if isinstance(data, DatasetManifest) else data
    if not images:
        raise ValueError("nothing to evaluate")
    cm = ConfusionMatrix(model.num_classes)
    for im in images:
        cm.update(predict(model, im, input_size), im.mask)
    return report(cm)
