"""Reversible projection flow for unbiased style transfer.

An image is projected to a latent by squeeze + (actnorm, 1x1 channel mix,
additive coupling) steps, channel statistics of the content latent are matched
to the style latent, and the result is mapped back through the exact inverse.
All tensors are NCHW.
"""
from __future__ import annotations

import csv
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DatasetManifest, LabeledImage, write_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STD_EPS = 1e-6


class StyleTrainingError(RuntimeError):
    pass


def squeeze(x: torch.Tensor) -> torch.Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims {h}x{w} not divisible by 2")
    x = x.view(n, c, h // 2, 2, w // 2, 2)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(n, c * 4, h // 2, w // 2)


def unsqueeze(x: torch.Tensor) -> torch.Tensor:
    n, c, h, w = x.shape
    x = x.view(n, c // 4, 2, 2, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(n, c // 4, h * 2, w * 2)


class ActNorm(nn.Module):
    """y = (x + bias) * scale per channel, initialised from the first batch it sees."""

    def __init__(self, channels: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(0, dtype=torch.uint8))

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        std = x.std(dim=(0, 2, 3), keepdim=True, unbiased=False)
        self.bias.copy_(-mean)
        self.scale.copy_(1.0 / (std + 1e-6))
        self.initialized.fill_(1)

    def forward(self, x):
        if not self.initialized:
            self.initialize(x)
        return (x + self.bias) * self.scale

    def reverse(self, y):
        if not self.initialized:
            raise RuntimeError("ActNorm reversed before initialisation")
        return y / self.scale - self.bias


class InvConv1x1(nn.Module):
    def __init__(self, channels: int, generator: torch.Generator | None = None):
        super().__init__()
        q, _ = torch.linalg.qr(torch.randn(channels, channels, generator=generator))
        self.weight = nn.Parameter(q)

    def _checked(self):
        if torch.abs(torch.det(self.weight.detach().double())) <= 1e-8:
            raise RuntimeError("channel-mixing matrix is singular")
        return self.weight

    def forward(self, x):
        w = self._checked()
        return F.conv2d(x, w.view(*w.shape, 1, 1))

    def reverse(self, y):
        w_inv = torch.linalg.inv(self._checked())
        return F.conv2d(y, w_inv.view(*w_inv.shape, 1, 1))

    def logdet(self, x):
        return x.shape[2] * x.shape[3] * torch.slogdet(self.weight)[1]


class AdditiveCoupling(nn.Module):
    """Second half of the channels shifted by a function of the first half (unit Jacobian)."""

    def __init__(self, channels: int, hidden: int = 64, generator: torch.Generator | None = None):
        super().__init__()
        half = channels // 2
        self.shift_net = nn.Sequential(
            nn.Conv2d(half, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels - half, 3, padding=1),
        )
        with torch.no_grad():
            for m in self.shift_net:
                if isinstance(m, nn.Conv2d):
                    m.weight.normal_(0.0, 0.05, generator=generator)
                    m.bias.zero_()
            self.shift_net[-1].weight.zero_()

    def forward(self, x):
        xa, xb = x.chunk(2, dim=1)
        return torch.cat([xa, xb + self.shift_net(xa)], dim=1)

    def reverse(self, y):
        ya, yb = y.chunk(2, dim=1)
        return torch.cat([ya, yb - self.shift_net(ya)], dim=1)

    def logdet(self, x):
        return x.new_zeros(())


class FlowStep(nn.Module):
    def __init__(self, channels, hidden, generator=None):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.mix = InvConv1x1(channels, generator)
        self.coupling = AdditiveCoupling(channels, hidden, generator)

    def forward(self, x):
        return self.coupling(self.mix(self.actnorm(x)))

    def reverse(self, y):
        return self.actnorm.reverse(self.mix.reverse(self.coupling.reverse(y)))


class FlowNetwork(nn.Module):
    def __init__(self, in_channels=3, num_blocks=2, steps_per_block=8, hidden=64, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.config = dict(
            in_channels=in_channels, num_blocks=num_blocks, steps_per_block=steps_per_block, hidden=hidden, seed=seed
        )
        blocks, c = [], in_channels
        for _ in range(num_blocks):
            c *= 4
            blocks.append(nn.ModuleList(FlowStep(c, hidden, gen) for _ in range(steps_per_block)))
        self.blocks = nn.ModuleList(blocks)
        self.factor = 2**num_blocks

    def steps(self):
        for block in self.blocks:
            yield from block

    def forward(self, x):
        for block in self.blocks:
            x = squeeze(x)
            for step in block:
                x = step(x)
        return x

    def reverse(self, z):
        for block in reversed(self.blocks):
            for step in reversed(block):
                z = step.reverse(z)
            z = unsqueeze(z)
        return z

    @torch.no_grad()
    def initialize(self, batch: torch.Tensor) -> None:
        """Data-dependent actnorm initialisation from one batch (re-initialises every layer)."""
        for step in self.steps():
            step.actnorm.initialized.fill_(0)
        self.forward(batch)

    @torch.no_grad()
    def identity_(self) -> "FlowNetwork":
        """Set every step to the identity map, leaving only the squeezes."""
        for step in self.steps():
            step.actnorm.bias.zero_()
            step.actnorm.scale.fill_(1.0)
            step.actnorm.initialized.fill_(1)
            step.mix.weight.copy_(torch.eye(step.mix.weight.shape[0]))
            last = step.coupling.shift_net[-1]
            last.weight.zero_()
            last.bias.zero_()
        return self

    @property
    def is_initialized(self) -> bool:
        return all(bool(s.actnorm.initialized) for s in self.steps())


def _check_dims(net: FlowNetwork, x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % net.factor or w % net.factor:
        raise ValueError(f"image {h}x{w} not divisible by {net.factor}")


def project(net: FlowNetwork, image: torch.Tensor) -> torch.Tensor:
    """(N, 3, H, W) -> (N, 48, H/4, W/4) for the default two-block network."""
    _check_dims(net, image)
    return net(image)


def revert(net: FlowNetwork, latent: torch.Tensor) -> torch.Tensor:
    expected = net.config["in_channels"] * net.factor**2
    if latent.dim() != 4 or latent.shape[1] != expected:
        raise ValueError(f"latent shape {tuple(latent.shape)} does not match {expected} channels")
    return net.reverse(latent)


def _channel_stats(f):
    mean = f.mean(dim=(-2, -1), keepdim=True)
    std = f.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return mean, std


def transfer(content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Match per-channel spatial mean/std of ``content`` to ``style``."""
    if content.shape[-3] != style.shape[-3]:
        raise ValueError("content and style features have different channel counts")
    mc, sc = _channel_stats(content)
    ms, ss = _channel_stats(style)
    return (content - mc) / (sc + STD_EPS) * (ss + STD_EPS) + ms


def stylize(net: FlowNetwork, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    return revert(net, transfer(project(net, content), project(net, style)))


# --------------------------------------------------------------------------- losses


class FeatureExtractor(nn.Module):
    """Fixed random three-scale conv pyramid; scales 0-1 feed the style loss, 2 the content loss."""

    def __init__(self, seed=0, widths=(8, 16, 32), style_layers=(0, 1), content_layer=2):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, c_in = [], 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * c_in)) ** 0.5, generator=gen)
                conv.bias.normal_(0.0, 0.01, generator=gen)
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.style_layers = tuple(style_layers)
        self.content_layer = content_layer
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def gram(features: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalised by the number of spatial positions.

    Accepts (C, H, W) or (N, C, H, W).
    """
    *lead, c, h, w = features.shape
    f = features.reshape(*lead, c, h * w)
    return f @ f.transpose(-1, -2) / (h * w)


def gram_distance(feats_t, feats_s) -> torch.Tensor:
    """Sum over layers of squared Frobenius norms of Gram differences, averaged over the batch."""
    total = 0.0
    for ft, fs in zip(feats_t, feats_s):
        d = gram(ft) - gram(fs)
        total = total + (d**2).sum(dim=(-2, -1)).mean()
    return total


def style_loss(t: torch.Tensor, s: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    ft, fs = extractor(t), extractor(s)
    return gram_distance([ft[i] for i in extractor.style_layers], [fs[i] for i in extractor.style_layers])


def content_loss(t: torch.Tensor, c: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    at, ac = extractor(t)[extractor.content_layer], extractor(c)[extractor.content_layer]
    return ((at - ac) ** 2).sum(dim=(1, 2, 3)).mean()


# --------------------------------------------------------------------------- training


@dataclass
class StyleConfig:
    iterations: int = 200  # the published run used 120,000
    learning_rate: float = 1e-4
    weight_decay: float = 5e-5
    style_weight: float = 1.0
    batch_size: int = 4
    crop_size: int = 64
    num_blocks: int = 2
    steps_per_block: int = 8
    hidden: int = 64
    seed: int = 0
    extractor_seed: int = 1234


@dataclass
class StyleHistory:
    content: list[float] = field(default_factory=list)
    style: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "content_loss", "style_loss", "total_loss"])
            for i, row in enumerate(zip(self.content, self.style, self.total)):
                w.writerow([i, *(repr(v) for v in row)])


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _crop(batch: torch.Tensor, size: int, rng: np.random.Generator) -> torch.Tensor:
    h, w = batch.shape[-2:]
    if size >= min(h, w):
        return batch
    out = []
    for img in batch:
        y, x = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
        out.append(img[:, y : y + size, x : x + size])
    return torch.stack(out)


def train_style(
    net: FlowNetwork,
    source: DatasetManifest,
    target: DatasetManifest,
    pairs: list[tuple[str, str]],
    config: StyleConfig,
    extractor: FeatureExtractor | None = None,
) -> tuple[FlowNetwork, StyleHistory]:
    """Fit the flow so stylised outputs keep content features and pick up style Gram statistics."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    extractor = extractor or FeatureExtractor(seed=config.extractor_seed)
    content_imgs = {i: source.load_image(i).pixels for i in {p[0] for p in pairs}}
    style_imgs = {i: target.load_image(i).pixels for i in {p[1] for p in pairs}}
    crop = config.crop_size - config.crop_size % net.factor

    def sample():
        idx = rng.choice(len(pairs), size=min(config.batch_size, len(pairs)), replace=False)
        c = _to_tensor([content_imgs[pairs[i][0]] for i in idx])
        s = _to_tensor([style_imgs[pairs[i][1]] for i in idx])
        return _crop(c, crop, rng), _crop(s, crop, rng)

    if not net.is_initialized:
        net.initialize(sample()[0])
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    history = StyleHistory()
    for it in range(config.iterations):
        c, s = sample()
        out = stylize(net, c, s)
        lc = content_loss(out, c, extractor)
        ls = style_loss(out, s, extractor)
        loss = lc + config.style_weight * ls
        if not torch.isfinite(loss):
            raise StyleTrainingError(f"non-finite loss at iteration {it}: content={lc.item()} style={ls.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.content.append(lc.item())
        history.style.append(ls.item())
        history.total.append(loss.item())
        if it % 50 == 0:
            log.debug("style it %d: content %.4f style %.4f", it, lc.item(), ls.item())
    return net, history


def save_checkpoint(net: FlowNetwork, path, config: StyleConfig | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "network": net.config,
            "style_config": asdict(config) if config else None,
            "state_dict": net.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> tuple[FlowNetwork, StyleConfig | None]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    net = FlowNetwork(**ckpt["network"])
    net.load_state_dict(ckpt["state_dict"])
    cfg = StyleConfig(**ckpt["style_config"]) if ckpt["style_config"] else None
    return net, cfg


@torch.no_grad()
def stylize_dataset(
    net: FlowNetwork,
    source: DatasetManifest,
    target: DatasetManifest,
    pairs: list[tuple[str, str]],
    out_root,
) -> DatasetManifest:
    """Write stylised copies of the paired source images; mask files are copied byte for byte."""
    out_root = Path(out_root)
    (out_root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for src_id, tgt_id in pairs:
        img = source.load_image(src_id)
        style = target.load_image(tgt_id).pixels
        c = _to_tensor([img.pixels])
        s = _to_tensor([style])
        if s.shape[-2:] != c.shape[-2:]:
            s = F.interpolate(s, size=c.shape[-2:], mode="bilinear", align_corners=False)
        out = stylize(net, c, s).clamp(0.0, 1.0)[0].permute(1, 2, 0).numpy()
        entry = write_image(out_root, LabeledImage(src_id, out, img.mask, "source", img.classes_present))
        shutil.copyfile(source.root / source.entry(src_id).mask, out_root / entry.mask)
        entries.append(entry)
    manifest = DatasetManifest(list(source.class_names), entries, out_root)
    manifest.save()
    return manifest
