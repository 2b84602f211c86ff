"""Compact depthwise-separable CNN mapping log-mel features to an interval grid.

Layout: 3x3 stem conv -> depthwise-separable blocks (depthwise 3x3 with a
time stride, pointwise 1x1, each followed by per-channel normalization and
ReLU) -> mean over the mel axis -> 1x1 head with 9 outputs per interval
(3 classes x [confidence, start, end]) -> logistic.

Normalization uses each record's own statistics over (mel, time) in both
training and inference, so predictions never depend on batch composition.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dsp import AugmentConfig, StftConfig, augment, record_features
from .grid_codec import N_CLASSES, Grid, GridConfig
from .loss import torch_grid_loss
from .signal_io import AnnotationSet, EcgRecord

log = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.bin"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_leads: int = 12
    n_mel: int = 48
    n_frames: int = 200
    n_intervals: int = 200
    stem_channels: int = 16
    # (output channels, time stride) per depthwise-separable block
    blocks: tuple[tuple[int, int], ...] = ((16, 1), (32, 1), (64, 1), (64, 1))
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(c), int(s)) for c, s in self.blocks))
        counts = [self.n_leads, self.n_mel, self.n_frames, self.n_intervals, self.stem_channels]
        counts += [c for c, _ in self.blocks]
        if any(c < 1 for c in counts) or any(s < 1 for _, s in self.blocks):
            raise ConfigError("all sizes, channel counts and strides must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        stride = math.prod(s for _, s in self.blocks)
        if self.n_frames % self.n_intervals or stride != self.n_frames // self.n_intervals:
            raise ConfigError(
                f"time strides multiply to {stride} but n_frames/n_intervals = {self.n_frames}/{self.n_intervals}"
            )
        frames = self.n_frames
        for _, s in self.blocks:
            if frames % s:
                raise ConfigError(f"stride {s} does not divide {frames} frames")
            frames //= s


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 60
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate must be >= 0, batch_size >= 1, epochs >= 0")


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count: conv kernels plus a (scale, shift) pair per normalized channel."""
    k2 = config.kernel_size**2
    total = config.n_leads * config.stem_channels * k2 + 2 * config.stem_channels
    c_in = config.stem_channels
    for c_out, _ in config.blocks:
        total += c_in * k2 + 2 * c_in  # depthwise + norm
        total += c_in * c_out + 2 * c_out  # pointwise + norm
        c_in = c_out
    total += c_in * 3 * N_CLASSES + 3 * N_CLASSES  # head weight + bias
    return total


class _ConvNormReLU(nn.Sequential):
    def __init__(self, c_in, c_out, kernel, stride=(1, 1), groups=1):
        pad = kernel // 2 if kernel > 1 else 0
        super().__init__(
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=pad, groups=groups, bias=False),
            nn.InstanceNorm2d(c_out, affine=True, track_running_stats=False),
            nn.ReLU(),
        )


class DelineationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        self.stem = _ConvNormReLU(config.n_leads, config.stem_channels, k)
        layers = []
        c_in = config.stem_channels
        for c_out, stride in config.blocks:
            layers.append(_ConvNormReLU(c_in, c_in, k, stride=(1, stride), groups=c_in))
            layers.append(_ConvNormReLU(c_in, c_out, 1))
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.head = nn.Conv1d(c_in, 3 * N_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, leads, mel, frames)`` -> ``(B, n_intervals, 3 classes, 3)`` in (0, 1)."""
        cfg = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (cfg.n_leads, cfg.n_mel, cfg.n_frames):
            raise ValueError(
                f"expected features (B, {cfg.n_leads}, {cfg.n_mel}, {cfg.n_frames}), got {tuple(x.shape)}"
            )
        h = self.blocks(self.stem(x)).mean(dim=2)
        out = torch.sigmoid(self.head(h))
        return out.view(x.shape[0], N_CLASSES, 3, cfg.n_intervals).permute(0, 3, 1, 2)

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).cpu().numpy()

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        n = sum(p.numel() for p in self.parameters())
        if flat.size != n:
            raise ConfigError(f"parameter vector has {flat.size} values, model expects {n}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                chunk = flat[offset: offset + p.numel()].reshape(p.shape)
                p.copy_(torch.tensor(np.array(chunk), dtype=p.dtype))
                offset += p.numel()

    def named_views(self) -> dict[str, tuple[int, int]]:
        """Parameter name -> (start, stop) slice into :meth:`flat_parameters`."""
        views, offset = {}, 0
        for name, p in self.named_parameters():
            views[name] = (offset, offset + p.numel())
            offset += p.numel()
        return views


def build_model(config: ModelConfig) -> DelineationNet:
    """Seeded fan-in-scaled uniform init; norm scales 1, shifts and head bias 0."""
    model = DelineationNet(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d)):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                if module is model.head:
                    bound = math.sqrt(1.0 / fan_in)
                module.weight.copy_((torch.rand(module.weight.shape, generator=gen) * 2 - 1) * bound)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.InstanceNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def predict_grids(model: DelineationNet, features: np.ndarray | torch.Tensor) -> np.ndarray:
    """Forward a ``(L, M, F)`` or ``(B, L, M, F)`` feature array; returns grid values."""
    x = torch.as_tensor(np.asarray(features), dtype=next(model.parameters()).dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    with torch.no_grad():
        out = model(x).double().numpy()
    return out[0] if single else out


def forward(model: DelineationNet, features: np.ndarray) -> Grid:
    return Grid(predict_grids(model, features))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainItem:
    record: EcgRecord
    target: Grid
    _features: np.ndarray | None = field(default=None, repr=False)

    def features(self, stft: StftConfig, record_len: int) -> np.ndarray:
        if self._features is None:
            self._features = record_features(self.record, stft, n_samples=record_len)
        return self._features


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def train(
    model: DelineationNet,
    items: Sequence[TrainItem],
    train_config: TrainConfig,
    grid_config: GridConfig,
    stft_config: StftConfig = StftConfig(),
    augment_config: AugmentConfig = AugmentConfig(),
    on_epoch=None,
) -> tuple[DelineationNet, list[float]]:
    """Minimize the mean per-record grid loss; returns the model and per-epoch mean loss.

    Data order and augmentation draws come from ``train_config.seed``.
    """
    if not items:
        raise ValueError("training set is empty")
    for item in items:
        if item.target.n_intervals != model.config.n_intervals:
            raise ConfigError("target grid size does not match the model")
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    aug_rng = np.random.default_rng([train_config.seed, 1])
    params = list(model.parameters())
    if train_config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=train_config.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=train_config.learning_rate, momentum=train_config.momentum)

    dtype = params[0].dtype
    targets = torch.tensor(np.stack([it.target.values for it in items]), dtype=dtype)
    masks = torch.tensor(np.stack([it.target.mask for it in items]))
    history: list[float] = []
    model.train()
    for epoch in range(train_config.epochs):
        losses, sizes = [], []
        for idx in _batches(len(items), train_config.batch_size, rng):
            feats = []
            for i in idx:
                item = items[i]
                if train_config.augment:
                    rec = augment(item.record, augment_config, aug_rng)
                    if rec is not item.record:
                        feats.append(record_features(rec, stft_config, n_samples=grid_config.record_len))
                        continue
                feats.append(item.features(stft_config, grid_config.record_len))
            x = torch.tensor(np.stack(feats), dtype=dtype)
            loss = torch_grid_loss(model(x), targets[idx], masks[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, batch {idx.tolist()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            sizes.append(len(idx))
        history.append(float(np.dot(losses, sizes) / np.sum(sizes)))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# gradient checking


def near_threshold(prediction: np.ndarray, target: np.ndarray, band: float = 0.01) -> bool:
    """True when any cell sits within ``band`` of a dead-zone boundary."""
    from .loss import CONF_DEAD_ZONE, SS_DEAD_ZONE

    d = np.abs(prediction[..., 0] - target[..., 0])
    ss = (prediction[..., 1] - target[..., 1]) ** 2 + (prediction[..., 2] - target[..., 2]) ** 2
    return bool(np.any(np.abs(d - CONF_DEAD_ZONE) <= band) or np.any(np.abs(ss - SS_DEAD_ZONE) <= band))


def gradient_check(model: DelineationNet, features: np.ndarray, target: Grid, epsilon: float = 1e-5,
                   n_coords: int = 200, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative deviation between autograd and central differences.

    Runs in float64 on a copy of ``model``; samples ``n_coords`` parameter
    coordinates (all of them when fewer exist).  Deviation per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    net = DelineationNet(model.config).double()
    net.load_state_dict(model.state_dict())
    net.eval()
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)[None]
    t = torch.as_tensor(target.values, dtype=torch.float64)[None]
    m = torch.as_tensor(target.mask)[None]

    def loss_at(flat: np.ndarray) -> float:
        net.load_flat(flat)
        with torch.no_grad():
            return torch_grid_loss(net(x), t, m).item()

    net.zero_grad()
    torch_grid_loss(net(x), t, m).backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy().copy()
    base = net.flat_parameters().astype(np.float64)

    rng = np.random.default_rng(seed)
    n = base.size
    coords = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
    worst = 0.0
    for j in coords:
        plus, minus = base.copy(), base.copy()
        plus[j] += epsilon
        minus[j] -= epsilon
        numeric = (loss_at(plus) - loss_at(minus)) / (2 * epsilon)
        a = analytic[j]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    net.load_flat(base)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_json(config: ModelConfig) -> dict:
    data = asdict(config)
    data["blocks"] = [list(b) for b in config.blocks]
    return data


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    if "blocks" in data:
        data["blocks"] = tuple(tuple(b) for b in data["blocks"])
    return ModelConfig(**data)


def save_checkpoint(model: DelineationNet, path: str | os.PathLike, epoch: int = 0, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    flat = model.flat_parameters().astype("<f4")
    manifest = {
        "format": "ecgcode-checkpoint/1",
        "config": _config_to_json(model.config),
        "seed": model.config.seed,
        "epoch": epoch,
        "n_params": int(flat.size),
        **(extra or {}),
    }
    (path / CHECKPOINT_PARAMS).write_bytes(flat.tobytes())
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None) -> tuple[DelineationNet, dict]:
    path = Path(path)
    manifest_path, params_path = path / CHECKPOINT_MANIFEST, path / CHECKPOINT_PARAMS
    if not manifest_path.is_file() or not params_path.is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint (needs {CHECKPOINT_MANIFEST} and {CHECKPOINT_PARAMS})")
    manifest = json.loads(manifest_path.read_text())
    config = model_config_from_dict(manifest["config"])
    if expected is not None and _config_to_json(expected) | {"seed": 0} != _config_to_json(config) | {"seed": 0}:
        raise ConfigError(f"checkpoint config {config} does not match expected {expected}")
    flat = np.frombuffer(params_path.read_bytes(), dtype="<f4")
    if flat.size != manifest.get("n_params", flat.size) or flat.size != parameter_count(config):
        raise ConfigError(f"{params_path}: {flat.size} parameters, config implies {parameter_count(config)}")
    model = build_model(config)
    model.load_flat(flat)
    model.eval()
    return model, manifest


# ---------------------------------------------------------------------------
# inference on records


def predict_record(model: DelineationNet, record: EcgRecord, grid_config: GridConfig,
                   stft_config: StftConfig = StftConfig()) -> tuple[Grid, AnnotationSet]:
    """Raw prediction grid and post-processed segments for one record.

    Segment indices are samples at the working rate (1000 Hz); records longer
    than ``grid_config.record_len`` are cropped.
    """
    from .dsp import WORKING_RATE_HZ
    from .grid_codec import decode_annotations

    feats = record_features(record, stft_config, n_samples=grid_config.record_len)
    grid = forward(model, feats)
    n_work = int(round(record.n_samples * WORKING_RATE_HZ / record.sampling_rate_hz))
    return grid, decode_annotations(grid, grid_config, record.id, n_samples=n_work)
