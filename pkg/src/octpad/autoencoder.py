"""Convolutional autoencoder trained on bonafide B-scans only.

The encoder stacks residual blocks of three dilated 3x3 convolutions, each
block followed by a stride-2 convolution. The decoder is a chain of
"bilinear upsample + 3x3 convolution" blocks; the last block emits a single
sigmoid channel, the reconstruction. Every decoder block output is returned
alongside the reconstruction so saliency maps can be built from them.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bscan_io import BScan, Label, ScanVolume
from .errors import (ConfigError, CorruptionError, DivergenceError,
                     IncompatibleCheckpointError, ZeroPAViolation)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OCTPADAE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AEConfig:
    input_height: int = 64
    input_width: int = 192
    encoder_blocks: int = 5
    decoder_blocks: int = 6
    base_channels: int = 8
    atrous_rates: tuple[int, ...] = (1, 2, 5)
    kernel: int = 3
    leaky_slope: float = 0.2
    init_std: float = 0.02
    # 5e-5 barely moves a 0.02-std initialisation within a 20-epoch desk-scale run;
    # at 1e-3 and above the sigmoid output saturates and never recovers
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ConfigError("encoder_blocks and decoder_blocks must be >= 1")
        if self.decoder_blocks < self.encoder_blocks:
            raise ConfigError("decoder_blocks must be >= encoder_blocks to restore the input size")
        step = 2 ** self.encoder_blocks
        if self.input_height % step or self.input_width % step:
            raise ConfigError(f"input {self.input_height}x{self.input_width} is not divisible by {step}")
        if not self.atrous_rates or min(self.atrous_rates) < 1:
            raise ConfigError("atrous rates must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError("kernel size must be odd")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.base_channels < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("base_channels and batch_size must be >= 1, epochs >= 0")

    def channels(self) -> list[int]:
        """Channel width after the stem and after each encoder block."""
        cap = 8 * self.base_channels
        return [min(self.base_channels * 2 ** k, cap) for k in range(self.encoder_blocks + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _conv(cin, cout, k, dilation=1, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, dilation=dilation,
                     padding=dilation * (k // 2), padding_mode="replicate")


class _ResidualAtrousBlock(nn.Module):
    def __init__(self, channels: int, rates: Sequence[int], k: int, slope: float):
        super().__init__()
        self.convs = nn.ModuleList(_conv(channels, channels, k, dilation=r) for r in rates)
        self.slope = slope

    def forward(self, x):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, self.slope)
        # post-activation: skip joins before the final rectifier
        return F.leaky_relu(x + h, self.slope)


class ConvAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels()
        k, slope = cfg.kernel, cfg.leaky_slope
        self.stem = _conv(1, ch[0], k)
        self.res_blocks = nn.ModuleList(
            _ResidualAtrousBlock(ch[i], cfg.atrous_rates, k, slope) for i in range(cfg.encoder_blocks))
        self.downs = nn.ModuleList(
            _conv(ch[i], ch[i + 1], k, stride=2) for i in range(cfg.encoder_blocks))
        dec_out = [ch[max(cfg.encoder_blocks - 1 - j, 0)] for j in range(cfg.decoder_blocks - 1)] + [1]
        dec_in = [ch[-1]] + dec_out[:-1]
        self.dec_convs = nn.ModuleList(_conv(a, b, k) for a, b in zip(dec_in, dec_out))
        self.slope = slope

    def forward(self, x, return_features: bool = False):
        h = F.leaky_relu(self.stem(x), self.slope)
        for res, down in zip(self.res_blocks, self.downs):
            h = F.leaky_relu(down(res(h)), self.slope)
        feats = []
        full = (self.cfg.input_height, self.cfg.input_width)
        last = len(self.dec_convs) - 1
        for j, conv in enumerate(self.dec_convs):
            if tuple(h.shape[-2:]) != full:
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = conv(h)
            h = torch.sigmoid(h) if j == last else F.leaky_relu(h, self.slope)
            feats.append(h)
        return (h, feats) if return_features else h


def _init_weights(net: nn.Module, std: float, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


@dataclass
class AutoencoderModel:
    config: AEConfig
    net: ConvAutoencoder
    trained: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def weights(self) -> dict[str, torch.Tensor]:
        return self.net.state_dict()

    def forward(self, x: np.ndarray | torch.Tensor) -> np.ndarray:
        """Reconstruct an ``(n, H, W)`` or ``(H, W)`` array."""
        recon, _ = reconstruct_stack(self, x)
        return recon


@dataclass
class FeatureMapSet:
    """Decoder block activations for one input, each shaped ``(C, h, w)``."""

    layers: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        """``(height, width, channels)`` of each layer."""
        return [(f.shape[1], f.shape[2], f.shape[0]) for f in self.layers]


@dataclass
class ReconRecord:
    scan_id: str
    bscan_index: int
    raw_error: float
    refined_error: float = float("nan")


def build_model(cfg: AEConfig) -> AutoencoderModel:
    net = ConvAutoencoder(cfg)
    _init_weights(net, cfg.init_std, cfg.seed)
    return AutoencoderModel(cfg, net)


def reconstruction_loss(recon: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``||recon - x||_2 / pixel_count``."""
    diff = (recon - x).flatten(1)
    return (diff.norm(dim=1) / diff.shape[1]).mean()


def _as_batch(x, dtype=torch.float32) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(x), dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return arr[:, None]


def train(model: AutoencoderModel, model_set: Sequence[ScanVolume],
          on_epoch: Callable[[int, float], None] | None = None) -> AutoencoderModel:
    """Fit ``model`` in place on every B-scan of the (bonafide) model set.

    B-scans from all volumes are pooled and reshuffled each epoch with a
    generator derived from the config seed.
    """
    for v in model_set:
        if v.label is not Label.BONAFIDE:
            raise ZeroPAViolation(f"volume {v.scan_id!r} labelled {v.label.value} in the model set")
    if not model_set:
        raise ValueError("empty model set")
    cfg = model.config
    data = np.concatenate([v.stack() for v in model_set])
    if data.shape[1:] != (cfg.input_height, cfg.input_width):
        raise ValueError(f"B-scans are {data.shape[1:]}, model expects "
                         f"{(cfg.input_height, cfg.input_width)}")
    data = _as_batch(data)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))
    model.net.train()
    # vanishing activations otherwise leave the CPU grinding through subnormals
    torch.set_flush_denormal(True)
    try:
        _fit(model, data, opt, rng, on_epoch)
    finally:
        torch.set_flush_denormal(False)
    model.net.eval()
    model.trained = True
    return model


def _fit(model, data, opt, rng, on_epoch) -> None:
    cfg = model.config
    for epoch in range(cfg.epochs):
        order = torch.as_tensor(rng.permutation(len(data)))
        total = 0.0
        for b, start in enumerate(range(0, len(data), cfg.batch_size)):
            batch = data[order[start:start + cfg.batch_size]]
            loss = reconstruction_loss(model.net(batch), batch)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        mean_loss = total / len(data)
        model.history.append(mean_loss)
        log.info("epoch %d loss %.6g", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)


def reconstruct_stack(model: AutoencoderModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched inference: reconstructions ``(n, H, W)`` and per-layer ``(n, C, h, w)`` features."""
    cfg = model.config
    batch = _as_batch(x)
    if tuple(batch.shape[-2:]) != (cfg.input_height, cfg.input_width):
        raise ValueError(f"input is {tuple(batch.shape[-2:])}, model expects "
                         f"{(cfg.input_height, cfg.input_width)}")
    model.net.eval()
    with torch.no_grad():
        recon, feats = model.net(batch, return_features=True)
    return (recon[:, 0].double().numpy(),
            [f.double().numpy() for f in feats])


def reconstruct(model: AutoencoderModel, x: BScan) -> tuple[BScan, FeatureMapSet]:
    recon, feats = reconstruct_stack(model, x.pixels)
    return x.with_pixels(recon[0]), FeatureMapSet([f[0] for f in feats])


def raw_error(x: BScan | np.ndarray, xhat: BScan | np.ndarray) -> float:
    """Euclidean norm of the pixel difference divided by the pixel count."""
    a = x.pixels if isinstance(x, BScan) else np.asarray(x, dtype=np.float64)
    b = xhat.pixels if isinstance(xhat, BScan) else np.asarray(xhat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / a.size)


# --------------------------------------------------------------------------
# Checkpoints: magic, u32 version, u8 trained, u32 config length, config JSON,
# then each state-dict tensor as little-endian float32 in declaration order.

def model_to_bytes(model: AutoencoderModel) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IBI", CHECKPOINT_VERSION, int(model.trained), len(cfg)))
    buf.write(cfg)
    for t in model.net.state_dict().values():
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> AutoencoderModel:
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise CorruptionError("not an autoencoder checkpoint (bad magic)")
    if len(data) < head + 9:
        raise CorruptionError("checkpoint header truncated")
    version, trained, cfg_len = struct.unpack_from("<IBI", data, head)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    pos = head + 9
    if len(data) < pos + cfg_len:
        raise CorruptionError("checkpoint config truncated")
    cfg = AEConfig.from_dict(json.loads(data[pos:pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    model = build_model(cfg)
    state = model.net.state_dict()
    for name, t in state.items():
        nbytes = t.numel() * 4
        if len(data) < pos + nbytes:
            raise CorruptionError(f"checkpoint truncated inside tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=t.numel(), offset=pos).reshape(tuple(t.shape))
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(data):
        raise CorruptionError(f"{len(data) - pos} trailing bytes after checkpoint tensors")
    model.net.load_state_dict(state)
    model.net.eval()
    model.trained = bool(trained)
    return model


def save_model(model: AutoencoderModel, path) -> str:
    """Write a checkpoint and return its SHA-256 hex digest."""
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path) -> AutoencoderModel:
    return model_from_bytes(Path(path).read_bytes())


def model_digest(model: AutoencoderModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
