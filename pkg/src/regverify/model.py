"""Early-fusion dual-branch verifier with bidirectional cross-attention.

Pipeline: concatenate X-ray and DRR along the channel axis, push through a
stem block sized for the doubled input channels and then standard conv
blocks (conv3x3 - GELU - conv3x3 - GELU - maxpool2x2/2 - batchnorm), split
the final map into two channel halves, let each half attend to the other
with scaled dot-product attention over spatial tokens, average the two
attended maps, and classify with a single logit.

The last conv map (pre-split) is cached on every forward pass for Grad-CAM.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .dataset import ImagePair
from .errors import ConfigError, InvalidInputError, InvalidStateError
from .geometry import RegistrationLabel


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    stem_out_channels: int = 16
    block_channels: tuple[int, ...] = (32, 64)
    attention_heads: int = 1
    attention_dim: int | None = None  # default: half-branch channel count
    dropout_rate: float = 0.3
    fc_hidden: int | None = None

    def __post_init__(self):
        channels = (self.stem_out_channels, *self.block_channels)
        if any(c <= 0 or c % 2 for c in channels):
            raise ConfigError("all channel counts must be positive and even")
        stages = len(channels)
        if self.input_size % (2**stages) != 0:
            raise ConfigError(
                f"input size {self.input_size} not divisible by 2^{stages} pooling stages"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")
        if self.attention_heads < 1:
            raise ConfigError("attention needs at least one head")
        branch = channels[-1] // 2
        dim = self.attention_dim if self.attention_dim is not None else branch
        if dim % self.attention_heads:
            raise ConfigError("attention dim must divide evenly across heads")

    @property
    def last_conv_channels(self) -> int:
        return self.block_channels[-1] if self.block_channels else self.stem_out_channels

    @property
    def branch_channels(self) -> int:
        return self.last_conv_channels // 2

    @property
    def last_conv_size(self) -> int:
        return self.input_size // (2 ** (1 + len(self.block_channels)))

    def resolved_attention_dim(self) -> int:
        return self.attention_dim if self.attention_dim is not None else self.branch_channels

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_out_channels": self.stem_out_channels,
            "block_channels": list(self.block_channels),
            "attention_heads": self.attention_heads,
            "attention_dim": self.attention_dim,
            "dropout_rate": self.dropout_rate,
            "fc_hidden": self.fc_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_channels"] = tuple(d["block_channels"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PredictionOutput:
    logit: float
    probability_accept: float
    predicted_label: RegistrationLabel
    feature_map: np.ndarray  # last conv map, (C, H, W)

    @property
    def probability_reject(self) -> float:
        return 1.0 - self.probability_accept

    @property
    def probability_pair(self) -> tuple[float, float]:
        """(p_accept, p_reject)."""
        return (self.probability_accept, self.probability_reject)


class ConvBlock(nn.Module):
    """conv3x3 -> GELU -> conv3x3 -> GELU -> maxpool 2x2/2 -> batchnorm."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ConfigError(f"conv block needs even spatial dims, got {tuple(x.shape[-2:])}")
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return self.norm(self.pool(x))


def split_channels(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split (B, C, H, W) into two channel halves; concatenation inverts it."""
    channels = features.shape[1]
    if channels % 2:
        raise ConfigError(f"cannot split odd channel count {channels}")
    half = channels // 2
    return features[:, :half], features[:, half:]


class BidirectionalCrossAttention(nn.Module):
    """Each modality's spatial tokens attend to the other modality's tokens.

    Queries come from one branch, keys/values from the other, scaled by
    1/sqrt(head dim).  No output projection and no positional encoding:
    convolution already encodes locality.
    """

    def __init__(self, channels: int, heads: int = 1, dim: int | None = None):
        super().__init__()
        dim = dim if dim is not None else channels
        if dim % heads:
            raise ConfigError("attention dim must divide evenly across heads")
        self.heads = heads
        self.dim = dim
        self.q_a = nn.Linear(channels, dim)
        self.k_a = nn.Linear(channels, dim)
        self.v_a = nn.Linear(channels, channels)
        self.q_b = nn.Linear(channels, dim)
        self.k_b = nn.Linear(channels, dim)
        self.v_b = nn.Linear(channels, channels)
        self._last_weights: tuple[torch.Tensor, torch.Tensor] | None = None

    def _attend(self, q, k, v):
        b, n, _ = q.shape
        head_dim = self.dim // self.heads
        v_dim = v.shape[-1] // self.heads
        q = q.view(b, n, self.heads, head_dim).transpose(1, 2)
        k = k.view(b, n, self.heads, head_dim).transpose(1, 2)
        v = v.view(b, n, self.heads, v_dim).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, -1)
        return out, weights

    def forward(
        self, feat_a: torch.Tensor, feat_b: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if feat_a.shape != feat_b.shape:
            raise InvalidInputError(
                f"branch shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}"
            )
        b, c, h, w = feat_a.shape
        tokens_a = feat_a.flatten(2).transpose(1, 2)  # (B, HW, C)
        tokens_b = feat_b.flatten(2).transpose(1, 2)
        att_a, w_ab = self._attend(self.q_a(tokens_a), self.k_b(tokens_b), self.v_b(tokens_b))
        att_b, w_ba = self._attend(self.q_b(tokens_b), self.k_a(tokens_a), self.v_a(tokens_a))
        self._last_weights = (w_ab.detach(), w_ba.detach())
        att_a = att_a.transpose(1, 2).view(b, c, h, w)
        att_b = att_b.transpose(1, 2).view(b, c, h, w)
        return att_a, att_b

    @property
    def last_attention_weights(self):
        return self._last_weights


def fuse(att_a: torch.Tensor, att_b: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of the two attended maps."""
    if att_a.shape != att_b.shape:
        raise InvalidInputError("fuse needs equal shapes")
    return (att_a + att_b) / 2.0


class VerifierNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks = [ConvBlock(2, config.stem_out_channels)]
        in_ch = config.stem_out_channels
        for out_ch in config.block_channels:
            blocks.append(ConvBlock(in_ch, out_ch))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.attention = BidirectionalCrossAttention(
            config.branch_channels,
            heads=config.attention_heads,
            dim=config.resolved_attention_dim(),
        )
        self.dropout = nn.Dropout(config.dropout_rate)
        flat = config.branch_channels * config.last_conv_size**2
        if config.fc_hidden:
            self.head = nn.Sequential(
                nn.Linear(flat, config.fc_hidden), nn.GELU(), nn.Linear(config.fc_hidden, 1)
            )
        else:
            self.head = nn.Linear(flat, 1)
        self.last_feature_map: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 2, H, W) -> (B,) logits.  Caches the last conv map."""
        if x.ndim != 4 or x.shape[1] != 2 or x.shape[-1] != self.config.input_size:
            raise InvalidInputError(
                f"expected (B, 2, {self.config.input_size}, {self.config.input_size}), "
                f"got {tuple(x.shape)}"
            )
        for block in self.blocks:
            x = block(x)
        self.last_feature_map = x
        feat_a, feat_b = split_channels(x)
        att_a, att_b = self.attention(feat_a, feat_b)
        fused = fuse(att_a, att_b)
        flat = self.dropout(fused.flatten(1))
        return self.head(flat).squeeze(-1)


def pair_to_tensor(pair: ImagePair, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([pair.xray, pair.drr])[None]).to(dtype)


def predict(model: VerifierNet, pair: ImagePair) -> PredictionOutput:
    """Deterministic inference on one pair (eval mode, no grad)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logit = float(model(pair_to_tensor(pair)).item())
    finally:
        model.train(was_training)
    if not math.isfinite(logit):
        raise InvalidStateError("model produced a non-finite logit")
    prob = 1.0 / (1.0 + math.exp(-logit))
    label = RegistrationLabel.ACCEPT if prob >= 0.5 else RegistrationLabel.REJECT
    feature_map = model.last_feature_map[0].detach().cpu().numpy()
    return PredictionOutput(logit, prob, label, feature_map)


def predict_batch(model: VerifierNet, pairs: list[ImagePair]) -> list[PredictionOutput]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = torch.from_numpy(
                np.stack([np.stack([p.xray, p.drr]) for p in pairs])
            ).float()
            logits = model(batch)
            maps = model.last_feature_map.detach().cpu().numpy()
    finally:
        model.train(was_training)
    outputs = []
    for i, logit_t in enumerate(logits):
        logit = float(logit_t.item())
        if not math.isfinite(logit):
            raise InvalidStateError("model produced a non-finite logit")
        prob = 1.0 / (1.0 + math.exp(-logit))
        label = RegistrationLabel.ACCEPT if prob >= 0.5 else RegistrationLabel.REJECT
        outputs.append(PredictionOutput(logit, prob, label, maps[i]))
    return outputs


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: VerifierNet,
    train_specimens: list[str] | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "state_dict": model.state_dict(),
        "train_specimens": train_specimens or [],
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[VerifierNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(payload["model_config"])
    if payload["config_hash"] != config.hash():
        raise InvalidStateError("checkpoint config hash mismatch")
    model = VerifierNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
