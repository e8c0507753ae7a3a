"""Labeled/unlabeled discriminator and the contextual encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import SegmentationMask, SoftPrediction


@dataclass
class HeadSpec:
    __pydantic_config__ = {"extra": "forbid"}

    side: int = 48
    channels: tuple = (32, 64, 128, 128)
    context_dim: int = 64
    negative_slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    @classmethod
    def tiny(cls, side: int = 24):
        return cls(side=side, channels=(4, 8, 8, 8), context_dim=8)


class _ConvStack(nn.Module):
    def __init__(self, spec: HeadSpec):
        super().__init__()
        layers = []
        cin = 1
        for c in spec.channels:
            layers += [nn.Conv3d(cin, c, 3, stride=2, padding=1), nn.BatchNorm3d(c),
                       nn.LeakyReLU(spec.negative_slope)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class Discriminator(nn.Module):
    """Probability that a prediction patch comes from a labeled sample."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.features = _ConvStack(spec)
        self.fc = nn.Linear(self.features.out_channels, 1)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc(h))[:, 0]


class ContextEncoder(nn.Module):
    """Discriminator conv stack without the FC head, plus one extra conv, pooled to a vector."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.features = _ConvStack(spec)
        self.extra = nn.Conv3d(self.features.out_channels, spec.context_dim, 3, padding=1)

    def forward(self, x):
        return self.extra(self.features(x)).mean(dim=(2, 3, 4))


def build_heads(spec: HeadSpec | None = None, seed: int = 0):
    spec = spec or HeadSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        disc = Discriminator(spec)
        ce = ContextEncoder(spec)
    return disc, ce


def _to_tensor(patch, side):
    if isinstance(patch, (SoftPrediction, SegmentationMask)):
        patch = patch.data
    x = torch.as_tensor(np.asarray(patch), dtype=torch.float32)
    while x.ndim < 5:
        x = x[None]
    if tuple(x.shape[-3:]) != (side,) * 3:
        raise ValueError(f"patch shape {tuple(x.shape[-3:])} does not match head side {side}")
    return x


def _eval_call(module, x):
    was = module.training
    module.eval()
    try:
        with torch.no_grad():
            return module(x)
    finally:
        module.train(was)


def discriminate(disc: Discriminator, pred) -> float:
    return float(_eval_call(disc, _to_tensor(pred, disc.spec.side))[0])


def encode_context(ce: ContextEncoder, patch) -> np.ndarray:
    return _eval_call(ce, _to_tensor(patch, ce.spec.side))[0].numpy()


def heads_state(disc, ce) -> dict:
    return {"spec": asdict(disc.spec), "disc": disc.state_dict(), "ce": ce.state_dict()}


def heads_from_state(blob):
    spec = HeadSpec(**blob["spec"])
    disc, ce = Discriminator(spec), ContextEncoder(spec)
    disc.load_state_dict(blob["disc"])
    ce.load_state_dict(blob["ce"])
    return disc, ce
