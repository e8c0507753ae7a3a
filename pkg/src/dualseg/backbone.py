"""Compact-UNet segmenter and its deterministic / Monte Carlo forward passes."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BayesianEstimate, Patch, SoftPrediction, binary_entropy

CHECKPOINT_FORMAT = "dualseg-unet/1"


@dataclass
class NetworkSpec:
    __pydantic_config__ = {"extra": "forbid"}

    side: int = 48
    in_channels: int = 1
    enc_channels: tuple = ((32, 64), (128, 128), (256, 256))
    dec_channels: tuple = ((128, 128), (64, 64))
    up_channels: tuple = (64, 32)  # transposed-conv output widths, deepest first
    dropout: float = 0.5
    dropout_convs: tuple = (3, 4, 5, 6, 7, 8)  # 1-based conv indices preceded by dropout

    def __post_init__(self):
        self.enc_channels = tuple(tuple(int(c) for c in lvl) for lvl in self.enc_channels)
        self.dec_channels = tuple(tuple(int(c) for c in lvl) for lvl in self.dec_channels)
        self.up_channels = tuple(int(c) for c in self.up_channels)
        self.dropout_convs = tuple(int(i) for i in self.dropout_convs)
        if len(self.enc_channels) != len(self.dec_channels) + 1:
            raise ValueError("need exactly one more encoder level than decoder levels")
        if len(self.up_channels) != len(self.dec_channels):
            raise ValueError("up_channels must match the number of decoder levels")
        if self.side % (2 ** len(self.dec_channels)):
            raise ValueError(f"side {self.side} not divisible by {2 ** len(self.dec_channels)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @classmethod
    def tiny(cls, side: int = 24):
        """A narrow variant for tests and quick experiments."""
        return cls(side=side, enc_channels=((4, 8), (8, 8), (16, 16)),
                   dec_channels=((8, 8), (8, 8)), up_channels=(8, 4))


@dataclass
class BayesianConfig:
    __pydantic_config__ = {"extra": "forbid"}

    passes: int = 8
    noise_std: float = 0.05
    dropout: bool = True

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, drop):
        super().__init__()
        self.drop = drop
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm3d(cout)

    def forward(self, x, mc):
        if self.drop > 0:
            x = F.dropout(x, self.drop, training=self.training or mc)
        return F.relu(self.bn(self.conv(x)))


class CompactUNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.mc_dropout = False
        idx = iter(range(1, 100))

        def block(cin, cout):
            i = next(idx)
            return ConvBlock(cin, cout, spec.dropout if i in spec.dropout_convs else 0.0)

        self.encoder = nn.ModuleList()
        cin = spec.in_channels
        skips = []
        for a, b in spec.enc_channels:
            self.encoder.append(nn.ModuleList([block(cin, a), block(a, b)]))
            skips.append(b)
            cin = b
        self.pool = nn.MaxPool3d(3, stride=2, padding=1)
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for (a, b), up, skip in zip(spec.dec_channels, spec.up_channels, reversed(skips[:-1])):
            self.ups.append(nn.ConvTranspose3d(cin, up, 2, stride=2))
            self.decoder.append(nn.ModuleList([block(up + skip, a), block(a, b)]))
            cin = b
        self.head = nn.Conv3d(cin, 1, 1)

    def forward(self, x):
        mc = self.mc_dropout
        feats = []
        for level, (c1, c2) in enumerate(self.encoder):
            if level:
                x = self.pool(x)
            x = c2(c1(x, mc), mc)
            feats.append(x)
        for up, (c1, c2), skip in zip(self.ups, self.decoder, reversed(feats[:-1])):
            x = torch.cat([up(x), skip], dim=1)
            x = c2(c1(x, mc), mc)
        return torch.sigmoid(self.head(x))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def build_network(spec: NetworkSpec | None = None, seed: int = 0) -> CompactUNet:
    spec = spec or NetworkSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CompactUNet(spec)
    net.build_seed = seed
    return net


@contextlib.contextmanager
def mc_mode(net: nn.Module, enabled: bool = True):
    old = getattr(net, "mc_dropout", False)
    net.mc_dropout = enabled
    try:
        yield net
    finally:
        net.mc_dropout = old


@contextlib.contextmanager
def frozen_bn_stats(*nets: nn.Module):
    """Run forwards without letting batch-norm running statistics move."""
    saved = [{k: v.clone() for k, v in net.state_dict().items()
              if k.endswith(("running_mean", "running_var", "num_batches_tracked"))}
             for net in nets]
    try:
        yield
    finally:
        for net, buf in zip(nets, saved):
            net.load_state_dict(buf, strict=False)


def _as_input(patch, side: int) -> torch.Tensor:
    data = patch.data if isinstance(patch, Patch) else patch
    x = torch.as_tensor(np.asarray(data), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[:, None]
    if tuple(x.shape[-3:]) != (side, side, side):
        raise ValueError(f"patch shape {tuple(x.shape[-3:])} does not match network side {side}")
    return x


def forward(net: CompactUNet, patch, deterministic: bool = True) -> SoftPrediction:
    x = _as_input(patch, net.spec.side)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad(), mc_mode(net, not deterministic):
            out = net(x)
    finally:
        net.train(was_training)
    return SoftPrediction(out[0, 0].numpy())


def mc_passes(net: CompactUNet, x: torch.Tensor, cfg: BayesianConfig, batch_stats: bool = False):
    """Mean of ``cfg.passes`` noisy, dropout-perturbed forwards of a batch tensor.

    ``batch_stats`` keeps batch-norm in training mode (as for the loss forward)
    while protecting its running statistics.
    """
    was_training = net.training
    net.train(batch_stats)
    total = torch.zeros_like(x)
    try:
        with torch.no_grad(), mc_mode(net, cfg.dropout), frozen_bn_stats(net):
            for _ in range(cfg.passes):
                noisy = x + cfg.noise_std * torch.randn_like(x) if cfg.noise_std > 0 else x
                total += net(noisy)
    finally:
        net.train(was_training)
    return total / cfg.passes


def bayesian_estimate(net: CompactUNet, patch, cfg: BayesianConfig | None = None) -> BayesianEstimate:
    cfg = cfg or BayesianConfig()
    x = _as_input(patch, net.spec.side)
    mean = mc_passes(net, x, cfg)[0, 0].numpy()
    return BayesianEstimate(mean=mean, entropy=binary_entropy(mean).astype(np.float32),
                            passes=cfg.passes)


def save_network(net: CompactUNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(net.spec),
        "seed": getattr(net, "build_seed", None),
        "state_dict": net.state_dict(),
    }, path)
    return path


def load_network(path) -> CompactUNet:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    net = CompactUNet(NetworkSpec(**blob["spec"]))
    net.load_state_dict(blob["state_dict"])
    net.build_seed = blob["seed"]
    return net
