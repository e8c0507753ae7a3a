"""Dual-network semi-supervised training loop, checkpoint bundles and diagnostics."""
from __future__ import annotations

import contextlib
import copy
import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import TypeAdapter

from .backbone import (CHECKPOINT_FORMAT, BayesianConfig, NetworkSpec, build_network, frozen_bn_stats,
                       load_network, mc_passes)
from .core import DatasetSplit, HybridLossConfig, SegmentationMask, Volume
from .heads import HeadSpec, build_heads, heads_state
from .losses import (LossBreakdown, context_loss, entropy_map, entropy_threshold, hybrid_semi_loss,
                     inter_loss, inter_mask, intra_loss, label_adversarial_losses, stable_mask,
                     supervised_loss)
from .metrics import dice
from .phantom import AugmentationConfig, augment
from .pipeline import Locator, locate, predict_volume

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "dualseg-bundle/1"
METRIC_COLUMNS = ("step", "L_sup", "L_intra", "L_inter", "L_LCont", "L_NCont", "val_DSC",
                  "param_distance")


@dataclass
class TrainConfig:
    __pydantic_config__ = {"extra": "forbid"}

    steps: int = 10000
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    lr: float = 1e-4
    loss: HybridLossConfig = field(default_factory=HybridLossConfig)
    bayes: BayesianConfig = field(default_factory=BayesianConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    heads: HeadSpec = field(default_factory=HeadSpec)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    val_every: int = 100
    log_every: int = 10
    patience: int = 10  # validation rounds without Dice gain; 0 disables early stop
    checkpoint_every: int = 0  # 0: only at the end
    seed_net1: int = 1
    seed_net2: int = 2
    seed_data: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ValueError("need at least one labeled patch per batch")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.val_every < 1 or self.log_every < 1:
            raise ValueError("val_every and log_every must be >= 1")
        if self.heads.side != self.network.side:
            raise ValueError(f"head side {self.heads.side} != network side {self.network.side}")

    @property
    def batch_size(self) -> int:
        return self.labeled_per_batch + self.unlabeled_per_batch

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return TypeAdapter(cls).validate_python(d)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump


# --- sampling ------------------------------------------------------------------

class EpochSampler:
    """Cycles through shuffled index permutations so no sample starves."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("nothing to sample from")
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
                self.epoch += 1
            out.append(int(self.perm[self.pos]))
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"n": self.n, "perm": self.perm.tolist(), "pos": self.pos, "epoch": self.epoch}

    def restore(self, s: dict):
        self.n, self.perm, self.pos, self.epoch = s["n"], np.array(s["perm"]), s["pos"], s["epoch"]


class PatchSampler:
    """Builds mini-batches of augmented, jitter-cropped patches around instrument centers."""

    def __init__(self, dataset: DatasetSplit, config: TrainConfig, supervised: bool):
        if dataset.n_labeled < 1:
            raise ValueError("training needs at least one labeled volume")
        self.dataset = dataset
        self.config = config
        self.supervised = supervised or dataset.n_unlabeled == 0
        self.rng = np.random.Generator(np.random.PCG64(config.seed_data))
        self.labeled = EpochSampler(dataset.n_labeled, self.rng)
        self.unlabeled = EpochSampler(dataset.n_unlabeled, self.rng) if dataset.n_unlabeled else None
        centers = list(dataset.unlabeled_centers)
        if len(centers) != dataset.n_unlabeled:
            loc = Locator(kind="centroid")
            centers = [locate(loc, v) for v in dataset.unlabeled]
        self.unlabeled_centers = centers

    def _crop(self, data, center, size, fill):
        lo = [c - size // 2 for c in center]
        out = np.full((size,) * 3, fill, dtype=data.dtype)
        src = tuple(slice(max(a, 0), min(a + size, s)) for a, s in zip(lo, data.shape))
        dst = tuple(slice(sl.start - a, sl.stop - a) for sl, a in zip(src, lo))
        out[dst] = data[src]
        return out

    def patch(self, volume: Volume, mask, center):
        cfg = self.config
        side = cfg.network.side
        jit = cfg.augmentation.jitter
        # augment a context cube (with a rotation margin), then take the jittered crop
        size = side + 2 * jit + 2 * int(math.ceil(0.15 * side))
        vol = self._crop(volume.data, center, size, float(np.median(volume.data)))
        msk = self._crop(mask.data, center, size, 0) if mask is not None else np.zeros_like(vol, np.uint8)
        local = (size // 2,) * 3
        v, m, c = augment(Volume(vol), SegmentationMask(msk), local, cfg.augmentation,
                          int(self.rng.integers(2 ** 32)))
        shift = self.rng.integers(-jit, jit + 1, 3) if jit else np.zeros(3, int)
        o = [int(min(max(ci - side // 2 + s, 0), size - side)) for ci, s in zip(c, shift)]
        sl = tuple(slice(a, a + side) for a in o)
        return v.data[sl], m.data[sl]

    def next_batch(self):
        cfg = self.config
        n_l = cfg.batch_size if self.supervised else cfg.labeled_per_batch
        n_u = 0 if self.supervised else cfg.unlabeled_per_batch
        xl, yl, xu = [], [], []
        for i in self.labeled.take(n_l):
            vol, msk, c = self.dataset.labeled[i]
            x, y = self.patch(vol, msk, c)
            xl.append(x)
            yl.append(y)
        for i in (self.unlabeled.take(n_u) if n_u else []):
            x, _ = self.patch(self.dataset.unlabeled[i], None, self.unlabeled_centers[i])
            xu.append(x)
        t = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))[:, None]  # noqa: E731
        return t(xl), t(yl), (t(xu) if xu else None)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "labeled": self.labeled.state(),
                "unlabeled": self.unlabeled.state() if self.unlabeled else None}

    def restore(self, s: dict):
        self.rng.bit_generator.state = s["rng"]
        self.labeled.restore(s["labeled"])
        if self.unlabeled is not None:
            self.unlabeled.restore(s["unlabeled"])


# --- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    net1: torch.nn.Module
    net2: torch.nn.Module
    disc: torch.nn.Module
    ce: torch.nn.Module
    opt1: torch.optim.Optimizer
    opt2: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    opt_ce: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)  # metric rows (dicts)
    best: dict = field(default_factory=dict)  # step, dice, net1, net2 state dicts
    stale_rounds: int = 0
    stopped_early: bool = False
    sampler: object = None

    def loss_config(self) -> HybridLossConfig:
        """Loss config with weights of disabled terms zeroed."""
        c = self.config.loss
        return dataclasses.replace(
            c, alpha=c.alpha if (c.intra_active or c.inter_active) else 0.0,
            beta=c.beta if c.lcont_active else 0.0, gamma=c.gamma if c.ncont_active else 0.0)


def init_state(config: TrainConfig) -> TrainState:
    net1 = build_network(config.network, config.seed_net1)
    net2 = build_network(config.network, config.seed_net2)
    disc, ce = build_heads(config.heads, config.seed_net1 + config.seed_net2)
    adam = lambda m: torch.optim.Adam(m.parameters(), lr=config.lr)  # noqa: E731
    for m in (net1, net2, disc, ce):
        m.train()
    return TrainState(config, net1, net2, disc, ce, adam(net1), adam(net2), adam(disc), adam(ce))


def parameter_distance(net1: torch.nn.Module, net2: torch.nn.Module) -> float:
    """L1 distance summed over all paired parameters."""
    p1 = dict(net1.named_parameters())
    p2 = dict(net2.named_parameters())
    if p1.keys() != p2.keys() or any(p1[k].shape != p2[k].shape for k in p1):
        raise ValueError("networks have different architectures")
    with torch.no_grad():
        return float(sum((p1[k].double() - p2[k].double()).abs().sum() for k in p1))


@contextlib.contextmanager
def _frozen_module(module):
    """Block gradients into ``module`` and keep its batch-norm statistics."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        with frozen_bn_stats(module):
            yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _check_finite(state, name, value, extra):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {name} loss at step {state.step}",
                               dump={"step": state.step, "component": name, **extra})


def training_step(state: TrainState, batch):
    """One iteration: Bayesian estimates, net1 update, net2 update, discriminator update.

    Returns ``(breakdown1, breakdown2, disc_loss)``; ``disc_loss`` is None when the
    adversarial term is inactive.
    """
    cfg = state.loss_config()
    t = state.step
    xl, yl, xu = batch
    n_l = len(xl)
    x = xl if xu is None else torch.cat([xl, xu], 0)
    net1, net2 = state.net1, state.net2
    semi = xu is not None
    need_bayes = semi and (cfg.intra_active or cfg.inter_active)

    if need_bayes:
        bayes = state.config.bayes
        pb1 = mc_passes(net1, x, bayes, batch_stats=True)
        pb2 = mc_passes(net2, x, bayes, batch_stats=True)
        ub1, ub2 = entropy_map(pb1), entropy_map(pb2)
    net1.train()
    net2.train()
    y1 = net1(x)
    y2 = net2(x)

    # voxel-selection masks from pre-update outputs, shared by both updates
    region = slice(0, None) if cfg.apply_consistency_to_labeled else slice(n_l, None)
    thr1 = entropy_threshold(cfg.tau1, t, cfg)
    thr2 = entropy_threshold(cfg.tau2, t, cfg)
    if need_bayes and cfg.inter_active:
        d1, d2 = y1.detach(), y2.detach()
        s1 = stable_mask(d1, pb1, entropy_map(d1), ub1, thr2, cfg.stable_agreement)
        s2 = stable_mask(d2, pb2, entropy_map(d2), ub2, thr2, cfg.stable_agreement)
        m1, m2 = inter_mask(s1, s2, (d1 - pb1) ** 2, (d2 - pb2) ** 2)

    def components(k, y, y_other, pb, ub, m):
        comp = {"sup": supervised_loss(y[:n_l], yl, cfg.bce_reduction), "counts": {}}
        if need_bayes and cfg.intra_active:
            sel = ub[region] < thr1
            comp["intra"] = intra_loss(y[region], pb[region], ub[region], thr1)
            comp["counts"]["intra"] = int(sel.sum())
        if need_bayes and cfg.inter_active:
            comp["inter"] = inter_loss(y[region], y_other[region], m[region])
            comp["counts"]["inter"] = int(m[region].sum())
        if semi and cfg.lcont_active:
            comp["LCont"] = label_adversarial_losses(state.disc, y[:n_l], y[n_l:])[1]
        if semi and cfg.ncont_active:
            o = y_other.detach()
            if k == 1:
                comp["NCont"] = context_loss(state.ce, y[:n_l], o[:n_l], yl, y[n_l:], o[n_l:])
            else:
                comp["NCont"] = context_loss(state.ce, o[:n_l], y[:n_l], yl, o[n_l:], y[n_l:])
        return comp

    # the discriminator only supplies gradients here; its batch-norm buffers are
    # restored after both backward passes
    with _frozen_module(state.disc):
        out = []
        for k, (net, opt, y, y_other) in enumerate(((net1, state.opt1, y1, y2), (net2, state.opt2, y2, y1)), 1):
            pb, ub = ((pb1, ub1) if k == 1 else (pb2, ub2)) if need_bayes else (None, None)
            m = (m1 if k == 1 else m2) if (need_bayes and cfg.inter_active) else None
            br = hybrid_semi_loss(components(k, y, y_other, pb, ub, m), cfg, t)
            _check_finite(state, f"net{k}", br.total, br.as_row())
            opt.zero_grad(set_to_none=True)
            use_ce = semi and cfg.ncont_active
            if use_ce:
                state.opt_ce.zero_grad(set_to_none=True)
            br.total_tensor.backward()
            opt.step()
            if use_ce:
                state.opt_ce.step()
            br.total_tensor = None
            out.append(br)

    disc_loss = None
    if semi and cfg.lcont_active:
        preds_l = torch.cat([y1[:n_l], y2[:n_l]]).detach()
        preds_u = torch.cat([y1[n_l:], y2[n_l:]]).detach()
        ld, _ = label_adversarial_losses(state.disc, preds_l, preds_u)
        disc_loss = float(ld.detach())
        _check_finite(state, "discriminator", disc_loss, {})
        state.opt_disc.zero_grad(set_to_none=True)
        ld.backward()
        state.opt_disc.step()

    state.step += 1
    return out[0], out[1], disc_loss


# --- validation and the outer loop ----------------------------------------------

def validation_dice(state: TrainState, volumes) -> float:
    if not volumes:
        return float("nan")
    scores = []
    loc = Locator(kind="oracle", sigma=0.0)
    for vol, msk, c in volumes:
        _, pred = predict_volume(state.net1, state.net2, vol, locate(loc, vol, c))
        scores.append(dice(pred.data, msk.data))
    return float(np.mean(scores))


def _metric_row(state, brs, val):
    b1, b2 = brs
    mean = lambda a, b: (a + b) / 2.0  # noqa: E731
    return {"step": state.step, "L_sup": mean(b1.sup, b2.sup), "L_intra": mean(b1.intra, b2.intra),
            "L_inter": mean(b1.inter, b2.inter), "L_LCont": mean(b1.lcont, b2.lcont),
            "L_NCont": mean(b1.ncont, b2.ncont), "val_DSC": val,
            "param_distance": parameter_distance(state.net1, state.net2)}


def _validate(state, dataset):
    val = validation_dice(state, dataset.validation)
    if math.isnan(val):
        return val
    if not state.best or val > state.best["dice"]:
        state.best = {"step": state.step, "dice": val,
                      "net1": copy.deepcopy(state.net1.state_dict()),
                      "net2": copy.deepcopy(state.net2.state_dict())}
        state.stale_rounds = 0
    else:
        state.stale_rounds += 1
    log.info("step %d  val DSC %.4f  (best %.4f @ %d)", state.step, val, state.best["dice"],
             state.best["step"])
    return val


def train(config: TrainConfig, dataset: DatasetSplit, out_dir=None, resume: bool = False,
          stop_after: int | None = None) -> TrainState:
    """Run (or continue) training; writes a bundle to ``out_dir`` when given.

    ``stop_after`` halts after that many steps in this call without changing
    ``config.steps`` (used to test save/resume).
    """
    if dataset.n_labeled < 1:
        raise ValueError("training needs at least one labeled volume")
    out_dir = Path(out_dir) if out_dir is not None else None
    supervised = not config.loss.any_semi
    sampler = PatchSampler(dataset, config, supervised)
    if resume:
        if out_dir is None:
            raise ValueError("resume needs the bundle directory")
        state = load_bundle(out_dir, sampler=sampler)
        # the caller's config wins (e.g. a larger step budget); architectures must match
        if asdict(state.config.network) != asdict(config.network):
            raise ValueError("resume config changes the network architecture")
        state.config = config
    else:
        torch.manual_seed(config.seed_data)
        state = init_state(config)
        state.history.append(_metric_row(state, (_zero_breakdown(), _zero_breakdown()),
                                         _validate(state, dataset)))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    loss_log = (out_dir / "loss_log.jsonl").open("a") if out_dir is not None else None
    done_here = 0
    try:
        while state.step < config.steps and not state.stopped_early:
            if stop_after is not None and done_here >= stop_after:
                break
            batch = sampler.next_batch()
            try:
                b1, b2, ld = training_step(state, batch)
            except TrainingDiverged as exc:
                if out_dir is not None:
                    save_bundle(state, out_dir, sampler, name="diverged")
                    exc.dump = {**(exc.dump or {}), "bundle": str(out_dir / "diverged")}
                raise
            done_here += 1
            if loss_log is not None:
                loss_log.write(json.dumps({"step": state.step, "net1": b1.as_row(), "net2": b2.as_row(),
                                           "L_disc": ld}) + "\n")
            val_now = state.step % config.val_every == 0 or state.step == config.steps
            if val_now or state.step % config.log_every == 0:
                val = _validate(state, dataset) if val_now else float("nan")
                state.history.append(_metric_row(state, (b1, b2), val))
                if val_now and config.patience and state.stale_rounds >= config.patience:
                    log.info("early stop at step %d", state.step)
                    state.stopped_early = True
            if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_bundle(state, out_dir, sampler)
    finally:
        if loss_log is not None:
            loss_log.close()
    if out_dir is not None:
        save_bundle(state, out_dir, sampler)
    state.sampler = sampler
    return state


def _zero_breakdown():
    nan = float("nan")
    return LossBreakdown(nan, nan, nan, nan, nan, nan, (0.0, 0.0, 0.0))


# --- bundle I/O --------------------------------------------------------------------

def metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def _net_blob(state_dict, spec, seed):
    return {"format": CHECKPOINT_FORMAT, "spec": asdict(spec), "seed": seed, "state_dict": state_dict}


def save_bundle(state: TrainState, out_dir, sampler: PatchSampler | None = None, name: str | None = None) -> Path:
    root = Path(out_dir) / name if name else Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    torch.save(_net_blob(state.net1.state_dict(), cfg.network, cfg.seed_net1), root / "net1.pt")
    torch.save(_net_blob(state.net2.state_dict(), cfg.network, cfg.seed_net2), root / "net2.pt")
    torch.save(heads_state(state.disc, state.ce), root / "heads.pt")
    torch.save({
        "format": BUNDLE_FORMAT,
        "step": state.step,
        "opt1": state.opt1.state_dict(), "opt2": state.opt2.state_dict(),
        "opt_disc": state.opt_disc.state_dict(), "opt_ce": state.opt_ce.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "sampler": sampler.state() if sampler is not None else None,
        "history": state.history,
        "best_meta": {k: state.best[k] for k in ("step", "dice")} if state.best else {},
        "stale_rounds": state.stale_rounds,
        "stopped_early": state.stopped_early,
    }, root / "optim.pt")
    if state.best:
        torch.save(_net_blob(state.best["net1"], cfg.network, cfg.seed_net1), root / "best_net1.pt")
        torch.save(_net_blob(state.best["net2"], cfg.network, cfg.seed_net2), root / "best_net2.pt")
    (root / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (root / "metrics.csv").write_text(metrics_csv(state.history))
    return root


def load_bundle(out_dir, sampler: PatchSampler | None = None) -> TrainState:
    root = Path(out_dir)
    cfg = TrainConfig.from_dict(json.loads((root / "train_config.json").read_text()))
    state = init_state(cfg)
    blob = torch.load(root / "optim.pt", map_location="cpu", weights_only=False)
    if blob.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{root}: not a training bundle")
    for key, net in (("net1", state.net1), ("net2", state.net2)):
        net.load_state_dict(torch.load(root / f"{key}.pt", map_location="cpu", weights_only=False)["state_dict"])
    heads = torch.load(root / "heads.pt", map_location="cpu", weights_only=False)
    state.disc.load_state_dict(heads["disc"])
    state.ce.load_state_dict(heads["ce"])
    for key in ("opt1", "opt2", "opt_disc", "opt_ce"):
        getattr(state, key).load_state_dict(blob[key])
    state.step = blob["step"]
    state.history = blob["history"]
    state.stale_rounds = blob["stale_rounds"]
    state.stopped_early = blob["stopped_early"]
    if blob["best_meta"]:
        state.best = dict(blob["best_meta"])
        for key in ("net1", "net2"):
            state.best[key] = torch.load(root / f"best_{key}.pt", map_location="cpu",
                                         weights_only=False)["state_dict"]
    torch.set_rng_state(blob["torch_rng"])
    if sampler is not None and blob["sampler"] is not None:
        sampler.restore(blob["sampler"])
    return state


def load_networks(out_dir, best: bool = False):
    """The two segmenters stored in a bundle (the best-validation pair if ``best``)."""
    root = Path(out_dir)
    prefix = "best_" if best and (root / "best_net1.pt").exists() else ""
    return load_network(root / f"{prefix}net1.pt"), load_network(root / f"{prefix}net2.pt")
