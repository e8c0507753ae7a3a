"""Loss terms of the hybrid objective, voxel-selection masks, ramps and gradient checks.

Every function accepts torch tensors (any float dtype) or array-likes.  Voxel
"norm-2" distances are squared differences throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import EPS, HybridLossConfig, binary_entropy

COMPONENTS = ("sup", "intra", "inter", "LCont", "NCont")


def _t(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    # 3D grids are one sample; otherwise the leading axis is the batch
    return x.reshape(1, -1) if x.ndim <= 3 else x.reshape(x.shape[0], -1)


def entropy_map(p):
    """Binary entropy in nats with exact zeros at p in {0, 1}."""
    if not isinstance(p, torch.Tensor):
        return binary_entropy(p)
    q = p.clamp(EPS, 1 - EPS)
    h = -(q * torch.log(q) + (1 - q) * torch.log1p(-q))
    return torch.where((p <= 0) | (p >= 1), torch.zeros_like(h), h)


def supervised_loss(pred, label, reduction: str = "mean"):
    """BCE plus +1-smoothed Dice, computed per sample and averaged over the batch.

    ``reduction`` picks the BCE voxel reduction ("mean" or "sum").
    """
    pred = _t(pred)
    label = _t(label, pred.dtype)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(label.shape)}")
    p = _per_sample(pred)
    y = _per_sample(label)
    q = p.clamp(EPS, 1 - EPS)
    bce = -(y * torch.log(q) + (1 - y) * torch.log1p(-q))
    bce = bce.mean(1) if reduction == "mean" else bce.sum(1)
    dice = 1 - (2 * (y * p).sum(1) + 1) / (y.sum(1) + p.sum(1) + 1)
    return (bce + dice).mean()


def masked_mse(a, b, mask):
    """Mean of (a - b)^2 over ``mask``; returns ``(loss, count)`` with loss 0 if empty."""
    a = _t(a)
    b = _t(b, a.dtype)
    m = _t(mask, a.dtype)
    count = int(m.sum().item())
    if count == 0:
        return (a * 0).sum(), 0
    return (m * (a - b) ** 2).sum() / count, count


def intra_loss(pred, bayes, bayes_entropy, threshold):
    """Consistency of plain vs Bayesian prediction on voxels with entropy < threshold."""
    bayes = _t(bayes)
    sel = _t(bayes_entropy) < threshold
    return masked_mse(pred, bayes.detach(), sel)[0]


def stable_mask(pred, bayes, pred_entropy, bayes_entropy, threshold, agreement: str = "instrument"):
    pred = _t(pred)
    bayes = _t(bayes)
    c = pred > 0.5
    c_hat = bayes > 0.5
    if agreement == "instrument":
        agree = c & c_hat
    elif agreement == "class":
        agree = c == c_hat
    else:
        raise ValueError(f"unknown agreement {agreement!r}")
    certain = (_t(pred_entropy) < threshold) | (_t(bayes_entropy) < threshold)
    return agree & certain


def inter_mask(s1, s2, d1, d2):
    """Voxels on which each network is supervised by the other one."""
    s1 = _t(s1).bool()
    s2 = _t(s2).bool()
    d1 = _t(d1)
    d2 = _t(d2)
    both = s1 & s2
    m1 = (both & (d1 > d2)) | (~both & s2)
    m2 = (both & (d2 > d1)) | (~both & s1)
    return m1, m2


def inter_loss(pred1, pred2, mask1):
    """Mean squared gap to the (detached) other network over ``mask1``."""
    pred2 = _t(pred2)
    return masked_mse(pred1, pred2.detach(), mask1)[0]


def lcont_terms(prob, cls):
    """Per-sample Cls*log(p) + (1-Cls)*log(1-p); the discriminator BCE is its negative."""
    prob = _t(prob)
    cls = _t(cls, prob.dtype)
    q = prob.clamp(EPS, 1 - EPS)
    return cls * torch.log(q) + (1 - cls) * torch.log1p(-q)


def label_adversarial_losses(disc, pred_labeled, pred_unlabeled):
    """Return ``(L_disc, L_LCont)`` on one batch; ``L_LCont == -L_disc``.

    Which parameters each value is allowed to update is the caller's business
    (discriminator for ``L_disc``, segmenters for ``L_LCont``).
    """
    pred_labeled = _t(pred_labeled)
    pred_unlabeled = _t(pred_unlabeled, pred_labeled.dtype)
    x = torch.cat([pred_labeled, pred_unlabeled], 0)
    cls = torch.cat([torch.ones(len(pred_labeled)), torch.zeros(len(pred_unlabeled))]).to(x.dtype)
    lcont = lcont_terms(disc(x), cls).mean()
    return -lcont, lcont


def context_distance(v1l, v2l, v, v1u, v2u):
    """Sum of the three squared embedding distances."""
    return (((v1l - v) ** 2).sum() + ((v2l - v) ** 2).sum() + ((v1u - v2u) ** 2).sum())


def context_loss(ce, pred1_l, pred2_l, label, pred1_u, pred2_u):
    """Embedding distances of labeled predictions to their annotation and of the
    two networks' unlabeled predictions to each other.  All five inputs go
    through ``ce`` as one batch."""
    pred1_l = _t(pred1_l)
    parts = [pred1_l, _t(pred2_l, pred1_l.dtype), _t(label, pred1_l.dtype),
             _t(pred1_u, pred1_l.dtype), _t(pred2_u, pred1_l.dtype)]
    sizes = [len(p) for p in parts]
    vecs = torch.split(ce(torch.cat(parts, 0)), sizes)
    return context_distance(*vecs)


# --- schedules ---------------------------------------------------------------

def ramp_weight(lam: float, t: float, t_max: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if t >= t_max:
        return float(lam)
    return float(lam) * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def ramp_threshold(tau: float, t: float, t_max: float, kind: str = "linear") -> float:
    """Ramp ``tau`` from 3/4 of its value up to ``tau`` over ``t_max`` steps."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t >= t_max:
        return float(tau)
    if kind == "linear":
        frac = t / t_max
    elif kind == "gaussian":
        frac = math.exp(-5.0 * (1.0 - t / t_max) ** 2)
    else:
        raise ValueError(f"unknown ramp kind {kind!r}")
    return float(tau) * (0.75 + 0.25 * frac)


def entropy_threshold(tau: float, t: float, cfg: HybridLossConfig) -> float:
    """Entropy cut-off (nats) for probability threshold ``tau`` at step ``t``."""
    if cfg.threshold_ramp_domain == "probability":
        return float(binary_entropy(ramp_threshold(tau, t, cfg.t_max, cfg.threshold_ramp)))
    return ramp_threshold(float(binary_entropy(tau)), t, cfg.t_max, cfg.threshold_ramp)


def ramped_weights(cfg: HybridLossConfig, t: float) -> tuple[float, float, float]:
    return (ramp_weight(cfg.alpha, t, cfg.t_max), ramp_weight(cfg.beta, t, cfg.t_max),
            ramp_weight(cfg.gamma, t, cfg.t_max))


# --- aggregation -------------------------------------------------------------

@dataclass
class LossBreakdown:
    sup: float
    intra: float
    inter: float
    lcont: float
    ncont: float
    total: float
    weights: tuple
    counts: dict = field(default_factory=dict)
    total_tensor: torch.Tensor | None = field(default=None, repr=False)

    @property
    def omega(self) -> dict:
        return {k: (1.0 / v if v else 0.0) for k, v in self.counts.items()}

    def as_row(self) -> dict:
        a, b, g = self.weights
        row = {"L_sup": self.sup, "L_intra": self.intra, "L_inter": self.inter,
               "L_LCont": self.lcont, "L_NCont": self.ncont, "total": self.total,
               "alpha": a, "beta": b, "gamma": g}
        row.update({f"n_{k}": v for k, v in self.counts.items()})
        return row


def hybrid_semi_loss(components: dict, config: HybridLossConfig, t: float) -> LossBreakdown:
    """Combine component values (tensors or floats) with ramped weights.

    Missing components count as zero.  ``components`` may hold a ``counts``
    dict of selected-voxel numbers.
    """
    a, b, g = ramped_weights(config, t)
    zero = torch.zeros((), dtype=torch.float64)
    get = lambda k: components.get(k, zero)  # noqa: E731
    sup, intra, inter, lcont, ncont = (_t(get(k)) for k in ("sup", "intra", "inter", "LCont", "NCont"))
    total = sup
    if a:
        total = total + a * (intra + inter)
    if b:
        total = total + b * lcont
    if g:
        total = total + g * ncont
    f = lambda x: float(x.detach())  # noqa: E731
    return LossBreakdown(sup=f(sup), intra=f(intra), inter=f(inter), lcont=f(lcont), ncont=f(ncont),
                         total=f(total), weights=(a, b, g), counts=dict(components.get("counts", {})),
                         total_tensor=total)


# --- gradient verification -----------------------------------------------------

@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _fd_gradient(fn, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def _rel_errors(analytic, numeric, floor=1e-12):
    """|a - n| scaled by the largest gradient magnitude of the array."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return np.abs(analytic - numeric) / scale


def _sup_analytic(p, y, reduction="mean"):
    n = p.size
    bce = -y / p + (1 - y) / (1 - p)
    if reduction == "mean":
        bce = bce / n
    denom = y.sum() + p.sum() + 1
    dice = -(2 * y * denom - (2 * (y * p).sum() + 1)) / denom ** 2
    return bce + dice


def _lcont_analytic(prob, cls):
    return cls / prob - (1 - cls) / (1 - prob)


def _context_analytic(v1l, v2l, v, v1u, v2u):
    return {"v1l": 2 * (v1l - v), "v2l": 2 * (v2l - v), "v1u": 2 * (v1u - v2u), "v2u": 2 * (v2u - v1u)}


def _intra_analytic(p, pb, sel):
    return 2 * (p - pb) * sel / max(sel.sum(), 1)


def _inter_analytic(p, q, sel):
    return 2 * (p - q) * sel / max(sel.sum(), 1)


ANALYTIC = {"sup": _sup_analytic, "intra": _intra_analytic, "inter": _inter_analytic,
            "LCont": _lcont_analytic, "NCont": _context_analytic}


def sign_flipped(component: str):
    """A deliberately wrong closed form (negated gradient) for fault-injection tests."""
    base = ANALYTIC[component]

    def wrong(**kw):
        g = base(**kw)
        return {k: -v for k, v in g.items()} if isinstance(g, dict) else -g
    return wrong


def _make_inputs(component, size, rng):
    shape = (size,) * 3
    if component == "sup":
        return {"p": rng.uniform(0.05, 0.95, shape), "y": (rng.random(shape) < 0.3).astype(np.float64)}
    if component == "intra":
        pb = rng.uniform(0.02, 0.98, shape)
        return {"p": rng.uniform(0.05, 0.95, shape), "pb": pb, "ub": binary_entropy(pb), "thr": 0.6}
    if component == "inter":
        p1 = rng.uniform(0.3, 0.99, shape)
        p2 = rng.uniform(0.3, 0.99, shape)
        pb1 = np.clip(p1 + rng.normal(0, 0.05, shape), 0.01, 0.99)
        pb2 = np.clip(p2 + rng.normal(0, 0.05, shape), 0.01, 0.99)
        return {"p1": p1, "p2": p2, "pb1": pb1, "pb2": pb2, "thr": float(binary_entropy(0.7))}
    if component == "LCont":
        return {"prob": rng.uniform(0.05, 0.95, 8), "cls": (np.arange(8) % 2).astype(np.float64),
                "patch": rng.uniform(0, 1, (4, 1) + shape)}
    if component == "NCont":
        v = lambda: rng.normal(size=(2, 6))  # noqa: E731
        return {"v1l": v(), "v2l": v(), "v": v(), "v1u": v(), "v2u": v(),
                "patches": rng.uniform(0, 1, (5, 1) + shape)}
    raise ValueError(f"unknown component {component!r}")


def _inter_masks(d):
    u1 = binary_entropy(d["p1"])
    u2 = binary_entropy(d["p2"])
    s1 = stable_mask(d["p1"], d["pb1"], u1, binary_entropy(d["pb1"]), d["thr"])
    s2 = stable_mask(d["p2"], d["pb2"], u2, binary_entropy(d["pb2"]), d["thr"])
    m1, _ = inter_mask(s1, s2, (d["p1"] - d["pb1"]) ** 2, (d["p2"] - d["pb2"]) ** 2)
    return m1.numpy()


def _head_autograd_check(module, x, fn, eps):
    """autograd vs central differences through a head module, w.r.t. its input."""
    module = module.double().eval()
    xt = torch.tensor(x, requires_grad=True)
    fn(module, xt).backward()
    auto = xt.grad.numpy()
    numeric = _fd_gradient(lambda a: float(fn(module, torch.from_numpy(a)).detach()), x.copy(), eps)
    return auto, numeric


def gradient_check(component: str, input_size: int = 4, eps: float = 1e-6, seed: int = 0,
                   tolerance: float = 1e-4, analytic=None) -> GradCheckResult:
    """Compare closed-form gradients of one loss term with central differences.

    ``analytic`` optionally replaces the closed form (used for fault injection);
    it receives the same keyword inputs as the built-in formula.
    """
    rng = np.random.default_rng(seed)
    d = _make_inputs(component, input_size, rng)
    pairs = []  # (analytic, numeric) arrays

    if component == "sup":
        fn = lambda p: float(supervised_loss(torch.from_numpy(p), torch.from_numpy(d["y"])))  # noqa: E731
        formula = analytic or _sup_analytic
        pairs.append((formula(p=d["p"], y=d["y"]), _fd_gradient(fn, d["p"].copy(), eps)))
    elif component == "intra":
        sel = d["ub"] < d["thr"]
        fn = lambda p: float(intra_loss(torch.from_numpy(p), d["pb"], d["ub"], d["thr"]))  # noqa: E731
        formula = analytic or ANALYTIC["intra"]
        pairs.append((formula(p=d["p"], pb=d["pb"], sel=sel), _fd_gradient(fn, d["p"].copy(), eps)))
    elif component == "inter":
        m1 = _inter_masks(d)
        fn = lambda p: float(inter_loss(torch.from_numpy(p), d["p2"], m1))  # noqa: E731
        formula = analytic or ANALYTIC["inter"]
        pairs.append((formula(p=d["p1"], q=d["p2"], sel=m1), _fd_gradient(fn, d["p1"].copy(), eps)))
    elif component == "LCont":
        fn = lambda pr: float(lcont_terms(torch.from_numpy(pr), d["cls"]).sum())  # noqa: E731
        formula = analytic or _lcont_analytic
        pairs.append((formula(prob=d["prob"], cls=d["cls"]), _fd_gradient(fn, d["prob"].copy(), eps)))
        from .heads import Discriminator, HeadSpec
        torch.manual_seed(seed)
        disc = Discriminator(HeadSpec(side=input_size, channels=(4, 4, 4, 4)))
        cls = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        pairs.append(_head_autograd_check(disc, d["patch"], lambda m, x: lcont_terms(m(x), cls).mean(), eps))
    elif component == "NCont":
        names = ("v1l", "v2l", "v", "v1u", "v2u")
        formula = analytic or _context_analytic
        grads = formula(**{k: d[k] for k in names})
        for key in ("v1l", "v2l", "v1u", "v2u"):
            def fn(a, key=key):
                args = {k: torch.from_numpy(a if k == key else d[k]) for k in names}
                return float(context_distance(*(args[k] for k in names)))
            pairs.append((grads[key], _fd_gradient(fn, d[key].copy(), eps)))
        from .heads import ContextEncoder, HeadSpec
        torch.manual_seed(seed)
        ce = ContextEncoder(HeadSpec(side=input_size, channels=(4, 4, 4, 4), context_dim=6))
        # CE is evaluated per patch here so batch-norm running stats (eval) apply
        pairs.append(_head_autograd_check(
            ce, d["patches"], lambda m, x: context_distance(*(m(x[i:i + 1]) for i in range(5))), eps))
    else:
        raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")

    worst = (-1.0, (), 0.0, 0.0)
    for k, (a, n) in enumerate(pairs):
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), np.shape(n))
        err = _rel_errors(a, n)
        if not np.all(np.isfinite(err)):
            err = np.where(np.isfinite(err), err, np.inf)
        i = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[i] > worst[0]:
            worst = (float(err[i]), (k,) + tuple(int(j) for j in i), float(a[i]), float(n[i]))
    return GradCheckResult(component, worst[0], worst[1], worst[2], worst[3], tolerance)
