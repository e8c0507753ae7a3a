import numpy as np
import torch
from scipy import ndimage

from dualseg.heads import (ContextEncoder, Discriminator, HeadSpec, build_heads, discriminate,
                           encode_context, heads_from_state, heads_state)
from dualseg.losses import context_distance

SPEC = HeadSpec.tiny(16)


def test_shapes_and_range():
    disc, ce = build_heads(SPEC, 0)
    x = torch.rand(3, 1, 16, 16, 16)
    d = disc(x)
    assert d.shape == (3,) and ((d > 0) & (d < 1)).all()
    assert ce(x).shape == (3, SPEC.context_dim)


def _sharp(rng):
    m = np.zeros((16,) * 3, np.float32)
    a, b = sorted(rng.integers(2, 14, 2))
    m[a:b + 2, 7:9, 6:10] = 1.0
    return m


def _soft(rng):
    return np.clip(ndimage.gaussian_filter(_sharp(rng), 1.5) * rng.uniform(0.6, 1.0) + 0.2, 0, 1)


def test_discriminator_learns_sharp_vs_soft():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    disc = Discriminator(SPEC)
    opt = torch.optim.Adam(disc.parameters(), lr=3e-3)
    for _ in range(80):
        x = np.stack([_sharp(rng) for _ in range(4)] + [_soft(rng) for _ in range(4)])[:, None]
        y = torch.tensor([1.0] * 4 + [0.0] * 4)
        opt.zero_grad()
        torch.nn.functional.binary_cross_entropy(disc(torch.from_numpy(x)), y).backward()
        opt.step()
    hits = [discriminate(disc, _sharp(rng)) > 0.5 for _ in range(20)]
    hits += [discriminate(disc, _soft(rng)) < 0.5 for _ in range(20)]
    assert np.mean(hits) > 0.9


def test_context_distance_swap_symmetry():
    _, ce = build_heads(SPEC, 1)
    rng = np.random.default_rng(2)
    p1, p2, y = (torch.from_numpy(rng.random((1, 1, 16, 16, 16)).astype(np.float32)) for _ in range(3))
    u1, u2 = (torch.from_numpy(rng.random((1, 1, 16, 16, 16)).astype(np.float32)) for _ in range(2))
    ce.eval()
    v = lambda t: ce(t)  # noqa: E731
    with torch.no_grad():
        a = context_distance(v(p1), v(p2), v(y), v(u1), v(u2))
        b = context_distance(v(p2), v(p1), v(y), v(u2), v(u1))
        same = context_distance(v(y), v(y), v(y), v(u1), v(u1))
    assert torch.allclose(a, b)
    assert float(same) == 0.0


def test_encode_context_deterministic_and_state_roundtrip():
    disc, ce = build_heads(SPEC, 3)
    p = np.random.default_rng(0).random((16,) * 3).astype(np.float32)
    e1 = encode_context(ce, p)
    assert np.array_equal(e1, encode_context(ce, p))
    d2, c2 = heads_from_state(heads_state(disc, ce))
    assert isinstance(d2, Discriminator) and isinstance(c2, ContextEncoder)
    assert np.array_equal(e1, encode_context(c2, p))
    assert discriminate(disc, p) == discriminate(d2, p)
