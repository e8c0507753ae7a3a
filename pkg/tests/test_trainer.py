import math

import numpy as np
import pydantic
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dualseg import trainer as T
from dualseg.backbone import NetworkSpec, build_network
from dualseg.core import DatasetSplit, HybridLossConfig
from dualseg.losses import supervised_loss
from dualseg.trainer import (EpochSampler, PatchSampler, TrainingDiverged, init_state, load_bundle,
                             load_networks, parameter_distance, train, training_step)

from conftest import tiny_config

SUP = HybridLossConfig(alpha=0.0, beta=0.0, gamma=0.0, t_max=10)


def _params(net):
    return [p.detach().clone() for p in net.parameters()]


def test_parameter_distance_basics():
    a, b = build_network(NetworkSpec.tiny(16), 1), build_network(NetworkSpec.tiny(16), 2)
    assert parameter_distance(a, a) == 0.0
    assert parameter_distance(a, b) == parameter_distance(b, a) > 0
    manual = sum(float((p - q).detach().abs().sum()) for p, q in zip(a.parameters(), b.parameters()))
    assert parameter_distance(a, b) == pytest.approx(manual, rel=1e-6)
    with pytest.raises(ValueError):
        parameter_distance(a, build_network(NetworkSpec(side=16, enc_channels=((4, 8), (8, 8), (16, 32)),
                                                        dec_channels=((8, 8), (8, 8)), up_channels=(8, 4))))


def test_train_config_validation_and_roundtrip():
    cfg = tiny_config()
    again = T.TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert T.TrainConfig().batch_size == 4 and T.TrainConfig().lr == 1e-4
    with pytest.raises(pydantic.ValidationError):
        T.TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})
    with pytest.raises(ValueError):
        tiny_config(heads=tiny_config(side=24).heads)


@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 1000))
def test_epoch_sampler_never_starves(n, k, seed):
    s = EpochSampler(n, np.random.default_rng(seed))
    steps = math.ceil(n / k) + 1
    seen = set()
    for _ in range(steps):
        seen.update(s.take(k))
    assert seen == set(range(n))


def test_batch_composition(small_dataset):
    cfg = tiny_config()
    xl, yl, xu = PatchSampler(small_dataset, cfg, supervised=False).next_batch()
    assert xl.shape == (2, 1, 16, 16, 16) and xu.shape == (2, 1, 16, 16, 16) and yl.shape == xl.shape
    assert set(np.unique(yl.numpy())) <= {0.0, 1.0}
    xl, yl, xu = PatchSampler(small_dataset, cfg, supervised=True).next_batch()
    assert xl.shape[0] == 4 and xu is None
    no_u = DatasetSplit(labeled=small_dataset.labeled, unlabeled=[], validation=[], test=[])
    assert PatchSampler(no_u, cfg, supervised=False).next_batch()[2] is None


def test_patches_contain_instrument(small_dataset):
    cfg = tiny_config(side=24)
    s = PatchSampler(small_dataset, cfg, supervised=False)
    for _ in range(4):
        _, yl, _ = s.next_batch()
        assert all(y.sum() > 0 for y in yl)


def test_step_updates_both_networks_and_heads(small_dataset):
    cfg = tiny_config()
    torch.manual_seed(0)
    state = init_state(cfg)
    s = PatchSampler(small_dataset, cfg, supervised=False)
    before = [_params(m) for m in (state.net1, state.net2, state.disc, state.ce)]
    b1, b2, ld = training_step(state, s.next_batch())
    after = [_params(m) for m in (state.net1, state.net2, state.disc, state.ce)]
    for x, y in zip(before, after):
        assert sum(float((p - q).abs().sum()) for p, q in zip(x, y)) > 0
    assert state.step == 1 and ld is not None and math.isfinite(ld)
    assert b1.counts and b2.counts


def test_inactive_heads_are_untouched(small_dataset):
    loss = HybridLossConfig(t_max=10, enable_lcont=False, enable_ncont=False)
    cfg = tiny_config(loss=loss)
    state = init_state(cfg)
    disc = {k: v.clone() for k, v in state.disc.state_dict().items()}
    ce = {k: v.clone() for k, v in state.ce.state_dict().items()}
    _, _, ld = training_step(state, PatchSampler(small_dataset, cfg, False).next_batch())
    assert ld is None
    assert all(torch.equal(v, state.disc.state_dict()[k]) for k, v in disc.items())
    assert all(torch.equal(v, state.ce.state_dict()[k]) for k, v in ce.items())


def test_segmenter_updates_leave_discriminator_buffers(small_dataset, monkeypatch):
    cfg = tiny_config()
    state = init_state(cfg)
    seen = {}
    real = T.label_adversarial_losses

    def spy(disc, pl, pu):
        if not next(disc.parameters()).requires_grad:  # segmenter phase
            seen.setdefault("buffers", {k: v.clone() for k, v in disc.state_dict().items()})
        return real(disc, pl, pu)

    monkeypatch.setattr(T, "label_adversarial_losses", spy)
    before = {k: v.clone() for k, v in state.disc.state_dict().items()}
    training_step(state, PatchSampler(small_dataset, cfg, False).next_batch())
    assert all(torch.equal(before[k], v) for k, v in seen["buffers"].items())
    assert all(p.requires_grad for p in state.disc.parameters())


def test_hundred_steps_stay_finite(small_dataset):
    cfg = tiny_config(loss=HybridLossConfig(t_max=50))
    torch.manual_seed(0)
    state = init_state(cfg)
    s = PatchSampler(small_dataset, cfg, False)
    for _ in range(100):
        b1, b2, ld = training_step(state, s.next_batch())
        assert all(math.isfinite(v) for v in (b1.total, b2.total, ld))
    assert parameter_distance(state.net1, state.net2) > 0


def test_zero_weights_equal_two_supervised_updates(small_dataset):
    cfg = tiny_config(loss=SUP)
    torch.manual_seed(cfg.seed_data)
    state = init_state(cfg)
    sampler = PatchSampler(small_dataset, cfg, supervised=True)

    torch.manual_seed(cfg.seed_data)
    n1 = build_network(cfg.network, cfg.seed_net1)
    n2 = build_network(cfg.network, cfg.seed_net2)
    o1 = torch.optim.Adam(n1.parameters(), lr=cfg.lr)
    o2 = torch.optim.Adam(n2.parameters(), lr=cfg.lr)
    ref_sampler = PatchSampler(small_dataset, cfg, supervised=True)
    rng_a = torch.get_rng_state()
    for _ in range(3):
        # each loop consumes the global torch RNG identically; swap states between them
        torch.set_rng_state(rng_a)
        training_step(state, sampler.next_batch())
        rng_a, rng_b = torch.get_rng_state(), None
        xl, yl, _ = ref_sampler.next_batch()
        torch.set_rng_state(rng_ref) if "rng_ref" in locals() else torch.manual_seed(cfg.seed_data)
        n1.train()
        n2.train()
        y1, y2 = n1(xl), n2(xl)
        for o, y in ((o1, y1), (o2, y2)):
            o.zero_grad()
            supervised_loss(y, yl).backward()
            o.step()
        rng_ref = torch.get_rng_state()
        for a, b in ((state.net1, n1), (state.net2, n2)):
            assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_smoke_run_writes_loadable_bundle(small_dataset, tmp_path):
    cfg = tiny_config(steps=50, val_every=25, log_every=5)
    state = train(cfg, small_dataset, tmp_path / "run")
    for name in ("net1.pt", "net2.pt", "heads.pt", "optim.pt", "train_config.json", "metrics.csv",
                 "loss_log.jsonl", "best_net1.pt", "best_net2.pt"):
        assert (tmp_path / "run" / name).exists(), name
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,L_sup,L_intra,L_inter,L_LCont,L_NCont,val_DSC,param_distance"
    assert len(lines) == 1 + 1 + 10
    assert all(float(r["param_distance"]) > 0 for r in state.history)
    n1, n2 = load_networks(tmp_path / "run")
    assert all(torch.equal(p, q) for p, q in zip(n1.parameters(), state.net1.parameters()))
    again = load_bundle(tmp_path / "run")
    assert again.step == 50 and len(again.history) == len(state.history)
    assert len((tmp_path / "run" / "loss_log.jsonl").read_text().splitlines()) == 50


def test_identical_seeds_identical_history(small_dataset, tmp_path):
    cfg = tiny_config(steps=5)
    train(cfg, small_dataset, tmp_path / "a")
    train(cfg, small_dataset, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    other = tiny_config(steps=5, seed_net2=7)
    train(other, small_dataset, tmp_path / "c")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_resume_is_bitwise(small_dataset, tmp_path):
    cfg = tiny_config(steps=6, val_every=3)
    straight = train(cfg, small_dataset, tmp_path / "straight")
    train(cfg, small_dataset, tmp_path / "split", stop_after=4)
    assert load_bundle(tmp_path / "split").step == 4
    resumed = train(cfg, small_dataset, tmp_path / "split", resume=True)
    assert resumed.step == 6
    for a, b in ((straight.net1, resumed.net1), (straight.net2, resumed.net2), (straight.disc, resumed.disc)):
        assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
    assert (tmp_path / "straight" / "metrics.csv").read_bytes() == (tmp_path / "split" / "metrics.csv").read_bytes()


def test_resume_with_more_steps_continues_numbering(small_dataset, tmp_path):
    train(tiny_config(steps=3), small_dataset, tmp_path / "r")
    state = train(tiny_config(steps=5), small_dataset, tmp_path / "r", resume=True)
    assert [r["step"] for r in state.history] == [0, 1, 2, 3, 4, 5]


def test_empty_labeled_rejected(small_dataset):
    empty = DatasetSplit(labeled=[], unlabeled=small_dataset.unlabeled, validation=[], test=[])
    with pytest.raises(ValueError):
        train(tiny_config(), empty)


def test_non_finite_loss_aborts_with_dump(small_dataset, tmp_path, monkeypatch):
    cfg = tiny_config(steps=3)
    real = PatchSampler.next_batch

    def poisoned(self):
        xl, yl, xu = real(self)
        xl[0, 0, 0, 0, 0] = float("nan")
        return xl, yl, xu

    monkeypatch.setattr(PatchSampler, "next_batch", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, small_dataset, tmp_path / "d")
    assert info.value.dump["step"] == 0 and "bundle" in info.value.dump
    assert (tmp_path / "d" / "diverged" / "net1.pt").exists()


def test_early_stop_after_patience(small_dataset, monkeypatch):
    monkeypatch.setattr(T, "validation_dice", lambda state, vols: 0.5)
    state = train(tiny_config(steps=40, val_every=2, patience=3), small_dataset)
    assert state.stopped_early and state.step == 6
    assert state.best["step"] == 0
