import math

import numpy as np
import pytest
import torch

from consistency_ae.checkpoint import CheckpointError, latest_checkpoint
from consistency_ae.config import OptimizerConfig, toy_config
from consistency_ae.dataio import ArrayDataset, synthetic_clips
from consistency_ae.schedule import NoisePair
from consistency_ae.training import (
    NumericalError,
    build_model,
    consistency_loss,
    ema_update,
    init_state,
    load_model,
    load_state,
    lr_at,
    prepare_batch,
    read_loss_log,
    train,
    training_step,
)

CFG = toy_config()


def _dataset(cfg=CFG, n=4):
    return ArrayDataset(synthetic_clips(n, cfg.audio.chunk_len, cfg.audio.sample_rate), cfg.audio.chunk_len)


def test_lr_schedule():
    opt = OptimizerConfig()
    K = 800_000
    assert lr_at(0, opt, K) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(K, opt, K) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(K // 2, opt, K) == pytest.approx(5.05e-5, rel=1e-12)
    vals = [lr_at(k, opt, K) for k in range(0, K + 1, 10_000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(K + 1, opt, K)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr0=1e-6, lr_final=1e-4)
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)


def test_ema_momentum_edges():
    p = {"w": torch.tensor([1.0, 2.0])}
    e = {"w": torch.tensor([5.0, 5.0])}
    ema_update(p, e, 1.0)
    assert torch.equal(e["w"], torch.tensor([5.0, 5.0]))
    ema_update(p, e, 0.0)
    assert torch.equal(e["w"], p["w"])


def test_ema_geometric_series():
    target = torch.tensor([0.3, -2.0, 7.0], dtype=torch.float64)
    e = {"w": torch.zeros(3, dtype=torch.float64)}
    for _ in range(100):
        ema_update({"w": target}, e, 0.9)
    torch.testing.assert_close(e["w"], target * (1 - 0.9**100), rtol=1e-12, atol=0)


def test_ema_structure_mismatch():
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)


def _loss_inputs(seed=0):
    cfg = CFG.replace(train={"dtype": "float64"})
    model = build_model(cfg)
    rng = np.random.default_rng(seed)
    x = prepare_batch(np.stack(synthetic_clips(2, cfg.audio.chunk_len, cfg.audio.sample_rate)), cfg, torch.float64)
    pair = NoisePair(np.array([0.3, 2.0]), np.array([0.5, 3.0]), None, None)
    z = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    return cfg, model, x, pair, z


def test_stop_gradient_equals_constant_teacher():
    cfg, model, x, pair, z = _loss_inputs()
    loss, _, teacher = consistency_loss(model, x, pair, z, cfg)
    assert not teacher.requires_grad
    g1 = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)

    with torch.no_grad():
        feats = model.decode_features(model.encode(x))
        x_lo = x + torch.tensor(pair.sigma_lo).reshape(-1, 1, 1, 1) * z
        const = model.consistency_fn(x_lo, torch.tensor(pair.sigma_lo), feats).clone()
    loss2, _, _ = consistency_loss(model, x, pair, z, cfg, teacher=const)
    g2 = torch.autograd.grad(loss2, list(model.parameters()), allow_unused=True)
    assert loss.item() == loss2.item()
    for a, b in zip(g1, g2):
        assert (a is None and b is None) or torch.equal(a, b)
    # encoder receives gradient through the student branch
    enc = dict(zip([n for n, _ in model.named_parameters()], g1))["encoder.conv_in.weight"]
    assert enc is not None and enc.abs().max() > 0


def test_teacher_at_sigma_min_is_noised_input():
    cfg, model, x, _, z = _loss_inputs()
    pair = NoisePair(np.array([cfg.schedule.sigma_min] * 2), np.array([0.1, 0.2]), None, None)
    _, _, teacher = consistency_loss(model, x, pair, z, cfg)
    assert torch.equal(teacher, x + cfg.schedule.sigma_min * z)


def test_training_step_updates_state_and_ema():
    cfg = CFG
    state = init_state(cfg)
    before = [p.detach().clone() for p in state.model.parameters()]
    batch = _dataset().sample_batch(state.data_rng, cfg.train.batch_size)
    state, info = training_step(state, batch, cfg)
    assert state.k == 1
    assert math.isfinite(info.loss) and info.loss > 0
    assert info.lr == cfg.optim.lr0
    m = cfg.optim.ema_momentum
    for b, p, e in zip(before, state.model.parameters(), state.ema.parameters()):
        torch.testing.assert_close(e, m * b + (1 - m) * p.detach())
    assert all(not p.requires_grad for p in state.ema.parameters())


def test_nonfinite_loss_aborts():
    state = init_state(CFG)
    batch = np.full((CFG.train.batch_size, CFG.audio.chunk_len), np.nan, dtype=np.float32)
    with pytest.raises(NumericalError, match="sigma"):
        training_step(state, batch, CFG)


def test_train_empty_dataset(tmp_path):
    with pytest.raises(ValueError):
        train(CFG, [], tmp_path)


def test_resume_is_bit_exact(tmp_path):
    cfg = CFG.replace(train={"checkpoint_every": 10})
    ds = _dataset(cfg)
    train(cfg, ds, tmp_path / "full", stop_at=30)
    train(cfg, ds, tmp_path / "split", stop_at=20)
    train(cfg, ds, tmp_path / "split", resume=True, stop_at=30)
    full = read_loss_log(tmp_path / "full" / "loss_log.csv")
    split = read_loss_log(tmp_path / "split" / "loss_log.csv")
    assert len(full) == len(split) == 30
    assert [r["loss"] for r in full] == [r["loss"] for r in split]
    a, _ = load_model(latest_checkpoint(tmp_path / "full"))[:2]
    b, _ = load_model(latest_checkpoint(tmp_path / "split"))[:2]
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_resume_refuses_other_config(tmp_path):
    cfg = CFG.replace(train={"checkpoint_every": 5})
    train(cfg, _dataset(cfg), tmp_path, stop_at=5)
    other = cfg.replace(optim={"lr0": 5e-4})
    with pytest.raises(CheckpointError, match="config hash"):
        train(other, _dataset(cfg), tmp_path, resume=True, stop_at=10)
    state = load_state(latest_checkpoint(tmp_path), cfg)
    assert state.k == 5


def test_load_model_defaults_to_ema(tmp_path):
    cfg = CFG.replace(train={"checkpoint_every": 5})
    state = train(cfg, _dataset(cfg), tmp_path, stop_at=5)
    path = latest_checkpoint(tmp_path)
    ema, _, meta = load_model(path)
    raw, _, _ = load_model(path, use_ema=False)
    assert meta["k"] == 5 and meta["has_ema"]
    for e, s in zip(ema.parameters(), state.ema.parameters()):
        assert torch.equal(e, s)
    assert any(not torch.equal(a, b) for a, b in zip(ema.parameters(), raw.parameters()))
