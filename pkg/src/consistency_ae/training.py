"""End-to-end consistency training of encoder, decoder and UNet."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import waveform_to_model_input
from .checkpoint import CheckpointError, checkpoint_name, latest_checkpoint, read_checkpoint, write_checkpoint
from .config import OptimizerConfig, RunConfig, config_from_dict
from .network import ConsistencyAutoencoder
from .schedule import huber_constant, loss_weight, pseudo_huber, sample_noise_pair

logger = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "sigma_hi", "loss", "lr", "grad_norm")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: ConsistencyAutoencoder
    ema: ConsistencyAutoencoder
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    data_rng: np.random.Generator
    k: int = 0


@dataclass
class StepInfo:
    loss: float
    sigma_lo: np.ndarray
    sigma_hi: np.ndarray
    lr: float
    grad_norm: float
    per_sample: np.ndarray = field(repr=False, default=None)


def lr_at(k: int, cfg: OptimizerConfig, total_iters: int) -> float:
    """Cosine decay from ``lr0`` at k=0 to ``lr_final`` at k=K."""
    if not 0 <= k <= total_iters:
        raise ValueError(f"iteration {k} outside [0, {total_iters}]")
    return cfg.lr_final + 0.5 * (cfg.lr0 - cfg.lr_final) * (1.0 + math.cos(math.pi * k / total_iters))


@torch.no_grad()
def ema_update(params, ema_params, momentum: float):
    """In-place ``ema = momentum * ema + (1 - momentum) * params``.

    Accepts two modules or two name->tensor mappings with identical keys
    and shapes.  Returns ``ema_params``.
    """
    src = dict(params.named_parameters()) if isinstance(params, torch.nn.Module) else params
    dst = dict(ema_params.named_parameters()) if isinstance(ema_params, torch.nn.Module) else ema_params
    if src.keys() != dst.keys():
        raise ValueError("EMA structure mismatch: parameter names differ")
    for name, p in src.items():
        e = dst[name]
        if e.shape != p.shape:
            raise ValueError(f"EMA structure mismatch at {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(momentum).add_(p.detach(), alpha=1.0 - momentum)
    return ema_params


def build_model(cfg: RunConfig) -> ConsistencyAutoencoder:
    torch.manual_seed(cfg.train.seed)
    model = ConsistencyAutoencoder(cfg.model, cfg.schedule)
    return model.to(_DTYPES[cfg.train.dtype])


def init_state(cfg: RunConfig, model: ConsistencyAutoencoder | None = None) -> TrainState:
    model = build_model(cfg) if model is None else model
    ema = copy.deepcopy(model)
    ema.requires_grad_(False)
    opt = cfg.optim
    optimizer = torch.optim.RAdam(model.parameters(), lr=opt.lr0, betas=(opt.beta1, opt.beta2), eps=opt.eps)
    seeds = np.random.SeedSequence(cfg.train.seed).spawn(2)
    return TrainState(model, ema, optimizer, np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1]))


def prepare_batch(batch: np.ndarray, cfg: RunConfig, dtype=torch.float32) -> torch.Tensor:
    """Waveform chunks ``[B, chunk_len]`` -> compressed spectrograms ``[B, 2, F, T]``."""
    a = cfg.audio
    spec = waveform_to_model_input(np.asarray(batch, dtype=np.float64), a.stft_params, a.transform, cfg.model.time_frames)
    return torch.from_numpy(spec).to(dtype)


def consistency_loss(model, x, pair, z, cfg: RunConfig, teacher=None):
    """Weighted pseudo-Huber distance between student and stop-gradient teacher.

    Returns ``(loss, per_sample, teacher)``.  ``teacher`` may be supplied
    precomputed (it is a constant with respect to the parameters).
    """
    feats = model.decode_features(model.encode(x))
    dtype = x.dtype
    sigma_hi = torch.as_tensor(pair.sigma_hi, dtype=dtype)
    sigma_lo = torch.as_tensor(pair.sigma_lo, dtype=dtype)
    x_hi = x + sigma_hi.reshape(-1, 1, 1, 1) * z
    x_lo = x + sigma_lo.reshape(-1, 1, 1, 1) * z
    student = model.consistency_fn(x_hi, sigma_hi, feats)
    if teacher is None:
        with torch.no_grad():
            teacher = model.consistency_fn(x_lo, sigma_lo, [f.detach() for f in feats])
    c = huber_constant(x[0].numel(), cfg.schedule.huber_scale)
    weight = torch.as_tensor(loss_weight(pair.sigma_lo, pair.sigma_hi), dtype=dtype)
    per_sample = weight * pseudo_huber(student, teacher, c, batch_dims=1)
    return per_sample.mean(), per_sample, teacher


def _grad_norm(model) -> float:
    norms = [p.grad.detach().norm() for p in model.parameters() if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def training_step(state: TrainState, batch: np.ndarray, cfg: RunConfig) -> tuple[TrainState, StepInfo]:
    model = state.model
    dtype = next(model.parameters()).dtype
    x = prepare_batch(batch, cfg, dtype)
    pair = sample_noise_pair(state.k, state.rng, cfg.schedule, x.shape[0])
    z = torch.from_numpy(state.rng.standard_normal(tuple(x.shape))).to(dtype)

    lr = lr_at(state.k, cfg.optim, cfg.total_iters)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss, per_sample, _ = consistency_loss(model, x, pair, z, cfg)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at iteration {state.k}: sigma_lo={pair.sigma_lo.tolist()} sigma_hi={pair.sigma_hi.tolist()}"
        )
    loss.backward()
    grad_norm = _grad_norm(model)
    if not math.isfinite(grad_norm):
        raise NumericalError(f"non-finite gradient norm at iteration {state.k}: sigma_hi={pair.sigma_hi.tolist()}")
    if cfg.optim.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
    state.optimizer.step()
    ema_update(model, state.ema, cfg.optim.ema_momentum)
    state.k += 1
    info = StepInfo(float(loss.detach()), pair.sigma_lo, pair.sigma_hi, lr, grad_norm, per_sample.detach().numpy())
    return state, info


# --- checkpoints -----------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in state.model.named_parameters():
        arrays[f"params/{name}"] = p.detach().cpu().numpy()
    for name, p in state.ema.named_parameters():
        arrays[f"ema/{name}"] = p.detach().cpu().numpy()
    names = [n for n, _ in state.model.named_parameters()]
    opt_state = state.optimizer.state_dict()["state"]
    for idx, entry in opt_state.items():
        for key, value in entry.items():
            arrays[f"opt/{names[idx]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "k": state.k,
        "has_ema": True,
        "rng": _rng_state(state.rng),
        "data_rng": _rng_state(state.data_rng),
    }
    write_checkpoint(path, state_arrays(state), meta)


def _load_params(module, arrays, prefix):
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks {key}")
            value = torch.from_numpy(arrays[key])
            if value.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {key}: {tuple(value.shape)} vs {tuple(p.shape)}")
            p.copy_(value)


def load_model(path, use_ema: bool = True) -> tuple[ConsistencyAutoencoder, RunConfig, dict]:
    """Load inference weights (EMA by default) from a checkpoint."""
    arrays, meta = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    model = ConsistencyAutoencoder(cfg.model, cfg.schedule).to(_DTYPES[cfg.train.dtype])
    prefix = "ema" if use_ema and meta.get("has_ema") else "params"
    _load_params(model, arrays, prefix)
    model.eval()
    return model, cfg, meta


def load_state(path, cfg: RunConfig) -> TrainState:
    """Restore a full training state; refuses checkpoints from a different config."""
    arrays, meta = read_checkpoint(path)
    if meta.get("config_hash") != cfg.config_hash():
        raise CheckpointError(
            f"{path}: config hash {meta.get('config_hash')} does not match the run config ({cfg.config_hash()})"
        )
    state = init_state(cfg)
    _load_params(state.model, arrays, "params")
    _load_params(state.ema, arrays, "ema")
    names = [n for n, _ in state.model.named_parameters()]
    opt_sd = state.optimizer.state_dict()
    restored = {}
    for idx, name in enumerate(names):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            akey = f"opt/{name}/{key}"
            if akey in arrays:
                entry[key] = torch.from_numpy(arrays[akey])
        if entry:
            restored[idx] = entry
    opt_sd["state"] = restored
    state.optimizer.load_state_dict(opt_sd)
    state.rng = _restore_rng(meta["rng"])
    state.data_rng = _restore_rng(meta["data_rng"])
    state.k = int(meta["k"])
    return state


# --- loop ------------------------------------------------------------------


def _open_log(path: Path, k: int):
    """Open the CSV loss log for appending, dropping rows past iteration ``k``."""
    rows = []
    if path.is_file() and k > 0:
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) < k]
    fh = open(path, "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    return fh, writer


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def train(cfg: RunConfig, dataset, checkpoint_dir, resume: bool = False, stop_at: int | None = None, callback=None) -> TrainState:
    """Run consistency training until ``cfg.total_iters`` (or ``stop_at``).

    ``dataset`` is anything with ``__len__`` and ``sample_batch(rng, batch_size)``.
    Checkpoints go to ``checkpoint_dir`` every ``train.checkpoint_every``
    iterations and at the end; ``loss_log.csv`` records every iteration.
    With ``resume`` the latest checkpoint in the directory is restored.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("dataset is empty")
    ckpt_dir = Path(checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.train.deterministic:
        torch.use_deterministic_algorithms(True)

    latest = latest_checkpoint(ckpt_dir) if resume else None
    if latest is not None:
        state = load_state(latest, cfg)
        logger.info("resumed from %s at iteration %d", latest, state.k)
    else:
        state = init_state(cfg)

    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    fh, writer = _open_log(ckpt_dir / "loss_log.csv", state.k)
    try:
        while state.k < end:
            batch = dataset.sample_batch(state.data_rng, cfg.train.batch_size)
            it = state.k
            state, info = training_step(state, batch, cfg)
            writer.writerow(
                {
                    "iteration": it,
                    "sigma_hi": repr(float(np.mean(info.sigma_hi))),
                    "loss": repr(info.loss),
                    "lr": repr(info.lr),
                    "grad_norm": repr(info.grad_norm),
                }
            )
            if callback is not None:
                callback(state, info)
            if state.k % cfg.train.checkpoint_every == 0 or state.k == end:
                fh.flush()
                save_checkpoint(ckpt_dir / checkpoint_name(state.k), state, cfg)
    finally:
        fh.close()
    return state
