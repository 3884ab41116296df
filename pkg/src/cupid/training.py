"""Masked-reconstruction pretraining loop with AdamW."""
from __future__ import annotations

import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    params_from_arrays,
    random_mask,
    save_checkpoint,
    spectrogram_frames,
)
from .preprocessing import EcgWindow

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 45_000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 5_000
    warmup: int = 0
    progress_every: int = 100

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0 or self.checkpoint_every <= 0:
            raise ValueError("iterations, batch_size and checkpoint_every must be positive")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.

    Parameters without a gradient are left untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * update + lr * weight_decay * p.data).astype(p.data.dtype, copy=False)


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    losses: list[float]
    checkpoints: list[Path]


def windows_to_array(windows: Sequence[EcgWindow] | np.ndarray) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows
    return np.stack([w.samples for w in windows])


def checkpoint_arrays(params: Mapping[str, Tensor], state: OptimizerState | None) -> dict:
    arrays = {k: p.data for k, p in params.items()}
    if state is not None:
        arrays.update({f"opt.m.{k}": v for k, v in state.m.items()})
        arrays.update({f"opt.v.{k}": v for k, v in state.v.items()})
    return arrays


def restore(path: str | Path) -> tuple[ModelConfig, ModelParams, OptimizerState, dict]:
    config, arrays, meta = load_checkpoint(path)
    params = params_from_arrays(arrays, config)
    state = OptimizerState(step=int(meta.get("opt_step", 0)))
    for k, a in arrays.items():
        if k.startswith("opt.m."):
            state.m[k[6:]] = a.copy()
        elif k.startswith("opt.v."):
            state.v[k[6:]] = a.copy()
    return config, params, state, meta


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    """Independent stream per iteration so a resumed run draws the same batches."""
    return np.random.default_rng([seed, 1, iteration])


def train(windows: Sequence[EcgWindow] | np.ndarray, model_config: ModelConfig,
          train_config: TrainConfig, run_dir: str | Path | None = None,
          resume: str | Path | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Pretrain on ``windows``; writes ``loss.csv`` and checkpoints under ``run_dir``.

    Every iteration samples a batch with replacement and draws a fresh mask per
    sample. On a non-finite loss the run stops before touching the last
    checkpoint and :class:`NumericalError` is raised.
    """
    x = windows_to_array(windows).astype(model_config.np_dtype)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if x.shape[1] != model_config.window_len:
        raise ValueError(f"windows hold {x.shape[1]} samples, model expects {model_config.window_len}")
    frames = spectrogram_frames(x, model_config) if model_config.variant == "cupid" else None

    start = 0
    if resume is not None:
        cfg, params, state, meta = restore(resume)
        if cfg != model_config:
            raise ValueError("checkpoint model config differs from the requested one")
        start = int(meta["iteration"])
    else:
        params = init_params(model_config, np.random.default_rng([train_config.seed, 0]))
        state = OptimizerState()

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "loss.csv"
        if start == 0 or not log_path.exists():
            log_file = open(log_path, "w")
            log_file.write("iteration,loss,wall_ms\n")
        else:
            kept = log_path.read_text().splitlines()[: start + 1]
            log_file = open(log_path, "w")
            log_file.write("\n".join(kept) + "\n")

    N = model_config.n_patches
    B = train_config.batch_size
    losses: list[float] = []
    checkpoints: list[Path] = []
    t0 = time.perf_counter()
    last_ms = -1.0
    try:
        for k in range(start, train_config.iterations):
            rng = batch_rng(train_config.seed, k)
            idx = rng.integers(0, len(x), size=B)
            mask = random_mask(N, model_config.mask_ratio, rng, batch=B)
            ad.parameters_zero_grad(params.values())
            loss, _ = forward(params, model_config, x[idx], mask,
                              None if frames is None else frames[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at iteration {k}")
            loss.backward()
            lr = train_config.lr
            if train_config.warmup and k < train_config.warmup:
                lr *= (k + 1) / train_config.warmup
            adamw_step(params, state, lr, train_config.beta1, train_config.beta2,
                       train_config.eps, train_config.weight_decay)
            losses.append(value)
            if log_file is not None:
                wall = (time.perf_counter() - t0) * 1000.0
                wall = max(wall, last_ms + 1e-3)
                last_ms = wall
                log_file.write(f"{k},{value!r},{wall:.3f}\n")
            if on_step is not None:
                on_step(k, value)
            if train_config.progress_every and (k + 1) % train_config.progress_every == 0:
                recent = np.mean(losses[-train_config.progress_every:])
                print(f"[{model_config.variant}] iter {k + 1}/{train_config.iterations} "
                      f"loss {recent:.4f}", file=sys.stderr, flush=True)
            if run_dir is not None and ((k + 1) % train_config.checkpoint_every == 0
                                        or k + 1 == train_config.iterations):
                path = run_dir / f"ckpt_{k + 1:06d}.cpck"
                save_checkpoint(path, model_config, checkpoint_arrays(params, state),
                                {"iteration": k + 1, "opt_step": state.step,
                                 "train": train_config.to_dict()})
                checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, state, losses, checkpoints)
