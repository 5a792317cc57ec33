"""L∞ projected sign-gradient attacks (PGD, FGSM)."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from afd import tensor as T
from afd.errors import ConfigError, InputError
from afd.model import ModelBundle, logits
from afd.tensor import Tensor


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError("attack step_size must be positive")
        if self.epsilon < 0:
            raise ConfigError("attack epsilon must be non-negative")
        if self.iterations < 1:
            raise ConfigError("attack iterations must be >= 1")

    @classmethod
    def training(cls, seed: int = 0) -> "AttackConfig":
        """PGD-10, step 2/255, random start."""
        return cls(8 / 255, 2 / 255, 10, True, seed)

    @classmethod
    def evaluation(cls, seed: int = 0) -> "AttackConfig":
        """PGD-20, step 0.003, random start."""
        return cls(8 / 255, 0.003, 20, True, seed)


def project(x_cand, x, epsilon: float) -> np.ndarray:
    """Clamp into the ε-ball around ``x`` intersected with the [0, 1] pixel box."""
    xc = np.asarray(x_cand.data if isinstance(x_cand, Tensor) else x_cand)
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x)
    if xc.shape != x0.shape:
        raise InputError(f"project: shape mismatch {xc.shape} vs {x0.shape}")
    eps = x0.dtype.type(epsilon)
    out = np.minimum(np.maximum(xc, x0 - eps), x0 + eps)
    return np.clip(out, 0, 1).astype(x0.dtype, copy=False)


LogitsFn = Callable[[Tensor], Tensor]


def _logits_fn(model, loss_path: str) -> LogitsFn:
    if isinstance(model, ModelBundle):
        P = model.tensors()
        path = loss_path if model.has_disentangler else "pre_disentangle"
        return lambda xt: logits(model, xt, path, params=P)
    if callable(model):
        return model
    raise InputError(f"cannot attack object of type {type(model).__name__}")


def input_gradient(fn: LogitsFn, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the summed per-sample cross-entropy w.r.t. the input."""
    xt = Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        out = fn(xt)
        loss = T.scale(T.softmax_cross_entropy(out, y), len(y))
    T.backward(loss, tape)
    return xt.grad


def random_start(shape, epsilon: float, seed: int, stream: int, sample_ids, dtype=np.float32) -> np.ndarray:
    """Per-sample uniform noise in [-ε, ε], keyed by (seed, stream, sample id)."""
    rows = [
        np.random.default_rng([seed, stream, int(s)]).uniform(-epsilon, epsilon, size=shape[1:])
        for s in sample_ids
    ]
    return np.asarray(rows, dtype=dtype).reshape(shape)


def _pgd_chunk(fn, x, y, cfg, noise):
    step = x.dtype.type(cfg.step_size)
    xa = project(x + noise, x, cfg.epsilon) if noise is not None else x.copy()
    for _ in range(cfg.iterations):
        g = input_gradient(fn, xa, y)
        xa = project(xa + step * np.sign(g), x, cfg.epsilon)
    return xa


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AFD_THREADS", "1")))
    except ValueError:
        return 1


def pgd(x, y, model, cfg: AttackConfig, loss_path: str = "through_D1", sample_ids=None,
        stream: int = 0) -> np.ndarray:
    """Untargeted L∞ PGD against ``model``.

    ``model`` is a :class:`ModelBundle` (attacked through ``loss_path``) or any
    callable mapping an input tensor to logits. ``sample_ids`` and ``stream``
    key the random start so that a sample's result does not depend on which
    batch it was attacked in.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match batch of {x.shape[0]}")
    fn = _logits_fn(model, loss_path)
    if sample_ids is None:
        sample_ids = np.arange(len(x))
    noise = None
    if cfg.random_start:
        noise = random_start(x.shape, cfg.epsilon, cfg.seed, stream, sample_ids, x.dtype)

    workers = min(_workers(), len(x))
    if workers <= 1:
        return _pgd_chunk(fn, x, y, cfg, noise)
    parts = np.array_split(np.arange(len(x)), workers)
    with ThreadPoolExecutor(workers) as pool:
        futs = [pool.submit(_pgd_chunk, fn, x[p], y[p], cfg, None if noise is None else noise[p]) for p in parts]
        return np.concatenate([f.result() for f in futs])


def fgsm(x, y, model, epsilon: float, loss_path: str = "through_D1") -> np.ndarray:
    if epsilon <= 0:
        # ε = 0 admits no perturbation; AttackConfig rejects a zero step size
        return np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    cfg = AttackConfig(epsilon=epsilon, step_size=epsilon, iterations=1, random_start=False)
    return pgd(x, y, model, cfg, loss_path)
