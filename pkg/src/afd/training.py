"""Natural pre-training and adversarial fine-tuning loops.

Fine-tuning modes:

    afd          disentangler + alignment, three staged updates per batch
    vaft         CE on adversarial examples, single update
    vaft_plus_d  the staged AFD updates with gamma = 0
    vaft_plus_a  vanilla AFT plus alignment of g(x') to the pretrained g(x)

All modes share one parameter layout (D1/D2 present); the vanilla modes never
touch D1/D2 and classify ``g(x)`` directly, so D1 stays the identity and the
merged classifier equals ω.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from afd import tensor as T
from afd.attacks import AttackConfig, pgd
from afd.data import Dataset, batches
from afd.diagnostics import evaluate
from afd.errors import ConfigError, InputError
from afd.losses import LossBreakdown, loss_aft_align, loss_confusion, loss_repulsion, select_wrong_label
from afd.model import Architecture, ModelBundle, extract_features, init_finetune_model, init_model
from afd.optim import OptimizerState, ema_update, sgd_momentum_step
from afd.tensor import Tape, Tensor

MODES = ("afd", "vaft", "vaft_plus_d", "vaft_plus_a")


@dataclass
class PretrainConfig:
    epochs: int = 100
    lr: float = 0.1
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (75, 90)
    momentum: float = 0.9
    batch_size: int = 128
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("lr milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigError("lr milestones must be smaller than the number of epochs")

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.lr_decay**k


@dataclass
class FineTuneConfig:
    alpha: float = 0.05
    beta: float = 0.25
    gamma: float = 25.0
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 128
    ema_decay: float = 0.999
    ema_covers_d2: bool = True
    attack: AttackConfig = field(default_factory=AttackConfig.training)
    mode: str = "afd"
    seed: int = 0
    # ((first_epoch, lr), ...); empty means constant ``lr``
    lr_schedule: tuple[tuple[int, float], ...] = ()
    freeze_d1: bool = False
    d2_init_scale: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown fine-tuning mode {self.mode!r}; expected one of {MODES}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta and gamma must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        self.lr_schedule = tuple(sorted((int(e), float(v)) for e, v in self.lr_schedule))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d


def finetune_lr_schedule(epoch: int, cfg: FineTuneConfig) -> float:
    """Constant ``cfg.lr`` unless a piecewise table is configured."""
    lr = cfg.lr
    for start, value in cfg.lr_schedule:
        if epoch >= start:
            lr = value
    return lr


@dataclass
class TrainRunRecord:
    kind: str
    config: dict
    num_epochs: int
    epochs: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def jsonl(self) -> str:
        """One JSON object per epoch; each carries the effective config."""
        lines = []
        for e in self.epochs:
            lines.append(json.dumps({"kind": self.kind, "config": self.config, **e,
                                     "checkpoints": self.checkpoints}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def final_metrics(self) -> dict | None:
        return self.epochs[-1].get("metrics") if self.epochs else None


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()[:16]


def _grads_by_name(P: dict[str, Tensor], names) -> dict[str, np.ndarray]:
    out = {}
    for k in names:
        g = P[k].grad
        out[k] = np.zeros_like(P[k].data) if g is None else g
    return out


# --------------------------------------------------------------------------
# natural pre-training
# --------------------------------------------------------------------------


def pretrain_natural(dataset: Dataset, cfg: PretrainConfig, arch: Architecture | None = None,
                     ) -> tuple[ModelBundle, TrainRunRecord]:
    if len(dataset) == 0:
        raise InputError("cannot pre-train on an empty dataset")
    if arch is None:
        arch = Architecture(dataset.input_shape, dataset.num_classes)
    model = init_model(arch, cfg.seed)
    opt = OptimizerState.for_params(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    record = TrainRunRecord("pretrain", {"pretrain": asdict(cfg), "arch": arch.to_dict()}, cfg.epochs)
    names = list(model.params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.lr_at(epoch)
        losses, correct = [], 0
        for xb, yb, _ in batches(dataset, cfg.batch_size, shuffle_seed=[cfg.seed, epoch]):
            P = model.tensors(trainable=names)
            with Tape() as tape:
                f = extract_features(xb, P, arch)
                out = T.linear(f, P["fc.weight"], P["fc.bias"])
                loss = T.softmax_cross_entropy(out, yb)
            T.backward(loss, tape)
            model.params = sgd_momentum_step(model.params, _grads_by_name(P, names), opt)
            losses.append(loss.item())
            correct += int((out.data.argmax(axis=1) == yb).sum())
        record.epochs.append({
            "epoch": epoch,
            "lr": opt.lr,
            "loss": float(np.mean(losses)),
            "train_acc": correct / len(dataset),
            "seconds": time.perf_counter() - t0,
        })
    return model, record


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


@dataclass
class SubStep:
    """Passed to ``substep_hook`` after every parameter update."""
    name: str  # "L1", "L2", "L3" or "vaft"
    epoch: int
    batch: int
    before: dict[str, np.ndarray]
    after: dict[str, np.ndarray]
    frozen: dict[str, Tensor]


@dataclass
class _State:
    model: ModelBundle
    frozen: dict[str, Tensor]  # pretrained parameters, never trainable
    opt: OptimizerState
    ema: dict[str, np.ndarray]
    cfg: FineTuneConfig
    hook: Callable[[SubStep], None] | None = None
    epoch: int = 0
    batch: int = 0

    def update(self, name: str, grads: dict[str, np.ndarray]) -> None:
        before = self.model.params
        self.model.params = sgd_momentum_step(before, grads, self.opt)
        if self.hook is not None:
            self.hook(SubStep(name, self.epoch, self.batch, before, self.model.params, self.frozen))


def _theta1_trainable(model: ModelBundle, cfg: FineTuneConfig, disentangled: bool) -> list[str]:
    if not disentangled:
        return [k for k in model.params if k.startswith(("g.", "fc."))]
    names = model.theta1
    if cfg.freeze_d1:
        names = [k for k in names if not k.startswith("d1.")]
    return names


def afd_substep_confusion(st: _State, feats: np.ndarray, y: np.ndarray) -> float:
    """Update θ2 (D2 only) with α·L1; f2 comes from detached adversarial features."""
    model = st.model
    P = model.tensors(trainable=model.theta2)
    f = Tensor(feats)
    with Tape() as tape:
        f1 = T.linear(f, P["d1.weight"], P["d1.bias"])
        f2 = T.linear(f, P["d2.weight"], P["d2.bias"])
        y_wrong = select_wrong_label(T.linear(f1, P["fc.weight"], P["fc.bias"]), y)
        l1 = loss_confusion(f2, P["fc.weight"], P["fc.bias"], y_wrong)
        loss = T.scale(l1, st.cfg.alpha)
    if st.cfg.alpha > 0:
        T.backward(loss, tape)
        st.update("L1", _grads_by_name(P, model.theta2))
    return l1.item()


def _afd_batch(st: _State, x_adv: np.ndarray, x: np.ndarray, y: np.ndarray) -> LossBreakdown:
    cfg, model, arch = st.cfg, st.model, st.model.arch
    theta1 = _theta1_trainable(model, cfg, True)

    # L2 graph first: θ1 is untouched by the L1 step, so its features are shared with it.
    P = model.tensors(trainable=theta1)
    with Tape() as tape:
        feats = extract_features(x_adv, P, arch)
        f1 = T.linear(feats, P["d1.weight"], P["d1.bias"])

    l1 = afd_substep_confusion(st, feats.data, y)

    d2w, d2b = Tensor(model.params["d2.weight"]), Tensor(model.params["d2.bias"])
    f2 = T.linear(Tensor(feats.data), d2w, d2b)
    with tape:
        l2 = loss_repulsion(f1, f2)
        loss = T.scale(l2, cfg.beta)
    if cfg.beta > 0:
        T.backward(loss, tape)
        st.update("L2", _grads_by_name(P, theta1))

    f_nat_pre = extract_features(x, st.frozen, arch)
    P = model.tensors(trainable=theta1)
    with Tape() as tape:
        f1 = T.linear(extract_features(x_adv, P, arch), P["d1.weight"], P["d1.bias"])
        ce, align = loss_aft_align(f1, P["fc.weight"], P["fc.bias"], y, f_nat_pre, cfg.gamma)
        loss = ce if cfg.gamma == 0 else T.add(ce, T.scale(align, cfg.gamma))
    T.backward(loss, tape)
    st.update("L3", _grads_by_name(P, theta1))
    return LossBreakdown.combine(l1, l2.item(), ce.item(), align.item(), cfg.alpha, cfg.beta, cfg.gamma)


def _vaft_batch(st: _State, x_adv: np.ndarray, x: np.ndarray, y: np.ndarray) -> LossBreakdown:
    cfg, model, arch = st.cfg, st.model, st.model.arch
    theta = _theta1_trainable(model, cfg, False)
    gamma = cfg.gamma if cfg.mode == "vaft_plus_a" else 0.0
    f_nat_pre = extract_features(x, st.frozen, arch) if cfg.mode == "vaft_plus_a" else None
    P = model.tensors(trainable=theta)
    with Tape() as tape:
        f = extract_features(x_adv, P, arch)
        if f_nat_pre is None:
            ce = T.softmax_cross_entropy(T.linear(f, P["fc.weight"], P["fc.bias"]), y)
            align_v, loss = 0.0, ce
        else:
            ce, align = loss_aft_align(f, P["fc.weight"], P["fc.bias"], y, f_nat_pre, gamma)
            align_v = align.item()
            loss = ce if gamma == 0 else T.add(ce, T.scale(align, gamma))
    T.backward(loss, tape)
    st.update("vaft", _grads_by_name(P, theta))
    return LossBreakdown.combine(0.0, 0.0, ce.item(), align_v, 0.0, 0.0, gamma)


def _attack_stream(cfg: FineTuneConfig, epoch: int) -> int:
    return cfg.seed * 100_003 + epoch + 1


def finetune(pretrained: ModelBundle, dataset: Dataset, cfg: FineTuneConfig,
             eval_data: Dataset | None = None, eval_attack: AttackConfig | None = None,
             eval_ema: bool = True, metrics_every: int = 1,
             batch_hook: Callable[[int, int, ModelBundle], None] | None = None,
             substep_hook: Callable[[SubStep], None] | None = None,
             ) -> tuple[ModelBundle, ModelBundle, TrainRunRecord]:
    """Run any fine-tuning mode; returns (live model, EMA model, record).

    With ``eval_data`` given, :class:`MetricsRecord` entries are computed every
    ``metrics_every`` epochs (and always after the last one) on the EMA model
    unless ``eval_ema`` is False.
    """
    if len(dataset) == 0:
        raise InputError("cannot fine-tune on an empty dataset")
    if pretrained.has_disentangler:
        raise ConfigError("pretrained model must be a plain extractor + classifier")
    if cfg.mode == "vaft_plus_d":
        cfg = replace(cfg, gamma=0.0)
    model = init_finetune_model(pretrained, seed=cfg.seed, d2_scale=cfg.d2_init_scale)
    st = _State(
        model=model,
        frozen={k: Tensor(v) for k, v in pretrained.params.items()},
        opt=OptimizerState.for_params(model.params, cfg.lr, cfg.momentum, cfg.weight_decay),
        ema={k: v.copy() for k, v in model.params.items()},
        cfg=cfg,
        hook=substep_hook,
    )
    disentangled = cfg.mode in ("afd", "vaft_plus_d")
    step = _afd_batch if disentangled else _vaft_batch
    loss_path = "through_D1" if disentangled else "pre_disentangle"
    eval_attack = eval_attack or AttackConfig.evaluation()
    record = TrainRunRecord("finetune", {"finetune": cfg.to_dict(), "arch": pretrained.arch.to_dict()}, cfg.epochs)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        st.opt.lr = finetune_lr_schedule(epoch, cfg)
        parts: list[LossBreakdown] = []
        for b, (xb, yb, idx) in enumerate(batches(dataset, cfg.batch_size, shuffle_seed=[cfg.seed, epoch])):
            st.epoch, st.batch = epoch, b
            # attack against the live weights at batch start
            x_adv = pgd(xb, yb, st.model, cfg.attack, loss_path=loss_path, sample_ids=idx,
                        stream=_attack_stream(cfg, epoch))
            parts.append(step(st, x_adv, xb, yb))
            st.ema = ema_update(st.ema, st.model.params, cfg.ema_decay)
            if not cfg.ema_covers_d2:
                st.ema.update({k: st.model.params[k] for k in st.model.theta2})
            if batch_hook is not None:
                batch_hook(epoch, b, st.model)
        entry = {
            "epoch": epoch,
            "lr": st.opt.lr,
            "loss": {k: float(np.mean([getattr(p, k) for p in parts])) for k in LossBreakdown.__dataclass_fields__},
            "train_seconds": time.perf_counter() - t0,
        }
        if eval_data is not None and ((epoch + 1) % max(1, metrics_every) == 0 or epoch == cfg.epochs - 1):
            target = ModelBundle(st.model.arch, st.ema) if eval_ema else st.model
            entry["metrics"] = evaluate(target, eval_data, eval_attack, epoch=epoch).to_dict()
        record.epochs.append(entry)

    ema_model = ModelBundle(st.model.arch, dict(st.ema))
    record.checkpoints = {"live": params_digest(st.model.params), "ema": params_digest(st.ema)}
    return st.model, ema_model, record


def afd_finetune(pretrained, dataset, cfg: FineTuneConfig, **kw):
    if cfg.mode != "afd":
        raise ConfigError(f"afd_finetune requires mode 'afd', got {cfg.mode!r}")
    return finetune(pretrained, dataset, cfg, **kw)


def vanilla_aft(pretrained, dataset, cfg: FineTuneConfig, **kw):
    if cfg.mode != "vaft":
        raise ConfigError(f"vanilla_aft requires mode 'vaft', got {cfg.mode!r}")
    return finetune(pretrained, dataset, cfg, **kw)


def ablation_modes(pretrained, dataset, cfg: FineTuneConfig, **kw):
    if cfg.mode not in ("vaft_plus_d", "vaft_plus_a"):
        raise ConfigError(f"ablation_modes requires mode vaft_plus_d or vaft_plus_a, got {cfg.mode!r}")
    return finetune(pretrained, dataset, cfg, **kw)
