"""Feature extractor, disentangler blocks D1/D2, classifier, and classifier merging.

Parameters live in a flat, ordered ``name -> float32 array`` mapping:

    g.<i>.weight / g.<i>.bias   extractor layers
    d1.weight / d1.bias         disentangler block producing f1
    d2.weight / d2.bias         disentangler block producing f2
    fc.weight / fc.bias         linear classifier

A naturally trained model simply has no ``d1.*`` / ``d2.*`` entries.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from afd import tensor as T
from afd.errors import ConfigError, DimensionError, InputError
from afd.tensor import Tensor

PATHS = ("merged", "through_D1", "through_D2", "pre_disentangle")
D2_INIT_SCALE = 0.01


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int]
    num_classes: int
    feature_dim: int = 32
    kind: str = "conv"  # "conv" or "mlp"
    channels: tuple[int, ...] = (8, 16)
    hidden: tuple[int, ...] = (64,)
    feature_relu: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "mlp"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ConfigError("feature_dim must be >= 1 and num_classes >= 2")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "channels", "hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def layers(self) -> list[tuple]:
        """Extractor layer list: ("conv", out, k, stride, pad) / ("relu",) / ("flatten",) / ("linear", out)."""
        c, h, w = self.input_shape
        out: list[tuple] = []
        if self.kind == "conv":
            for i, ch in enumerate(self.channels):
                # first conv keeps resolution, later ones halve it
                stride = 1 if i == 0 else 2
                out += [("conv", ch, 3, stride, 1), ("relu",)]
            out.append(("flatten",))
        else:
            out.append(("flatten",))
            for width in self.hidden:
                out += [("linear", width), ("relu",)]
        out.append(("linear", self.feature_dim))
        if self.feature_relu:
            out.append(("relu",))
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c, h, w = self.input_shape
        flat = None
        for i, layer in enumerate(self.layers()):
            if layer[0] == "conv":
                _, o, k, s, p = layer
                shapes[f"g.{i}.weight"] = (o, c, k, k)
                shapes[f"g.{i}.bias"] = (o,)
                c, h, w = o, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            elif layer[0] == "flatten":
                flat = c * h * w
            elif layer[0] == "linear":
                shapes[f"g.{i}.weight"] = (layer[1], flat)
                shapes[f"g.{i}.bias"] = (layer[1],)
                flat = layer[1]
        return shapes


@dataclass
class ModelBundle:
    arch: Architecture
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_disentangler(self) -> bool:
        return "d1.weight" in self.params

    @property
    def theta2(self) -> list[str]:
        return [k for k in self.params if k.startswith("d2.")]

    @property
    def theta1(self) -> list[str]:
        return [k for k in self.params if not k.startswith("d2.")]

    @property
    def extractor_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("g.")]

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.params.items()}

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.arch, {k: v.copy() for k, v in self.params.items()})


def _as_params(model) -> Mapping[str, Tensor]:
    if isinstance(model, ModelBundle):
        return model.tensors()
    return model


def _init_layer(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_model(arch: Architecture, seed: int = 0) -> ModelBundle:
    """He-initialized extractor and classifier, no disentangler."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("weight"):
            params[name] = _init_layer(rng, shape, int(np.prod(shape[1:])))
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    fd = arch.feature_dim
    params["fc.weight"] = (rng.standard_normal((arch.num_classes, fd)) * np.sqrt(1.0 / fd)).astype(np.float32)
    params["fc.bias"] = np.zeros(arch.num_classes, dtype=np.float32)
    return ModelBundle(arch, params)


def init_finetune_model(pretrained: ModelBundle, seed: int = 0, d2_scale: float = D2_INIT_SCALE,
                        arch: Architecture | None = None) -> ModelBundle:
    """Copy θ^P, then add D1 = identity and D2 = small random, both with zero bias."""
    if arch is not None and arch != pretrained.arch:
        raise ConfigError(f"pretrained architecture {pretrained.arch} does not match requested {arch}")
    expected = set(pretrained.arch.param_shapes()) | {"fc.weight", "fc.bias"}
    if set(k for k in pretrained.params if not k.startswith(("d1.", "d2."))) != expected:
        raise ConfigError("pretrained parameters do not match the architecture")
    fd = pretrained.arch.feature_dim
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in pretrained.params.items() if not k.startswith(("d1.", "d2.", "fc."))}
    params["d1.weight"] = np.eye(fd, dtype=np.float32)
    params["d1.bias"] = np.zeros(fd, dtype=np.float32)
    params["d2.weight"] = (rng.standard_normal((fd, fd)) * d2_scale).astype(np.float32)
    params["d2.bias"] = np.zeros(fd, dtype=np.float32)
    params["fc.weight"] = pretrained.params["fc.weight"].copy()
    params["fc.bias"] = pretrained.params["fc.bias"].copy()
    return ModelBundle(pretrained.arch, params)


def extract_features(x, model, arch: Architecture | None = None) -> Tensor:
    """Last-hidden-layer activations g(x; θg), shape [batch, feature_dim].

    ``model`` is a :class:`ModelBundle` or a mapping of parameter tensors (in
    which case ``arch`` is required).
    """
    if isinstance(model, ModelBundle):
        arch = model.arch
    P = _as_params(model)
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if h.shape[1:] != arch.input_shape:
        raise DimensionError(f"input shape {h.shape[1:]} does not match extractor input {arch.input_shape}")
    for i, layer in enumerate(arch.layers()):
        kind = layer[0]
        if kind == "conv":
            h = T.conv2d(h, P[f"g.{i}.weight"], P[f"g.{i}.bias"], stride=layer[3], padding=layer[4])
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "flatten":
            h = T.flatten(h)
        else:
            h = T.linear(h, P[f"g.{i}.weight"], P[f"g.{i}.bias"])
    return h


def disentangle(f_adv: Tensor, model) -> tuple[Tensor, Tensor]:
    P = _as_params(model)
    if "d1.weight" not in P:
        raise ConfigError("model has no disentangler")
    width = P["d1.weight"].shape[1]
    if f_adv.ndim != 2 or f_adv.shape[1] != width:
        raise DimensionError(f"features of width {f_adv.shape[-1]} do not match disentangler width {width}")
    return T.linear(f_adv, P["d1.weight"], P["d1.bias"]), T.linear(f_adv, P["d2.weight"], P["d2.bias"])


def classify(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.linear(f, weight, bias)


def merge_classifier(d1_weight, d1_bias, fc_weight, fc_bias) -> tuple[np.ndarray, np.ndarray]:
    """Fold the affine block D1 into the classifier: ω'(f) == ω(D1(f)) for all f."""
    d1_weight, d1_bias = np.asarray(d1_weight), np.asarray(d1_bias)
    fc_weight, fc_bias = np.asarray(fc_weight), np.asarray(fc_bias)
    if d1_weight.shape[0] != fc_weight.shape[1] or d1_bias.shape[0] != d1_weight.shape[0]:
        raise DimensionError(f"cannot merge D1 {d1_weight.shape} into classifier {fc_weight.shape}")
    w64 = fc_weight.astype(np.float64)
    weight = w64 @ d1_weight.astype(np.float64)
    bias = w64 @ d1_bias.astype(np.float64) + fc_bias
    return weight.astype(fc_weight.dtype), bias.astype(fc_bias.dtype)


def merged_model(model: ModelBundle) -> ModelBundle:
    """Inference model without disentangler blocks."""
    if not model.has_disentangler:
        return model.copy()
    params = {k: v.copy() for k, v in model.params.items() if k.startswith("g.")}
    params["fc.weight"], params["fc.bias"] = merge_classifier(
        model.params["d1.weight"], model.params["d1.bias"], model.params["fc.weight"], model.params["fc.bias"]
    )
    return ModelBundle(model.arch, params)


def logits(model: ModelBundle, x, path: str = "merged", params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Logits along one of the feature paths in :data:`PATHS`."""
    if path not in PATHS:
        raise InputError(f"unknown path {path!r}; expected one of {PATHS}")
    P = params if params is not None else model.tensors()
    f = extract_features(x, P, model.arch)
    if path == "pre_disentangle" or "d1.weight" not in P:
        if path == "through_D2":
            raise ConfigError("model has no disentangler; through_D2 is undefined")
        return classify(f, P["fc.weight"], P["fc.bias"])
    if path == "merged":
        w, b = merge_classifier(P["d1.weight"].data, P["d1.bias"].data, P["fc.weight"].data, P["fc.bias"].data)
        return classify(f, Tensor(w), Tensor(b))
    block = "d1" if path == "through_D1" else "d2"
    return classify(T.linear(f, P[f"{block}.weight"], P[f"{block}.bias"]), P["fc.weight"], P["fc.bias"])


def predict(model: ModelBundle, x, path: str = "merged") -> np.ndarray:
    return np.argmax(logits(model, x, path).data, axis=1)
