"""Evaluation and analysis: accuracies, robust accuracy, feature gaps, feature dumps."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from afd.attacks import AttackConfig, pgd
from afd.data import Dataset
from afd.errors import DataError, InputError
from afd.model import ModelBundle, disentangle, extract_features, logits
from afd.tensor import Tensor

NORMS = ("l1", "l2", "linf")
DUMP_MAGIC = b"AFDF"
DUMP_VERSION = 1
EVAL_BATCH = 500


@dataclass
class MetricsRecord:
    clean_acc: float
    robust_acc: float
    feature_gap: dict[str, float] = field(default_factory=dict)
    acc_f1: float | None = None
    acc_f2: float | None = None
    epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def average(self) -> float:
        return 0.5 * (self.clean_acc + self.robust_acc)


def _require_data(ds: Dataset) -> None:
    if len(ds) == 0:
        raise InputError("evaluation dataset is empty")


def _chunks(n: int, size: int = EVAL_BATCH):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def accuracy(model: ModelBundle, ds: Dataset, path: str = "merged", images: np.ndarray | None = None) -> float:
    """Top-1 accuracy along ``path``; ``images`` optionally replaces ``ds.images``."""
    _require_data(ds)
    x = ds.images if images is None else images
    correct = 0
    for sl in _chunks(len(ds)):
        correct += int((np.argmax(logits(model, x[sl], path).data, axis=1) == ds.labels[sl]).sum())
    return correct / len(ds)


def adversarial_examples(model: ModelBundle, ds: Dataset, attack: AttackConfig, stream: int = 0) -> np.ndarray:
    """PGD examples crafted against the merged inference path, keyed by dataset index."""
    _require_data(ds)
    out = np.empty_like(ds.images)
    for sl in _chunks(len(ds)):
        ids = np.arange(sl.start, sl.stop)
        out[sl] = pgd(ds.images[sl], ds.labels[sl], model, attack, loss_path="merged", sample_ids=ids, stream=stream)
    return out


def robust_accuracy(model: ModelBundle, ds: Dataset, attack: AttackConfig) -> float:
    return accuracy(model, ds, "merged", images=adversarial_examples(model, ds, attack))


def _features(model: ModelBundle, x: np.ndarray, which: str) -> np.ndarray:
    rows = []
    for sl in _chunks(len(x)):
        f = extract_features(x[sl], model)
        if which == "f1" and model.has_disentangler:
            f = disentangle(f, model)[0]
        rows.append(f.data)
    return np.concatenate(rows)


def gap_statistics(model: ModelBundle, x: np.ndarray, x_adv: np.ndarray, which: str = "features") -> dict[str, float]:
    """Batch-mean L1/L2/L∞ distances between last-hidden-layer features.

    ``which="features"`` compares g(x') with g(x); ``which="f1"`` compares
    D1(g(x')) with g(x).
    """
    if which not in ("features", "f1"):
        raise InputError(f"unknown gap target {which!r}")
    nat = _features(model, x, "features").astype(np.float64)
    adv = _features(model, x_adv, which).astype(np.float64)
    diff = adv - nat
    return {
        "l1": float(np.abs(diff).sum(axis=1).mean()),
        "l2": float(np.sqrt((diff**2).sum(axis=1)).mean()),
        "linf": float(np.abs(diff).max(axis=1).mean()),
    }


def feature_gap(model: ModelBundle, ds: Dataset, attack: AttackConfig, norm: str = "linf",
                which: str = "features") -> float:
    norm = norm.lower()
    if norm not in NORMS:
        raise InputError(f"unknown norm {norm!r}; expected one of {NORMS}")
    x_adv = adversarial_examples(model, ds, attack)
    return gap_statistics(model, ds.images, x_adv, which)[norm]


def evaluate(model: ModelBundle, ds: Dataset, attack: AttackConfig, epoch: int | None = None) -> MetricsRecord:
    """Clean/robust accuracy, feature gap and head accuracies from a single attack pass."""
    x_adv = adversarial_examples(model, ds, attack)
    rec = MetricsRecord(
        clean_acc=accuracy(model, ds, "merged"),
        robust_acc=accuracy(model, ds, "merged", images=x_adv),
        feature_gap=gap_statistics(model, ds.images, x_adv),
        epoch=epoch,
    )
    if model.has_disentangler:
        rec.acc_f1 = accuracy(model, ds, "through_D1")
        rec.acc_f2 = accuracy(model, ds, "through_D2")
    return rec


def gap_trace(run, norm: str = "linf") -> np.ndarray:
    """Per-epoch feature-gap series from a training record (or its epoch list)."""
    epochs = run.epochs if hasattr(run, "epochs") else run
    expected = getattr(run, "num_epochs", len(epochs))
    if len(epochs) != expected or [e["epoch"] for e in epochs] != list(range(expected)):
        raise DataError("training record is missing epochs")
    series = []
    for e in epochs:
        m = e.get("metrics")
        if not m or norm not in m.get("feature_gap", {}):
            raise DataError(f"epoch {e['epoch']} has no {norm} feature gap")
        series.append(m["feature_gap"][norm])
    return np.asarray(series)


def trend_slope(series) -> float:
    """Least-squares slope of a series against its index."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 2:
        return 0.0
    return float(np.polyfit(np.arange(y.size, dtype=np.float64), y, 1)[0])


def scatter_ratio(features: np.ndarray, labels: np.ndarray) -> float:
    """Between-class over within-class scatter (trace ratio)."""
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    between = within = 0.0
    for c in np.unique(labels):
        fc = f[labels == c]
        mc = fc.mean(axis=0)
        between += len(fc) * float(((mc - mu) ** 2).sum())
        within += float(((fc - mc) ** 2).sum())
    return between / max(within, 1e-300)


def dump_features(model: ModelBundle, ds: Dataset, attack: AttackConfig, path) -> Path:
    """Write (label, natural, adversarial, f1, f2) rows in the AFDF binary layout."""
    _require_data(ds)
    x_adv = adversarial_examples(model, ds, attack)
    nat = _features(model, ds.images, "features")
    adv = _features(model, x_adv, "features")
    if model.has_disentangler:
        f1 = np.concatenate([disentangle(Tensor(adv[sl]), model)[0].data for sl in _chunks(len(adv))])
        f2 = np.concatenate([disentangle(Tensor(adv[sl]), model)[1].data for sl in _chunks(len(adv))])
    else:
        f1, f2 = adv, np.zeros_like(adv)
    write_feature_dump(path, ds.labels, nat, adv, f1, f2)
    return Path(path)


def write_feature_dump(path, labels, nat, adv, f1, f2) -> None:
    n, d = nat.shape
    le = np.dtype("<f4")
    body = np.empty((n, 4 + 16 * d), dtype=np.uint8)
    body[:, :4] = np.asarray(labels, dtype="<u4").view(np.uint8).reshape(n, 4)
    for k, block in enumerate((nat, adv, f1, f2)):
        body[:, 4 + 4 * d * k : 4 + 4 * d * (k + 1)] = np.ascontiguousarray(block, dtype=le).view(np.uint8).reshape(n, 4 * d)
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<III", DUMP_VERSION, n, d))
        fh.write(body.tobytes())


def read_feature_dump(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != DUMP_VERSION:
        raise DataError(f"{path}: unsupported feature dump version {version}")
    row = 4 + 16 * d
    if len(raw) != 16 + n * row:
        raise DataError(f"{path}: expected {16 + n * row} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, row)
    out = {"labels": body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)}
    for k, key in enumerate(("natural", "adversarial", "f1", "f2")):
        out[key] = body[:, 4 + 4 * d * k : 4 + 4 * d * (k + 1)].copy().view("<f4").reshape(n, d).astype(np.float32)
    return out
