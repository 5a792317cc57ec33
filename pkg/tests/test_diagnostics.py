import struct

import numpy as np
import pytest

from afd.attacks import AttackConfig
from afd.data import Dataset, SyntheticSpec, make_synthetic
from afd.diagnostics import (
    MetricsRecord,
    accuracy,
    adversarial_examples,
    dump_features,
    evaluate,
    feature_gap,
    gap_statistics,
    gap_trace,
    read_feature_dump,
    robust_accuracy,
    scatter_ratio,
    trend_slope,
    write_feature_dump,
)
from afd.errors import DataError, InputError
from afd.model import Architecture, ModelBundle, extract_features, init_finetune_model, init_model
from afd.training import FineTuneConfig, PretrainConfig, finetune, params_digest, pretrain_natural

ZERO = AttackConfig(epsilon=0.0, step_size=0.01, iterations=3)


@pytest.fixture(scope="module")
def setup():
    ds = make_synthetic(SyntheticSpec(num_classes=3, samples_per_class=40, input_shape=(3, 6, 6),
                                      separation=0.08, noise=0.1, seed=4))
    arch = Architecture((3, 6, 6), 3, feature_dim=8, channels=(4, 4))
    pre, _ = pretrain_natural(ds, PretrainConfig(epochs=5, lr=0.05, milestones=(4,), batch_size=30), arch)
    ft = init_finetune_model(pre, seed=0)
    rng = np.random.default_rng(0)
    ft.params["d1.weight"] = (np.eye(8) + 0.1 * rng.normal(size=(8, 8))).astype(np.float32)
    ft.params["d2.weight"] = rng.normal(size=(8, 8)).astype(np.float32)
    return pre, ft, ds


def test_perfect_margin_model():
    # 1-feature MLP whose classifier reads the sign of the first pixel
    arch = Architecture((1, 1, 2), 2, feature_dim=2, kind="mlp", hidden=())
    m = init_model(arch, 0)
    m.params = {"g.1.weight": np.eye(2, dtype=np.float32), "g.1.bias": np.zeros(2, np.float32),
                "fc.weight": np.float32([[10, -10], [-10, 10]]), "fc.bias": np.zeros(2, np.float32)}
    x = np.float32([[[[1, 0]]], [[[0, 1]]]])
    assert accuracy(m, Dataset(x, [0, 1], 2)) == 1.0


def test_epsilon_zero(setup):
    _, ft, ds = setup
    assert robust_accuracy(ft, ds, ZERO) == accuracy(ft, ds)
    for norm in ("l1", "l2", "linf"):
        assert feature_gap(ft, ds, ZERO, norm) == 0.0
    rec = evaluate(ft, ds, ZERO)
    assert rec.robust_acc == rec.clean_acc and set(rec.feature_gap.values()) == {0.0}


def test_gap_matches_bruteforce_and_norm_order(setup):
    pre, _, ds = setup
    x_adv = adversarial_examples(pre, ds, AttackConfig.evaluation())
    stats = gap_statistics(pre, ds.images, x_adv)
    nat = np.array([extract_features(ds.images[i : i + 1], pre).data[0] for i in range(len(ds))], np.float64)
    adv = np.array([extract_features(x_adv[i : i + 1], pre).data[0] for i in range(len(ds))], np.float64)
    per = [(np.abs(a - n).max(), np.linalg.norm(a - n), np.abs(a - n).sum()) for a, n in zip(adv, nat)]
    assert all(li <= l2 + 1e-9 and l2 <= l1 + 1e-9 for li, l2, l1 in per)
    np.testing.assert_allclose([stats["linf"], stats["l2"], stats["l1"]], np.mean(per, axis=0), rtol=1e-6)
    assert min(stats.values()) > 0


def test_merged_equals_through_d1(setup):
    _, ft, ds = setup
    assert accuracy(ft, ds, "merged") == accuracy(ft, ds, "through_D1")


def test_evaluation_has_no_side_effects(setup):
    _, ft, ds = setup
    before = params_digest(ft.params)
    evaluate(ft, ds, AttackConfig(iterations=3))
    feature_gap(ft, ds, AttackConfig(iterations=3), "l2", which="f1")
    assert params_digest(ft.params) == before


def test_record_fields_and_ranges(setup):
    _, ft, ds = setup
    rec = evaluate(ft, ds, AttackConfig(iterations=3), epoch=2)
    d = rec.to_dict()
    assert set(d) == {"clean_acc", "robust_acc", "feature_gap", "acc_f1", "acc_f2", "epoch"}
    assert all(0 <= d[k] <= 1 for k in ("clean_acc", "robust_acc", "acc_f1", "acc_f2"))
    assert all(v >= 0 for v in d["feature_gap"].values())
    assert rec.average == pytest.approx((rec.clean_acc + rec.robust_acc) / 2)
    assert MetricsRecord(0.5, 0.25).average == 0.375


def test_empty_and_bad_arguments(setup):
    _, ft, ds = setup
    with pytest.raises(InputError):
        accuracy(ft, ds.head(0))
    with pytest.raises(InputError):
        feature_gap(ft, ds, ZERO, "l3")


def test_dump_round_trip(setup, tmp_path):
    _, ft, ds = setup
    p = dump_features(ft, ds.head(25), AttackConfig(iterations=2), tmp_path / "f.afdf")
    raw = p.read_bytes()
    assert raw[:4] == b"AFDF"
    assert struct.unpack_from("<III", raw, 4) == (1, 25, 8)
    d = read_feature_dump(p)
    assert len(d["labels"]) == 25 and np.array_equal(d["labels"], ds.labels[:25])
    assert np.array_equal(d["natural"], extract_features(ds.images[:25], ft).data)


def test_write_read_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    blocks = [rng.normal(size=(7, 5)).astype(np.float32) for _ in range(4)]
    blocks[0][0, 0] = -0.0
    write_feature_dump(tmp_path / "x.afdf", np.arange(7), *blocks)
    d = read_feature_dump(tmp_path / "x.afdf")
    for key, b in zip(("natural", "adversarial", "f1", "f2"), blocks):
        assert d[key].tobytes() == b.tobytes()
    raw = (tmp_path / "x.afdf").read_bytes()
    (tmp_path / "bad.afdf").write_bytes(raw[:-1])
    with pytest.raises(DataError):
        read_feature_dump(tmp_path / "bad.afdf")


def test_gap_trace_from_run(setup):
    pre, _, ds = setup
    cfg = FineTuneConfig(epochs=3, batch_size=40, lr=0.0, attack=AttackConfig(iterations=2))
    _, _, rec = finetune(pre, ds, cfg, eval_data=ds.head(30), eval_attack=AttackConfig(iterations=3))
    series = gap_trace(rec)
    assert len(series) == 3
    assert np.all(series == series[0])  # lr = 0: constant model, constant series
    assert trend_slope(series) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        gap_trace(rec.epochs[:2] + [{"epoch": 5}])
    rec.epochs[1].pop("metrics")
    with pytest.raises(DataError):
        gap_trace(rec)


def test_trend_slope_and_scatter_oracles():
    assert trend_slope([3.0, 2.0, 1.0]) == pytest.approx(-1.0)
    assert trend_slope([1.0]) == 0.0
    labels = np.array([0, 0, 1, 1])
    tight = np.array([[0.0], [0.1], [5.0], [5.1]])
    loose = np.array([[0.0], [2.0], [3.0], [5.0]])
    assert scatter_ratio(tight, labels) > scatter_ratio(loose, labels)
    # brute-force between/within scatter for the tight case
    between = 2 * (0.05 - 2.55) ** 2 + 2 * (5.05 - 2.55) ** 2
    within = 4 * 0.05**2
    assert scatter_ratio(tight, labels) == pytest.approx(between / within)


def test_plain_model_has_no_head_accuracies(setup):
    pre, _, ds = setup
    rec = evaluate(pre, ds, ZERO)
    assert rec.acc_f1 is None and rec.acc_f2 is None
    assert isinstance(pre, ModelBundle)
