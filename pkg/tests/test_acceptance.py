"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train real models (about 5 and 50 minutes on one CPU core).
Run just this file with ``pytest tests/test_acceptance.py -v``; the summary
section at the end lists every criterion.
"""

import os
import time

import numpy as np
import pytest

from doodlenet import tensor as T
from doodlenet.cli import main, smoke_pipeline
from doodlenet.data import SegDataset, generate_dataset, generate_sample, load_sample, save_sample
from doodlenet.evaluate import ConfusionMatrix, metrics_from_confusion, median_table, run_ablation
from doodlenet.gradcheck import (MODEL_TOLERANCE, OP_TOLERANCE, model_gradcheck, op_gradchecks,
                                 tiny_config)
from doodlenet.model import (FUSION_VARIANTS, VARIANTS, DooDLeNet, ModelConfig, confidence_map,
                             correlation_volume)
from doodlenet.netpbm import read_netpbm, write_pgm, write_ppm
from doodlenet.tensor import Tensor
from doodlenet.train import TrainConfig, fit, model_from_checkpoint, save_checkpoint
from doodlenet.evaluate import evaluate_subsets

# toy convergence run
TOY_SAMPLES, TOY_EPOCHS = 200, 30
LOSS_FACTOR, TOY_MIOU = 0.30, 0.55
# ablation run
ABLATION_SAMPLES, ABLATION_EPOCHS, ABLATION_SEEDS = 400, 50, (0, 1, 2)
MARGIN = 0.01


def _one_hot(classes, k):
    return np.eye(k)[np.asarray(classes)].transpose(2, 0, 1)[None].astype(np.float64)


def test_c1_gradient_checks(criterion):
    start = time.perf_counter()
    ops = op_gradchecks(seed=0)
    model = model_gradcheck(n_params=10, seed=0, config=tiny_config())
    elapsed = time.perf_counter() - start
    worst_op = max(ops, key=ops.get)
    ok = (max(ops.values()) < OP_TOLERANCE and model["max_rel_error"] < MODEL_TOLERANCE
          and elapsed < 120)
    nonzero = sum(c["analytic"] != 0 for c in model["checks"])
    assert criterion("1 gradient checks", ok,
                     f"worst op {worst_op} {ops[worst_op]:.2e} < 1e-4; model "
                     f"{model['max_rel_error']:.2e} < 1e-3 ({nonzero}/10 nonzero); {elapsed:.1f}s")


def test_c2_metric_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        pred, true = rng.integers(0, 5, (2, 16, 16))
        cm = ConfusionMatrix(5)
        cm.update(pred, true)
        r = metrics_from_confusion(cm)
        for c in range(5):
            t, p = true == c, pred == c
            acc = (t & p).sum() / t.sum() if t.sum() else float("nan")
            iou = (t & p).sum() / (t | p).sum() if (t | p).sum() else float("nan")
            mismatches += not (np.array_equal(r.acc[c], acc, equal_nan=True)
                               and np.array_equal(r.iou[c], iou, equal_nan=True))
    elapsed = time.perf_counter() - start
    assert criterion("2 metric oracle", mismatches == 0 and elapsed < 10,
                     f"{mismatches} mismatches over 100 pairs; {elapsed:.2f}s")


def test_c3_confidence_properties(criterion):
    rng = np.random.default_rng(3)
    bounds_ok = True
    for k in (2, 3, 5, 8):
        logits = rng.standard_normal((1, k, 10, 25)) * 3  # 250 vectors per k, 1000 total
        c = confidence_map(Tensor(logits)).data
        bounds_ok &= bool(np.all(c >= 1 / k) and np.all(c < 1))
    uniform_ok = all(confidence_map(Tensor(np.full((1, k, 1, 1), 0.7))).data.item() == 1 / k
                     for k in (2, 3, 4, 5, 7))
    cfg = ModelConfig()
    full = DooDLeNet(cfg)
    plain = DooDLeNet(cfg.replace(variant="unweighted"))
    plain.load_state_dict(full.state_dict(), strict=False)
    color = rng.random((2, 3, 64, 64)).astype(np.float32)
    thermal = rng.random((2, 1, 64, 64)).astype(np.float32)
    with T.no_grad():
        limit_ok = np.array_equal(full(color, thermal, unit_gates=True).y_final.data,
                                  plain(color, thermal).y_final.data)
    assert criterion("3 confidence map properties", bounds_ok and uniform_ok and limit_ok,
                     f"bounds {bounds_ok}, uniform == 1/k {uniform_ok}, gating limit bit-identical "
                     f"{limit_ok}")


def test_c4_correlation_layer(criterion):
    rng = np.random.default_rng(4)
    yc, yt = rng.standard_normal((2, 4, 5, 8, 8))
    vol = correlation_volume(Tensor(yc), Tensor(yt)).data
    raw = np.maximum(np.einsum("bki,bkj->bij", yt.reshape(4, 5, 64), yc.reshape(4, 5, 64)), 0)
    live = raw.sum(axis=1) > 0
    norms = np.sqrt((vol ** 2).sum(axis=1)).reshape(4, 64)
    unit_ok = bool(np.all(np.abs(norms[live] - 1) < 1e-5) and np.all(vol >= 0))

    same = _one_hot([[0, 1]], 2)
    swapped = _one_hot([[1, 0]], 2)
    ident = correlation_volume(Tensor(same), Tensor(same)).data.reshape(2, 2).tolist()
    anti = correlation_volume(Tensor(same), Tensor(swapped)).data.reshape(2, 2).tolist()
    examples_ok = ident == [[1.0, 0.0], [0.0, 1.0]] and anti == [[0.0, 1.0], [1.0, 0.0]]

    classes = np.arange(16).reshape(4, 4)
    base = correlation_volume(Tensor(_one_hot(classes, 16)), Tensor(_one_hot(classes, 16))).data[0]
    shift_ok = True
    for axis in (0, 1):
        moved = np.roll(classes, 1, axis=axis)
        vol = correlation_volume(Tensor(_one_hot(classes, 16)), Tensor(_one_hot(moved, 16))).data[0]
        shift_ok &= np.array_equal(vol, base[moved.reshape(-1)])
    assert criterion("4 correlation layer", unit_ok and examples_ok and shift_ok,
                     f"unit norm {unit_ok}, identity/anti-diagonal {examples_ok}, "
                     f"shift permutes channels {shift_ok}")


@pytest.mark.slow
def test_c5_toy_convergence(criterion, tmp_path):
    start = time.perf_counter()
    generate_dataset(TOY_SAMPLES, 64, 5, 3, 0.52, 0, tmp_path / "data")
    data = SegDataset(tmp_path / "data")
    model = DooDLeNet(ModelConfig(variant="full", seed=0))
    result = fit(model, data, TrainConfig(epochs=TOY_EPOCHS, seed=0), str(tmp_path / "m.ddlf"))
    test = evaluate_subsets(model, data, "test")
    elapsed = time.perf_counter() - start
    initial = result["step_losses"][0]
    final = result["history"][-1]["loss"]
    ok = final < LOSS_FACTOR * initial and test["all"].miou > TOY_MIOU and elapsed < 900
    assert criterion("5 toy convergence", ok,
                     f"loss {initial:.3f} -> {final:.3f} (ratio {final / initial:.3f} < "
                     f"{LOSS_FACTOR}); test mIoU {test['all'].miou:.3f} > {TOY_MIOU} "
                     f"(day {test['day'].miou:.3f}, night {test['night'].miou:.3f}); "
                     f"{elapsed:.0f}s")


@pytest.mark.slow
def test_c6_ablation_ordering(criterion, tmp_path):
    start = time.perf_counter()
    generate_dataset(ABLATION_SAMPLES, 64, 5, 3, 0.52, 100, tmp_path / "data")
    data = SegDataset(tmp_path / "data")
    table = run_ablation(data, VARIANTS, ABLATION_SEEDS, TrainConfig(epochs=ABLATION_EPOCHS),
                         str(tmp_path / "ablation"))
    elapsed = time.perf_counter() - start
    med = median_table(table)
    allm = {v: med[v]["all_miou"] for v in VARIANTS}
    print("median mIoU (day / night / all):")
    for v in VARIANTS:
        print(f"  {v:10s} {med[v]['day_miou']:.3f} {med[v]['night_miou']:.3f} {allm[v]:.3f}")
    best_single = max(allm["rgb"], allm["thermal"], allm["stacked"])
    a = allm["full"] >= allm["conf_only"] - MARGIN and allm["full"] >= allm["unweighted"] - MARGIN
    b = all(allm[v] >= best_single - MARGIN for v in FUSION_VARIANTS)
    night = med["thermal"]["night_miou"] > med["rgb"]["night_miou"]
    day = med["rgb"]["day_miou"] > med["thermal"]["day_miou"]
    statuses_ok = all(r["status"] == "ok" for r in table)
    summary = " ".join(f"{v}={allm[v]:.3f}" for v in VARIANTS)
    criterion("6a full >= conf_only, unweighted (-0.01)", a, summary)
    criterion("6b fusion >= best single (-0.01)", b, f"best single {best_single:.3f}")
    criterion("6c night thermal > rgb, day rgb > thermal", night and day,
              f"night {med['thermal']['night_miou']:.3f} vs {med['rgb']['night_miou']:.3f}; "
              f"day {med['rgb']['day_miou']:.3f} vs {med['thermal']['day_miou']:.3f}")
    criterion("6 runtime < 2 h", elapsed < 7200 and statuses_ok, f"{elapsed / 60:.1f} min")
    assert a and b and night and day and elapsed < 7200 and statuses_ok


def test_c7_determinism(criterion, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n", "24", "--seed", "5"]) == 0
    for run in ("a", "b"):
        assert main(["train", "--data", str(tmp_path / "d"), "--variant", "full", "--epochs", "2",
                     "--seed", "0", "--out", str(tmp_path / run / "m.ddlf")]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("m.ddlf", "m.best.ddlf", "m.metrics.csv", "m.history.csv")}
    assert criterion("7 determinism", all(same.values()),
                     ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


def test_c8_io_round_trips(criterion, tmp_path):
    rng = np.random.default_rng(8)
    gray = rng.integers(0, 256, (13, 17), dtype=np.uint8)
    rgb = rng.integers(0, 256, (13, 17, 3), dtype=np.uint8)
    write_pgm(tmp_path / "g.pgm", gray)
    write_ppm(tmp_path / "c.ppm", rgb)
    raw_ok = (np.array_equal(read_netpbm(tmp_path / "g.pgm"), gray)
              and np.array_equal(read_netpbm(tmp_path / "c.ppm"), rgb))

    sample = generate_sample(3, 8, 64, 5, 3, 0.5)
    save_sample(tmp_path / "s", sample)
    back = load_sample(tmp_path / "s", sample.id)
    sample_ok = (np.array_equal(back.labels, sample.labels)
                 and np.abs(back.color - sample.color).max() <= 1 / 255 + 1e-7
                 and np.abs(back.thermal - sample.thermal).max() <= 1 / 255 + 1e-7)

    model = DooDLeNet(ModelConfig(seed=8))
    save_checkpoint(str(tmp_path / "m.ddlf"), model, 0)
    again = model_from_checkpoint(str(tmp_path / "m.ddlf"))
    ckpt_ok = all(a.data.tobytes() == b.data.tobytes()
                  for a, b in zip(model.parameters(), again.parameters()))

    report = smoke_pipeline(str(tmp_path / "smoke"))
    smoke_ok = report["total_seconds"] < 120
    assert criterion("8 I/O round trips + smoke", raw_ok and sample_ok and ckpt_ok and smoke_ok,
                     f"netpbm {raw_ok}, sample {sample_ok}, checkpoint {ckpt_ok}, smoke "
                     f"{report['total_seconds']:.1f}s")
