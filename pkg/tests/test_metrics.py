import numpy as np
import pytest

from vlmdrive.errors import UsageError
from vlmdrive.metrics import ConfusionCounts, accumulate, f1_report, format_report, write_report


def test_exact_and_all_missed():
    c = ConfusionCounts.zeros(4)
    accumulate([1, 0, 1, 0], [1, 0, 1, 0], c)
    assert c.tp.tolist() == [1, 0, 1, 0] and c.tn.tolist() == [0, 1, 0, 1]
    assert c.fp.sum() == 0 and c.fn.sum() == 0
    c = ConfusionCounts.zeros(3)
    accumulate([0, 0, 0], [1, 1, 1], c)
    assert c.fn.tolist() == [1, 1, 1] and c.tp.sum() + c.fp.sum() + c.tn.sum() == 0


def test_length_mismatch():
    with pytest.raises(UsageError):
        ConfusionCounts.zeros(4).accumulate([1, 0], [1, 0, 0, 0])


def test_hand_fixture():
    c = ConfusionCounts(np.array([2, 0]), np.array([1, 0]), np.array([1, 0]), np.array([0, 4]))
    rep = f1_report(c)
    assert abs(rep["per_class_f1"][0] - 2 / 3) < 1e-12
    assert rep["per_class_f1"][1] == 0.0
    assert abs(rep["mf1"] - 1 / 3) < 1e-12
    assert abs(rep["f1_all"] - 2 / 3) < 1e-12


def test_perfect():
    c = ConfusionCounts.zeros(4)
    for y in ([1, 0, 0, 1], [0, 1, 1, 0], [1, 1, 1, 1]):
        c.accumulate(y, y)
    assert f1_report(c) == {"per_class_f1": [1.0] * 4, "f1_all": 1.0, "mf1": 1.0}


def _recount(dec, lab):
    per, tp_all, fp_all, fn_all = [], 0, 0, 0
    for c in range(dec.shape[1]):
        tp = sum(1 for d, y in zip(dec[:, c], lab[:, c]) if d and y)
        fp = sum(1 for d, y in zip(dec[:, c], lab[:, c]) if d and not y)
        fn = sum(1 for d, y in zip(dec[:, c], lab[:, c]) if not d and y)
        per.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    return per, 2 * tp_all / (2 * tp_all + fp_all + fn_all), sum(per) / len(per)


def test_recount_oracle_and_order_invariance(rng):
    dec = (rng.random((200, 5)) < 0.4).astype(int)
    lab = (rng.random((200, 5)) < 0.3).astype(int)
    c = ConfusionCounts.zeros(5)
    for d, y in zip(dec, lab):
        c.accumulate(d, y)
    assert (c.tp + c.fp + c.fn + c.tn).tolist() == [200] * 5
    rep = f1_report(c)
    per, micro, macro = _recount(dec, lab)
    assert np.max(np.abs(np.array(rep["per_class_f1"]) - per)) < 1e-12
    assert abs(rep["f1_all"] - micro) < 1e-12 and abs(rep["mf1"] - macro) < 1e-12
    perm = rng.permutation(200)
    c2 = ConfusionCounts.zeros(5)
    for d, y in zip(dec[perm], lab[perm]):
        c2.accumulate(d, y)
    assert f1_report(c2) == rep
    halves = [ConfusionCounts.zeros(5), ConfusionCounts.zeros(5)]
    for i, (d, y) in enumerate(zip(dec, lab)):
        halves[i % 2].accumulate(d, y)
    assert f1_report(halves[0].merge(halves[1])) == rep


def test_micro_equals_macro_for_identical_classes():
    c = ConfusionCounts(np.array([3, 3, 3]), np.array([1, 1, 1]), np.array([2, 2, 2]), np.array([5, 5, 5]))
    rep = f1_report(c)
    assert abs(rep["f1_all"] - rep["mf1"]) < 1e-15


def test_report_outputs(tmp_path):
    rep = {"per_class_f1": [0.5, 1.0], "f1_all": 0.75, "mf1": 0.75}
    text = format_report(rep, ["F", "S"], title="demo")
    lines = text.splitlines()
    assert lines[0] == "demo" and len(lines[1]) == len(lines[2])
    write_report(tmp_path / "r.json", rep, ["F", "S"])
    import json
    assert json.loads((tmp_path / "r.json").read_text())["class_names"] == ["F", "S"]
