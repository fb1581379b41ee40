import numpy as np
import pytest
from hypothesis import given, strategies as st

from approxfl.metrics import (LITERAL, RECALL, confusion, evaluate, fairness_variance, group_accuracy,
                              per_class_accuracy)


def test_confusion_hand_example():
    # [TRIVIAL] labels 0,0,1,2 predicted 0,1,1,1
    c = confusion([0, 1, 1, 1], [0, 0, 1, 2], 3)
    assert c.tp.tolist() == [1, 1, 0]
    assert c.fn.tolist() == [1, 0, 1]
    assert c.fp.tolist() == [0, 2, 0]
    assert c.tn.tolist() == [2, 1, 3]
    assert c.total == 4


def test_per_class_modes():
    c = confusion([0, 1, 1, 1], [0, 0, 1, 2], 3)
    assert per_class_accuracy(c, RECALL).tolist() == [0.5, 1.0, 0.0]
    assert per_class_accuracy(c, LITERAL).tolist() == [0.25, 0.25, 0.0]
    with pytest.raises(ValueError):
        per_class_accuracy(c, "f1")


def test_zero_denominator_is_zero():
    c = confusion([0, 0], [0, 0], 3)
    assert per_class_accuracy(c, RECALL).tolist() == [1.0, 0.0, 0.0]


def test_group_accuracy_and_variance():
    pc = [1.0, 0.5, 0.0, 0.0]
    assert group_accuracy(pc, [1, 1, 0, 0]) == 0.75
    assert group_accuracy(pc, [0, 0, 5, 5]) == 0.0
    assert fairness_variance([0.75, 0.0]) == pytest.approx(0.140625)
    with pytest.raises(ValueError):
        group_accuracy(pc, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        fairness_variance([0.5])


def test_evaluate_report():
    rep = evaluate([0, 1, 1, 1], [0, 0, 1, 2], 3, [[2, 0, 0], [0, 1, 1]], RECALL)
    assert rep.top1 == 0.5
    assert rep.group_accuracy == [0.5, 0.5]
    assert rep.variance == 0.0
    assert rep.to_dict()["mode"] == RECALL
    with pytest.raises(ValueError):
        evaluate([0, 3], [0, 1], 3)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    pred, lab = map(list, zip(*pairs))
    c = confusion(pred, lab, 5)
    assert np.all(c.tp + c.tn + c.fp + c.fn == len(pairs))
    assert c.tp.sum() == sum(p == l for p, l in pairs)
    for mode in (LITERAL, RECALL):
        acc = per_class_accuracy(c, mode)
        assert np.all((0 <= acc) & (acc <= 1))
    # literal per-class accuracies sum to top-1
    assert per_class_accuracy(c, LITERAL).sum() == pytest.approx(c.tp.sum() / len(pairs))
