import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import metric_oracles as oracle
from rltta import metrics as m
from rltta.metrics import LabeledScore


def random_set(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = np.clip(rng.normal(0.5 + 0.2 * labels, 0.25), 0, 1)
    if seed % 3 == 0:
        scores = np.round(scores, 1)  # plenty of ties
    return scores.tolist(), labels.tolist()


def test_auc_examples():
    items = [LabeledScore(0.9, 1), LabeledScore(0.8, 1), LabeledScore(0.1, 0), LabeledScore(0.2, 0)]
    assert m.auc(items) == 1.0
    assert m.auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    assert m.auc([0.3] * 6, [0, 1] * 3) == 0.5


def test_single_class_rejected():
    for fn in (m.auc, m.pauc_at_fpr, m.eer):
        with pytest.raises(ValueError):
            fn([0.1, 0.2], [1, 1])


def test_pauc_examples():
    assert m.pauc_at_fpr([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    s, y = random_set(5)
    assert m.pauc_at_fpr(s, y, 1.0) == pytest.approx(m.auc(s, y), abs=1e-9)
    with pytest.raises(ValueError):
        m.pauc_at_fpr(s, y, 0.0)


def test_eer_examples():
    assert m.eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0
    assert m.eer([0.4] * 4, [0, 1, 0, 1])[0] == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_brute_force(seed):
    s, y = random_set(seed)
    assert abs(m.auc(s, y) - oracle.auc_pairs(s, y)) <= 1e-9
    assert abs(m.pauc_at_fpr(s, y) - oracle.pauc_sweep(s, y, 0.1)) <= 1e-6
    assert m.eer(s, y) == oracle.eer_sweep(s, y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    s, y = random_set(seed, n=40)
    s = np.asarray(s)
    assert m.auc(np.exp(3 * s) - 7, y) == pytest.approx(m.auc(s, y), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_label_swap_and_ranges(seed):
    s, y = random_set(seed, n=30)
    a = m.auc(s, y)
    assert m.auc(s, 1 - np.asarray(y)) == pytest.approx(1 - a, abs=1e-12)
    assert m.pauc_at_fpr(s, y) <= 1.0
    if a >= 0.5:
        assert 0.0 <= m.eer(s, y)[0] <= 0.5


def test_report_serialisation():
    s, y = random_set(2)
    rep = m.evaluate(s, y)
    assert rep.n_real + rep.n_fake == len(s)
    assert '"auc"' in rep.to_json()
    assert len(rep.csv_row()) == len(m.MetricReport.CSV_FIELDS)
