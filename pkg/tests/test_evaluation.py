import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multitask_ad.config import parse_config
from multitask_ad.evaluation import (ABLATION_ROWS, EvalReport, RunEvaluation, UndefinedMetricError, ablation_table,
                                     auroc, format_table, parse_ablation_rows, row_config)
from multitask_ad.moe import ALL_TASKS

from oracles import pairwise_auroc


def test_worked_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert pairwise_auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_separated_and_tied():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1], [0, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 6, n) / 5.0  # coarse values force ties
    assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invariant_under_monotone_map(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 20)]
    scores = rng.normal(size=22)
    a, b = rng.uniform(0.1, 5), rng.normal()
    assert auroc(np.exp(a * scores + b), labels) == pytest.approx(auroc(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_flip_complement(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 15)]
    scores = rng.permutation(17).astype(float)  # tie-free
    assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)


# -- reports and ablation -----------------------------------------------------------------


def _run(seed, fused, per_task):
    ev = RunEvaluation(seed, np.zeros(1), None, np.zeros((1, 5)), [0], fused)
    ev.task_auroc = {t.label: per_task for t in ALL_TASKS}
    return ev


def test_report_mean_std_population(tmp_path):
    rep = EvalReport.from_runs("abc", [_run(0, 0.8, 0.5), _run(1, 0.9, 0.6), _run(2, 1.0, 0.7)])
    assert rep.mean == pytest.approx(0.9)
    assert rep.std == pytest.approx(np.std([0.8, 0.9, 1.0]))
    assert "90.00 ± 8.16" in rep.summary()
    rows = rep.rows()
    assert [r[0] for r in rows[1:]] == ["fused"] + [f"task_{t.label}" for t in ALL_TASKS]
    rep.write(tmp_path)
    assert {"report.csv", "report.txt", "report.json"} <= {p.name for p in tmp_path.iterdir()}


def test_report_without_labels():
    rep = EvalReport.from_runs("abc", [_run(0, None, None)])
    assert rep.mean is None and "unavailable" in rep.summary()


def test_standard_rows_parse():
    assert parse_ablation_rows(["10000", [0, 1, 0, 0, 0], ["mim", "jigsaw", "demixup"]]) == [
        (1, 0, 0, 0, 0), (0, 1, 0, 0, 0), (1, 1, 1, 0, 0)]
    assert len(ABLATION_ROWS) == 9 and ABLATION_ROWS[-1] == (1, 1, 1, 1, 1)
    assert len(set(ABLATION_ROWS)) == 9


def test_all_false_row_rejected():
    with pytest.raises(ValueError):
        parse_ablation_rows(["00000"])
    with pytest.raises(ValueError):
        parse_ablation_rows([[1, 0]])


def test_row_config_and_full_row_matches_defaults():
    base = parse_config({})
    assert row_config(base, (1, 1, 1, 1, 1)).fingerprint() == base.fingerprint()
    single = row_config(base, (0, 0, 1, 0, 0))
    assert single.tasks.enabled == ["demixup"] and single.fingerprint() != base.fingerprint()


def test_ablation_table_shape():
    table = ablation_table([(1, 0, 0, 0, 0), (1, 1, 1, 1, 1)], [0.7, None])
    assert table[0][-1] == "auroc" and table[1][:2] == ["x", "-"] and table[2][-1] == ""
    text = format_table(table)
    assert len(text.splitlines()) == 4
