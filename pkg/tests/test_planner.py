import math

import numpy as np
import pytest

from direct_pretrain.cli import sample_records_path
from direct_pretrain.errors import PlannerError
from direct_pretrain.planner import (
    MeasurementRecord,
    PlannerQuery,
    feasible_configs,
    fit_memory_model,
    grid_search_plan,
    parse_memory,
    rank_configs,
    read_records,
)

GRID = ([2, 4, 8, 16], [224, 320, 448, 640])


def linear_records(c0=1e9, c1=5.0):
    return [MeasurementRecord(b, r, c0 + c1 * b * r * r) for b in GRID[0] for r in GRID[1]]


def test_fit_recovers_linear_model():
    m = fit_memory_model(linear_records())
    assert m.c0 == pytest.approx(1e9, rel=1e-6)
    assert m.c1 == pytest.approx(5.0, rel=1e-6)


def test_fit_two_points_interpolates_and_one_point_fails():
    recs = [MeasurementRecord(2, 224, 3e9), MeasurementRecord(4, 448, 7e9)]
    m = fit_memory_model(recs)
    assert m.predict(2, 224) == pytest.approx(3e9) and m.predict(4, 448) == pytest.approx(7e9)
    with pytest.raises(PlannerError):
        fit_memory_model(recs[:1])
    with pytest.raises(PlannerError):
        fit_memory_model([MeasurementRecord(2, 448, 1e9), MeasurementRecord(8, 224, 2e9)])


def test_fit_clamps_negative_slope():
    m = fit_memory_model([MeasurementRecord(2, 224, 5e9), MeasurementRecord(4, 448, 3e9)])
    assert m.c1 == 0.0


def test_feasible_edges():
    m = fit_memory_model(linear_records())
    assert feasible_configs(PlannerQuery(0.5e9), m) == []
    assert len(feasible_configs(PlannerQuery(math.inf), m)) == 16


def test_feasible_matches_brute_force(rng):
    m = fit_memory_model(linear_records())
    for budget in rng.uniform(1e9, 1e9 + 5 * 16 * 640 ** 2 * 1.1, 100):
        got = feasible_configs(PlannerQuery(budget), m)
        want = [(b, r) for b in GRID[0] for r in GRID[1] if 1e9 + 5 * b * r * r <= budget]
        assert sorted(got) == sorted(want)
        preds = [m.predict(*x) for x in got]
        assert preds == sorted(preds)


def sample_records():
    return read_records(sample_records_path())


def test_measured_ranking():
    recs = sample_records()
    ranked = rank_configs([(b, r) for b in GRID[0] for r in GRID[1]], recs)
    order = [(x.batch, x.resolution) for x in ranked]
    assert order.index((8, 448)) < order.index((4, 448)) < order.index((2, 448))
    assert order.index((4, 640)) < order.index((4, 448))
    assert ranked[0].measured and not ranked[-1].measured


def test_ranking_without_records_is_heuristic():
    ranked = rank_configs([(2, 224), (16, 640), (8, 448)], [])
    assert [(x.batch, x.resolution) for x in ranked] == [(16, 640), (8, 448), (2, 224)]


def test_ranking_is_permutation_invariant(rng):
    recs = sample_records()
    feas = [(b, r) for b in GRID[0] for r in GRID[1]]
    a = rank_configs(feas, recs)
    for _ in range(5):
        perm = rng.permutation(len(recs))
        b = rank_configs(list(reversed(feas)), [recs[i] for i in perm])
        assert [x.as_dict() for x in a] == [x.as_dict() for x in b]


def test_plan_with_11g_budget_chooses_8_448():
    res = grid_search_plan(PlannerQuery(parse_memory("11G"), records=sample_records()))
    assert res.feasible and res.chosen == (8, 448)
    assert "448" in res.table()


def test_infeasible_plan():
    res = grid_search_plan(PlannerQuery(1.0, records=sample_records()))
    assert not res.feasible and res.chosen is None


def test_parse_memory_units():
    assert parse_memory("11G") == 11 * 2 ** 30
    assert parse_memory("512MiB") == 512 * 2 ** 20
    assert parse_memory("1024") == 1024
    with pytest.raises(PlannerError):
        parse_memory("-1G")


def test_query_validation():
    with pytest.raises(PlannerError):
        PlannerQuery(1e9, candidate_batches=[])
    with pytest.raises(PlannerError):
        PlannerQuery(0)


def test_monotone_predictions():
    m = fit_memory_model(linear_records())
    for r in GRID[1]:
        assert np.all(np.diff([m.predict(b, r) for b in GRID[0]]) > 0)
