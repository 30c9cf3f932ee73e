import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hintsteer.metrics import (percentiles, q_error, regret, regret_sample, selection_frequency,
                               write_percentile_csv, write_regret_csv, write_selection_csv)

positive = st.floats(1e-6, 1e6, allow_nan=False)


class TestRegret:
    def test_optimal_choice(self):
        assert regret(1.0, [1.0, 2.0, 5.0]) == (0.0, 0.0)

    def test_hand_example(self):
        assert regret(3.0, [1.0, 2.0, 5.0]) == (2.0, 4.0)

    def test_empty_arms(self):
        with pytest.raises(ValueError):
            regret(1.0, [])

    @given(st.lists(positive, min_size=1, max_size=20), st.floats(0, 1e6), st.floats(1e-3, 10))
    def test_strictly_worse_arm_changes_nothing(self, arms, pick, extra):
        chosen = arms[int(pick) % len(arms)]
        assert regret(chosen, arms) == regret(chosen, arms + [max(arms) + extra])

    @given(st.lists(positive, min_size=1, max_size=20), st.integers(0, 100))
    def test_non_negative_when_choosing_an_arm(self, arms, i):
        lin, sq = regret(arms[i % len(arms)], arms)
        assert lin >= 0 and sq == lin * lin

    def test_sample_fields(self):
        s = regret_sample(7, 3.0, [2.0, 3.0])
        assert (s.query_id, s.optimal_performance, s.linear_regret, s.squared_regret) == (7, 2.0, 1.0, 1.0)


class TestQError:
    def test_half(self):
        assert q_error(1.5, 1.0) == pytest.approx(0.5)

    def test_equal_is_zero(self):
        assert q_error(3.7, 3.7) == 0.0

    @given(positive, positive)
    def test_symmetric(self, x, y):
        assert q_error(x, y) == q_error(y, x)

    @given(positive, positive, st.floats(1e-3, 1e3))
    def test_scale_invariant(self, x, y, c):
        assert q_error(c * x, c * y) == pytest.approx(q_error(x, y), rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("x,y", [(0.0, 1.0), (1.0, -2.0)])
    def test_rejects_nonpositive(self, x, y):
        with pytest.raises(ValueError):
            q_error(x, y)


class TestPercentiles:
    def test_single_value(self):
        np.testing.assert_array_equal(percentiles([4.2], [0.0, 0.5, 0.99, 1.0]), [4.2] * 4)

    def test_one_to_hundred(self):
        assert percentiles(range(1, 101), [0.99])[0] == 99

    def test_median_of_three(self):
        assert percentiles([3, 1, 2], [0.5])[0] == 2

    def test_tail_quantiles_of_1_to_1000(self):
        data = np.arange(1, 1001)
        np.testing.assert_array_equal(percentiles(data, [0.5, 0.95, 0.99, 0.995]), [500, 950, 990, 995])

    def test_empty(self):
        with pytest.raises(ValueError):
            percentiles([], [0.5])

    def test_out_of_range_quantile(self):
        with pytest.raises(ValueError):
            percentiles([1.0], [1.5])

    @given(st.lists(positive, min_size=1, max_size=50), st.lists(st.floats(0, 1), min_size=2, max_size=10))
    def test_monotone_in_p(self, data, ps):
        ps = sorted(ps)
        vals = percentiles(data, ps)
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert set(vals) <= set(data)


class TestSelectionFrequency:
    def test_always_chosen(self):
        np.testing.assert_array_equal(selection_frequency([2] * 250, 2), np.ones(250))

    def test_once_in_first_hundred(self):
        ids = [0] * 100
        ids[10] = 1
        assert selection_frequency(ids, 1)[99] == pytest.approx(1 / 100)

    def test_window_slides_past_old_choices(self):
        ids = [1] + [0] * 150
        f = selection_frequency(ids, 1)
        assert f[99] > 0 and f[100] == 0

    def test_partition(self, rng):
        ids = rng.integers(0, 5, size=400)
        total = sum(selection_frequency(ids, a) for a in range(5))
        np.testing.assert_allclose(total, 1.0)

    def test_accepts_object_with_arm_ids(self):
        class Log:
            def arm_ids(self):
                return np.array([0, 1, 1])
        np.testing.assert_allclose(selection_frequency(Log(), 1, window=2), [0, 0.5, 1.0])

    def test_matches_naive_window(self, rng):
        ids = rng.integers(0, 3, size=300)
        f = selection_frequency(ids, 2, window=37)
        for t in range(300):
            win = ids[max(0, t - 36):t + 1]
            assert f[t] == pytest.approx(np.mean(win == 2))


class TestCsv:
    def test_regret_csv(self, tmp_path):
        p = tmp_path / "regret.csv"
        write_regret_csv(p, [regret_sample(0, 3.0, [1.0, 3.0]), regret_sample(1, 1.0, [1.0])])
        rows = list(csv.DictReader(open(p)))
        assert len(rows) == 2
        assert float(rows[0]["linear_regret"]) == 2.0 and float(rows[0]["squared_regret"]) == 4.0

    def test_percentile_csv(self, tmp_path):
        p = tmp_path / "pct.csv"
        write_percentile_csv(p, list(range(1, 101)))
        rows = list(csv.DictReader(open(p)))
        assert [float(r["latency"]) for r in rows] == [50, 95, 99, 100]

    def test_selection_csv(self, tmp_path):
        p = tmp_path / "sel.csv"
        write_selection_csv(p, [0, 1, 1, 2], num_arms=3, window=2)
        rows = list(csv.reader(open(p)))
        assert rows[0] == ["step", "arm_0", "arm_1", "arm_2"]
        assert len(rows) == 5
        for r in rows[1:]:
            assert sum(float(x) for x in r[1:]) == pytest.approx(1.0)
