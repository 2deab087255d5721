import csv
import itertools
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from _fixtures import converging_population
from driforge.dri import (
    SQRT2,
    DriResult,
    PairPoint,
    SurveyInstrument,
    SurveyResponse,
    UndefinedCorrelation,
    average_ranks,
    dri_delta,
    export_scatter,
    group_dri,
    individual_dri,
    load_responses,
    pair_points,
    score_wave,
    spearman,
)
from driforge.errors import SurveyError


def closed_form(x, y):
    n = len(x)
    d2 = sum((a - b) ** 2 for a, b in zip(x, y))
    return 1 - 6 * d2 / (n * (n * n - 1))


# Four participants, four considerations (distinct ratings) and three strict rankings.
# Every rho below was worked out by hand with the tie-free formula (n=4: /60, n=3: /24).
HAND_C = {"p1": (1, 2, 3, 4), "p2": (1, 2, 4, 3), "p3": (4, 3, 2, 1), "p4": (2, 1, 3, 4)}
HAND_P = {"p1": (1, 2, 3), "p2": (1, 3, 2), "p3": (3, 2, 1), "p4": (1, 2, 3)}
HAND_RHO = {
    ("p1", "p2"): (0.8, 0.5),
    ("p1", "p3"): (-1.0, -1.0),
    ("p1", "p4"): (0.8, 1.0),
    ("p2", "p3"): (-0.8, -0.5),
    ("p2", "p4"): (0.6, 0.5),
    ("p3", "p4"): (-0.8, -1.0),
}
HAND_INDIVIDUAL = {"p1": 11 / 12, "p2": 53 / 60, "p3": 11 / 12, "p4": 11 / 12}
HAND_GROUP = 109 / 120
HAND_RAW = (1.1 / 6) / math.sqrt(2)

INSTRUMENT = SurveyInstrument(("c1", "c2", "c3", "c4"), ("q1", "q2", "q3"))


def _resp(pid, ratings, ranks, wave="pre", inst=INSTRUMENT):
    return SurveyResponse(pid, wave, dict(zip(inst.considerations, ratings)), dict(zip(inst.preferences, ranks)))


def hand_population(pids=("p1", "p2", "p3", "p4")):
    return [_resp(p, HAND_C[p], HAND_P[p]) for p in pids]


class TestSpearman:
    def test_identity_and_reverse(self):
        assert spearman([3, 1, 2, 5], [3, 1, 2, 5]) == 1.0
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_hand_value(self):
        assert spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == pytest.approx(0.8, abs=1e-12)

    def test_all_permutations_up_to_five(self):
        for n in range(2, 6):
            perms = list(itertools.permutations(range(1, n + 1)))
            for x in perms:
                for y in perms:
                    assert abs(spearman(x, y) - closed_form(x, y)) <= 1e-12

    def test_ties_against_scipy(self):
        rng = np.random.default_rng(11)
        done = 0
        while done < 1000:
            n = int(rng.integers(3, 12))
            x = rng.integers(-4, 5, n)
            y = rng.integers(-4, 5, n)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)
            done += 1

    def test_average_ranks(self):
        assert average_ranks([10, 20, 20, 30]).tolist() == [1.0, 2.5, 2.5, 4.0]

    def test_constant_undefined(self):
        with pytest.raises(UndefinedCorrelation):
            spearman([2, 2, 2], [1, 2, 3])

    def test_length_errors(self):
        with pytest.raises(ValueError):
            spearman([1], [1])
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])

    @given(st.lists(st.integers(-4, 4), min_size=2, max_size=12).flatmap(
        lambda x: st.tuples(st.just(x), st.lists(st.integers(-4, 4), min_size=len(x), max_size=len(x)))))
    def test_bounds_and_symmetry(self, xy):
        x, y = xy
        try:
            r = spearman(x, y)
        except UndefinedCorrelation:
            assert len(set(x)) == 1 or len(set(y)) == 1
            return
        assert -1.0 <= r <= 1.0
        assert r == spearman(y, x)


class TestPairPoints:
    def test_identical_pair(self):
        pts, _ = pair_points([_resp("a", (1, 2, 3, 4), (1, 2, 3)), _resp("b", (1, 2, 3, 4), (1, 2, 3))], INSTRUMENT)
        assert (pts[0].rho_c, pts[0].rho_p, pts[0].distance) == (1.0, 1.0, 0.0)

    def test_perpendicular_distance(self):
        assert PairPoint("a", "b", 1.0, -1.0).distance == pytest.approx(SQRT2, abs=1e-12)

    def test_three_hand_responses(self):
        pts, flagged = pair_points(hand_population(("p1", "p2", "p3")), INSTRUMENT)
        assert not flagged and len(pts) == 3
        for p in pts:
            rc, rp = HAND_RHO[(p.a, p.b)]
            assert p.rho_c == pytest.approx(rc, abs=1e-12) and p.rho_p == pytest.approx(rp, abs=1e-12)
            assert p.distance == pytest.approx(abs(rc - rp) / math.sqrt(2), abs=1e-12)

    def test_canonical_order(self):
        pts, _ = pair_points(list(reversed(hand_population())), INSTRUMENT)
        assert all(p.a < p.b for p in pts)
        assert {(p.a, p.b) for p in pts} == set(HAND_RHO)

    def test_constant_ratings_flagged(self):
        pop = hand_population(("p1", "p2")) + [_resp("flat", (2, 2, 2, 2), (1, 2, 3))]
        pts, flagged = pair_points(pop, INSTRUMENT)
        assert len(pts) == 1
        assert {(f.a, f.b) for f in flagged} == {("flat", "p1"), ("flat", "p2")}
        assert all("constant" in f.reason for f in flagged)

    def test_misaligned_items_name_participant(self):
        bad = SurveyResponse("odd", "pre", {"c1": 1, "c2": 2, "c3": 3, "zz": 4}, {"q1": 1, "q2": 2, "q3": 3})
        with pytest.raises(SurveyError) as info:
            pair_points(hand_population(("p1",)) + [bad], INSTRUMENT)
        assert info.value.offending_ids == ["odd"]

    def test_incomplete_strict_vs_permissive(self):
        inst = SurveyInstrument(tuple(f"c{i}" for i in range(1, 7)), ("q1", "q2", "q3"))
        full = _resp("a", (-2, -1, 0, 1, 2, 3), (1, 2, 3), inst=inst)
        partial = SurveyResponse("b", "pre", {f"c{i}": i - 2 for i in range(1, 6)}, {"q1": 1, "q2": 2, "q3": 3})
        with pytest.raises(SurveyError, match="incomplete"):
            pair_points([full, partial], inst)
        pts, _ = pair_points([full, partial], inst, permissive=True)
        assert pts[0].rho_c == 1.0
        tiny = SurveyResponse("c", "pre", {"c1": 1, "c2": 2, "c3": 3}, {"q1": 1, "q2": 2, "q3": 3})
        pts, flagged = pair_points([full, tiny], inst, permissive=True)
        assert not pts and flagged[0].reason == "too few shared items"

    def test_tied_ranks_rejected_in_strict_mode(self):
        with pytest.raises(SurveyError, match="tied"):
            pair_points([_resp("a", (1, 2, 3, 4), (1, 1, 3)), _resp("b", (1, 2, 3, 4), (1, 2, 3))], INSTRUMENT)

    def test_out_of_scale(self):
        with pytest.raises(SurveyError, match="outside scale"):
            pair_points([_resp("a", (1, 2, 3, 9), (1, 2, 3)), _resp("b", (1, 2, 3, 4), (1, 2, 3))], INSTRUMENT)


class TestIndividualAndGroup:
    def test_zero_distance(self):
        assert individual_dri([PairPoint("a", "b", 0.5, 0.5)], "a") == 1.0

    def test_max_distance(self):
        assert individual_dri([PairPoint("a", "b", 1.0, -1.0)], "a") == 0.0

    def test_half(self):
        pts = [PairPoint("a", "b", 0.3, 0.3), PairPoint("a", "c", 1.0, -1.0)]
        assert individual_dri(pts, "a") == 0.5

    def test_absent(self):
        with pytest.raises(SurveyError):
            individual_dri([PairPoint("a", "b", 1, 1)], "z")

    def test_identical_population(self):
        pop = [_resp(f"u{i}", (1, -2, 3, 0), (2, 1, 3)) for i in range(6)]
        res = score_wave(pop, INSTRUMENT)
        assert res.group == 1.0 and res.raw_mean_distance == 0.0

    def test_two_person_extreme(self):
        res = group_dri([PairPoint("a", "b", 1.0, -1.0)])
        assert res.group == 0.0
        assert res.pair_points[0].distance == pytest.approx(SQRT2, abs=1e-12)

    def test_hand_fixture(self):
        res = score_wave(hand_population(), INSTRUMENT)
        assert len(res.pair_points) == 6
        for pid, v in HAND_INDIVIDUAL.items():
            assert res.individual[pid] == pytest.approx(v, abs=1e-9)
        assert res.group == pytest.approx(HAND_GROUP, abs=1e-9)
        assert res.raw_mean_distance == pytest.approx(HAND_RAW, abs=1e-9)

    def test_group_is_mean_of_individuals(self):
        res = score_wave(hand_population(), INSTRUMENT)
        assert abs(res.group - sum(res.individual.values()) / 4) <= 1e-12

    def test_no_pairs(self):
        with pytest.raises(SurveyError):
            group_dri([])

    def test_round_trip(self, tmp_path):
        res = score_wave(hand_population(), INSTRUMENT)
        res.save(tmp_path / "r.json")
        back = DriResult.load(tmp_path / "r.json")
        assert back.group == res.group and back.pair_points == res.pair_points


def random_population(rng: random.Random, n: int, inst: SurveyInstrument):
    out = []
    for k in range(n):
        ranks = list(range(1, len(inst.preferences) + 1))
        rng.shuffle(ranks)
        ratings = [rng.randint(-4, 4) for _ in inst.considerations]
        out.append(_resp(f"u{k:02d}", ratings, ranks, inst=inst))
    return out


def monotone_transform(rng: random.Random):
    """A random strictly increasing map from integers to integers."""
    a = rng.randint(1, 9)
    b = rng.randint(-50, 50)
    return rng.choice([
        lambda v: a * v + b,
        lambda v: v ** 3 + b,
        lambda v: a * v * abs(v) + v,
        lambda v: 2 ** (v + 4) - b,
    ])


class TestProperties:
    INST6 = SurveyInstrument(tuple(f"c{i}" for i in range(6)), tuple(f"q{i}" for i in range(4)))
    # wide scale so transformed ratings still validate
    WIDE = SurveyInstrument(INST6.considerations, INST6.preferences, scale=(-10**6, 10**6))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_transform_invariance(self, seed):
        rng = random.Random(seed)
        pop = random_population(rng, rng.randint(2, 7), self.INST6)
        warped = []
        for r in pop:
            f = monotone_transform(rng)
            ratings = {k: f(v) for k, v in r.consideration_ratings.items()}
            warped.append(SurveyResponse(r.participant_id, r.wave, ratings, r.preference_rankings))
        assert pair_points(pop, self.WIDE) == pair_points(warped, self.WIDE)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_bounds(self, seed):
        rng = random.Random(seed)
        pop = random_population(rng, rng.randint(3, 8), self.INST6)
        pts, _ = pair_points(pop, self.INST6)
        if len({p.a for p in pts} | {p.b for p in pts}) < 2:
            return
        res = group_dri(pts)
        assert all(-1 <= p.rho_c <= 1 and -1 <= p.rho_p <= 1 and 0 <= p.distance <= SQRT2 + 1e-15 for p in pts)
        assert all(0.0 <= v <= 1.0 for v in res.individual.values()) and 0.0 <= res.group <= 1.0
        # raw distance does not depend on the normalisation: recompute from rho values alone
        assert res.raw_mean_distance == pytest.approx(np.mean([abs(p.rho_c - p.rho_p) for p in pts]) / math.sqrt(2), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_pair_symmetry(self, seed):
        rng = random.Random(seed)
        a, b = random_population(rng, 2, self.INST6)
        for p in pair_points([a, b], self.INST6)[0]:
            xs = [b.consideration_ratings[c] for c in self.INST6.considerations]
            ys = [a.consideration_ratings[c] for c in self.INST6.considerations]
            assert spearman(xs, ys) == p.rho_c

    def test_same_data_both_parts(self):
        inst = SurveyInstrument(("c1", "c2", "c3", "c4"), ("q1", "q2", "q3", "q4"))
        rng = random.Random(5)
        pop = []
        for k in range(8):
            perm = list(range(1, 5))
            rng.shuffle(perm)
            pop.append(_resp(f"u{k}", perm, perm, inst=inst))
        res = score_wave(pop, inst)
        assert all(p.distance == 0.0 for p in res.pair_points) and res.group == 1.0


class TestDelta:
    def test_identity(self):
        res = score_wave(hand_population(), INSTRUMENT)
        d = dri_delta(res, res)
        assert d.group_delta == 0.0 and set(d.individual_delta.values()) == {0.0}

    def test_subtraction(self):
        pre = DriResult("pre", [], {"a": 0.6, "b": 0.6}, 0.6, 0.5)
        post = DriResult("post", [], {"a": 0.8, "b": 0.8, "c": 1.0}, 0.8, 0.2)
        d = dri_delta(pre, post)
        assert d.group_delta == pytest.approx(0.2) and d.post_only == 1 and d.pre_only == 0

    def test_disjoint(self):
        with pytest.raises(SurveyError):
            dri_delta(DriResult("pre", [], {"a": 1, "b": 1}, 1, 0), DriResult("post", [], {"c": 1, "d": 1}, 1, 0))

    def test_converging_population_positive(self):
        cons = tuple(f"C{i:02d}" for i in range(1, 7))
        prefs = tuple(f"P{i:02d}" for i in range(1, 5))
        inst = SurveyInstrument(cons, prefs)
        for seed in range(10):
            pop = converging_population(cons, prefs, 8, seed)
            pre = score_wave(pop, inst, "pre")
            post = score_wave(pop, inst, "post")
            assert dri_delta(pre, post).group_delta > 0


class TestScatter:
    def test_three_rows_and_meta(self, tmp_path):
        res = score_wave(hand_population(("p1", "p2", "p3")), INSTRUMENT)
        export_scatter(res, tmp_path / "s.csv")
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(rows) == 3 and list(rows[0]) == ["a", "b", "rho_c", "rho_p", "distance"]
        meta = json.loads((tmp_path / "s.meta.json").read_text())
        assert meta["reference_line"] == {"slope": 1.0, "intercept": 0.0}
        assert len(meta["signed_distance"]) == 3

    def test_binomial_count(self, tmp_path):
        inst = TestProperties.INST6
        res = score_wave(random_population(random.Random(1), 10, inst), inst)
        export_scatter(res, tmp_path / "s.csv")
        assert len((tmp_path / "s.csv").read_text().splitlines()) - 1 == 45 - len(res.flagged)

    def test_empty(self, tmp_path, caplog):
        export_scatter(DriResult("pre", [], {}, 1.0, 0.0), tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text() == "a,b,rho_c,rho_p,distance\n"
        assert "header only" in caplog.text


class TestResponsesIO:
    def test_long_csv(self, tmp_path):
        f = tmp_path / "r.csv"
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["participant_id", "wave", "item_id", "value"])
            for r in hand_population():
                for k, v in {**r.consideration_ratings, **r.preference_rankings}.items():
                    w.writerow([r.participant_id, "pre", k, v])
        loaded = load_responses(f, INSTRUMENT)
        assert score_wave(loaded, INSTRUMENT).group == pytest.approx(HAND_GROUP, abs=1e-12)

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(SurveyError) as info:
            load_responses(tmp_path / "nope.csv", INSTRUMENT)
        assert info.value.offending_ids == [str(tmp_path / "nope.csv")]

    def test_instrument_validation(self):
        with pytest.raises(SurveyError):
            SurveyInstrument(("c1",), ("q1", "q2"))
        with pytest.raises(SurveyError):
            SurveyInstrument(("c1", "c2"), ("q1", "q2"), scale=(3, 3))
