import json
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debiaskt.data import (
    BIN_NAMES,
    ConfigurationError,
    DataError,
    Dataset,
    FoldSplit,
    Interaction,
    StudentSequence,
    bias_bin,
    bias_partition,
    compute_difficulty,
    kfold_split,
    merge_concept_sets,
    parse_csv,
    preprocess,
    response_probability,
    simulate,
    to_arrays,
    write_csv,
)

HEADER = "student_id,question_id,concept_ids,response,timestamp\n"


def write(tmp_path, body, name="raw.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def make_student(sid, rows):
    """rows: (question, concepts tuple, response)"""
    return StudentSequence(sid, tuple(Interaction(sid, q, cs, r, t) for t, (q, cs, r) in enumerate(rows)))


def raw(*students):
    seqs = tuple(students)
    q = max((it.question_id for s in seqs for it in s.interactions), default=0)
    c = max((x for s in seqs for it in s.interactions for x in it.concept_ids), default=0)
    return Dataset(seqs, q, c)


# --- parsing ---------------------------------------------------------------


def test_parse_row_mapping(tmp_path):
    data = parse_csv(write(tmp_path, "s1,5,2;7,1,100\n"))
    it = data.sequences[0].interactions[0]
    assert (it.student_id, it.question_id, it.concept_ids, it.response, it.timestamp) == ("s1", 5, (2, 7), 1, 100)


def test_parse_bad_response(tmp_path):
    with pytest.raises(DataError, match="line 2"):
        parse_csv(write(tmp_path, "s1,5,2;7,3,100\n"))


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    data = parse_csv(p)
    assert len(data) == 0


def test_parse_malformed_row_reports_line(tmp_path):
    with pytest.raises(DataError, match="line 3"):
        parse_csv(write(tmp_path, "s1,5,2,1,100\ns1,5,1\n"))
    with pytest.raises(DataError, match="line 2"):
        parse_csv(write(tmp_path, "s1,x,2,1,100\n"))


def test_parse_missing_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("student_id,question_id,response\ns1,1,1\n")
    with pytest.raises(DataError):
        parse_csv(p)


def test_timestamp_ties_keep_file_order(tmp_path):
    data = parse_csv(write(tmp_path, "s1,3,1,1,5\ns1,1,1,0,5\ns1,2,1,1,1\n"))
    assert [it.question_id for it in data.sequences[0].interactions] == [2, 3, 1]


def test_csv_round_trip(tmp_path):
    data, _ = simulate(5, 10, 3, seed=1, length=8)
    write_csv(data, tmp_path / "a.csv")
    back = parse_csv(tmp_path / "a.csv")
    assert back.sequences == data.sequences


# --- preprocessing ---------------------------------------------------------


def test_short_students_dropped():
    s4 = make_student("a", [(1, (1,), 1)] * 4)
    s5 = make_student("b", [(1, (1,), 1)] * 5)
    out = preprocess(raw(s4, s5))
    assert out.student_ids == ["b"]


def test_truncation_keeps_last_window():
    rows = [(q % 7 + 1, (1,), q % 2) for q in range(250)]
    out = preprocess(raw(make_student("a", rows)))
    seq = out.sequences[0]
    assert len(seq) == 100
    assert [it.timestamp for it in seq.interactions] == list(range(150, 250))


def test_merge_multiconcept_after_max_single():
    # three-question toy corpus: singles 1, 4; combinations {3,9}, {1,4}
    sets = [(1,), (3, 9), (4,), (1, 4), (9, 3)]
    m = merge_concept_sets(sets)
    assert m[frozenset({3, 9})] == 5
    assert m[frozenset({1, 4})] == 6
    assert m[frozenset({1})] == 1 and m[frozenset({4})] == 4
    # injective, checked exhaustively
    keys = list(m)
    assert all(m[a] != m[b] for i, a in enumerate(keys) for b in keys[i + 1:])


def test_preprocess_merged_concept_reindexed():
    s = make_student("a", [(5, (3, 9), 1), (6, (2,), 0), (7, (7,), 1), (5, (9, 3), 0), (8, (2,), 1)])
    out = preprocess(raw(s))
    cs = [it.concept_id for it in out.sequences[0].interactions]
    # singles 2, 7 -> 1, 2; combination {3,9} -> fresh id after 7 -> 3
    assert cs == [3, 1, 2, 3, 1]
    assert out.num_concepts == 3 and out.num_questions == 4
    assert out.concept_map[frozenset({3, 9})] == 3
    assert [it.question_id for it in out.sequences[0].interactions] == [1, 2, 3, 1, 4]


def test_preprocess_empty_result():
    out = preprocess(raw(make_student("a", [(1, (1,), 1)])))
    assert len(out) == 0


rows_strategy = st.lists(
    st.tuples(st.integers(1, 12), st.frozensets(st.integers(1, 6), min_size=0, max_size=3), st.integers(0, 1)),
    min_size=0, max_size=40,
)


@settings(max_examples=60, deadline=None)
@given(st.lists(rows_strategy, min_size=1, max_size=5), st.integers(1, 30), st.integers(1, 8))
def test_preprocess_idempotent(students, window, min_len):
    if window < min_len:
        with pytest.raises(ConfigurationError):
            preprocess(raw(), window, min_len)
        return
    data = raw(*(make_student(f"s{i}", [(q, tuple(sorted(cs)), r) for q, cs, r in rows])
                 for i, rows in enumerate(students)))
    once = preprocess(data, window, min_len)
    twice = preprocess(once, window, min_len)
    assert twice.sequences == once.sequences
    assert (twice.num_questions, twice.num_concepts) == (once.num_questions, once.num_concepts)
    assert twice.concept_map == once.concept_map
    for s in once.sequences:
        assert min_len <= len(s) <= window
        assert all(1 <= it.question_id <= once.num_questions for it in s.interactions)
        assert all(1 <= it.concept_id <= once.num_concepts for it in s.interactions)
    assert len(set(once.concept_map.values())) == len(once.concept_map)


# --- difficulty ------------------------------------------------------------


def test_difficulty_ratio_and_fallback():
    s = make_student("a", [(1, (1,), 1), (2, (1,), 1), (3, (1,), 0), (4, (1,), 1), (5, (2,), 1), (6, (2,), 1)])
    table = compute_difficulty(raw(s), num_concepts=3)
    assert table[1] == 0.75
    assert table[2] == 1.0
    assert table[3] == 0.5
    assert list(table.support) == [0, 4, 2, 0]


def test_difficulty_matches_counting_oracle():
    data, _ = simulate(40, 30, 6, seed=3, length=15)
    data = preprocess(data)
    table = compute_difficulty(data)
    right, total = Counter(), Counter()
    for s in data.sequences:
        for it in s.interactions:
            total[it.concept_id] += 1
            right[it.concept_id] += it.response
    for c in range(1, data.num_concepts + 1):
        expected = right[c] / total[c] if total[c] else 0.5
        assert table[c] == expected
        assert 0.0 <= table[c] <= 1.0
    assert not np.isnan(table.diff).any()


def test_difficulty_json_round_trip(tmp_path):
    data, _ = simulate(10, 10, 3, seed=0, length=6)
    table = compute_difficulty(preprocess(data))
    table.save(tmp_path / "d.json")
    back = type(table).load(tmp_path / "d.json")
    np.testing.assert_array_equal(back.diff, table.diff)
    np.testing.assert_array_equal(back.support, table.support)


# --- folds -----------------------------------------------------------------


def students(n):
    return raw(*(make_student(f"s{i:02d}", [(1, (1,), 1)] * 5) for i in range(n)))


def test_kfold_even_partition():
    split = kfold_split(students(10), k=5, seed=0)
    counts = Counter(split.fold_assignments.values())
    assert counts == {f: 2 for f in range(5)}


def test_kfold_deterministic():
    a = kfold_split(students(23), seed=4)
    b = kfold_split(students(23), seed=4)
    assert a.fold_assignments == b.fold_assignments and a.validation == b.validation


def test_kfold_too_few_students():
    with pytest.raises(ConfigurationError):
        kfold_split(students(3), k=5)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 60), st.integers(2, 6), st.integers(0, 1000))
def test_kfold_partition_property(n, k, seed):
    if n < k:
        return
    data = students(n)
    split = kfold_split(data, k=k, seed=seed)
    tests = [set(split.test_students(f)) for f in range(k)]
    assert set().union(*tests) == set(data.student_ids)
    assert sum(len(t) for t in tests) == n
    for f in range(k):
        train, val, test = split.split(data, f)
        ids = [set(d.student_ids) for d in (train, val, test)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert ids[0] | ids[1] | ids[2] == set(data.student_ids)
        assert ids[1] <= set(data.student_ids) - tests[f]


def test_fold_manifest_round_trip():
    split = kfold_split(students(12), seed=1)
    back = FoldSplit.from_json(json.loads(json.dumps(split.to_json())))
    assert back.fold_assignments == split.fold_assignments
    assert {k: tuple(v) for k, v in back.validation.items()} == split.validation


# --- bias bins -------------------------------------------------------------


@pytest.mark.parametrize("rate,name", [(0.59, "low"), (0.60, "medium"), (0.80, "high"),
                                       (Fraction(3, 5), "medium"), (Fraction(4, 5), "high"), (0.0, "low"), (1.0, "high")])
def test_bias_bin_thresholds(rate, name):
    assert bias_bin(rate) == name


def test_bias_bins_partition_unit_interval_exhaustively():
    # every rate k/n with n <= 100 lands in exactly one bin and bins are ordered
    order = {n: i for i, n in enumerate(BIN_NAMES)}
    for n in range(1, 101):
        bins = [order[bias_bin(Fraction(k, n))] for k in range(n + 1)]
        assert bins == sorted(bins)


def test_bias_partition_membership():
    data, _ = simulate(60, 30, 5, seed=2, length=20)
    data = preprocess(data)
    part = bias_partition(data)
    assigned = part.assignments()
    assert sorted(assigned) == sorted(data.student_ids)
    for s in data.sequences:
        assert assigned[s.student_id] == bias_bin(s.correct_rate())
    for name in BIN_NAMES:
        assert part[name].num_concepts == data.num_concepts


# --- arrays ----------------------------------------------------------------


def test_to_arrays_right_padded():
    a = make_student("a", [(1, (1,), 1), (2, (2,), 0)])
    b = make_student("b", [(3, (1,), 0)])
    q, c, r, valid = to_arrays([a, b])
    np.testing.assert_array_equal(q, [[1, 2], [3, 0]])
    np.testing.assert_array_equal(r, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(valid, [[True, True], [True, False]])


# --- simulator -------------------------------------------------------------


def test_response_probability_examples():
    assert response_probability(0.3, 0.3, 0.0, 0.0) == 0.5
    assert abs(response_probability(-60.0, 0.0, 0.25, 0.0) - 0.25) < 1e-12


def test_simulate_invalid():
    with pytest.raises(ConfigurationError):
        simulate(5, 5, 2, guess=0.6, slip=0.4)
    with pytest.raises(ConfigurationError):
        simulate(0, 5, 2)


def test_simulate_deterministic(tmp_path):
    a, ta = simulate(20, 15, 4, seed=9, length=10)
    b, tb = simulate(20, 15, 4, seed=9, length=10)
    write_csv(a, tmp_path / "a.csv")
    write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ta.save(tmp_path / "a.json")
    tb.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_simulate_sidecar_consistent():
    data, truth = simulate(8, 10, 3, guess=0.2, slip=0.1, seed=0, length=12)
    side = truth.to_json()
    assert set(side["theta"]) == set(data.student_ids)
    for s in data.sequences:
        flags = side["interactions"][s.student_id]
        assert len(flags) == len(s)
        for it, f in zip(s.interactions, flags):
            assert not (f["guess_flag"] and f["slip_flag"])
            if f["guess_flag"]:
                assert it.response == 1
            if f["slip_flag"]:
                assert it.response == 0


def test_simulate_rate_converges():
    # one cell (a single student-question pair) sampled 10,000 times
    data, truth = simulate(1, 1, 1, guess=0.2, slip=0.1, seed=5, length=10_000)
    s = data.sequences[0]
    p = truth.p_correct(s.student_id, 1)
    rate = s.responses.mean()
    se = np.sqrt(p * (1 - p) / len(s))
    assert abs(rate - p) < 3 * se
