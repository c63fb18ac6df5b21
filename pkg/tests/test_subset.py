import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layercache import subset
from layercache.builder import DISABLED_THRESHOLD
from layercache.subset import CacheRecord, ValRecord

from _fixtures import mlp_fixture


def record(confs, thresholds, costs, ids=None):
    n = len(confs[0])
    ids = ids or [f"s{i}" for i in range(n)]
    caches = {o: CacheRecord(o, f"l{o}", np.zeros(n, int), np.asarray(c, np.float32), t, c1, c2)
              for o, (c, t, (c1, c2)) in enumerate(zip(confs, thresholds, costs), start=1)}
    return ValRecord(ids, caches)


HAND = record([[0.9, 0.4, 0.6, 0.1], [0.99, 0.7, 0.3, 0.65]], [0.5, 0.6],
              [(10, 1000), (20, 500)])


@pytest.mark.parametrize("chosen,expected", [
    ((1,), {1: (["s0", "s2"], ["s1", "s3"])}),
    ((2,), {2: (["s0", "s1", "s3"], ["s2"])}),
    ((1, 2), {1: (["s0", "s2"], ["s1", "s3"]), 2: (["s1", "s3"], [])}),
    ((), {}),
])
def test_replay_hand_trace(chosen, expected):
    assert subset.replay_subset(HAND, chosen) == expected


def test_replay_starvation():
    rec = record([[0.9, 0.9, 0.9], [0.99, 0.99, 0.1]], [0.5, 0.5], [(1, 10), (1, 5)])
    assert subset.replay_subset(rec, (1, 2))[2] == ([], [])


def test_replay_ignores_list_order():
    assert subset.replay_subset(HAND, (2, 1)) == subset.replay_subset(HAND, [1, 2])


def test_disabled_cache_only_adds_overhead():
    rec = record([[0.9, 0.99]], [DISABLED_THRESHOLD], [(10, 100)])
    replay = subset.replay_subset(rec, (1,))
    assert replay == {1: ([], ["s0", "s1"])}
    assert subset.score_subset(replay, rec.costs()) == -20


def test_score_example():
    replay = {1: (list(range(70)), list(range(30)))}
    assert subset.score_subset(replay, {1: (10, 100)}) == 70 * 90 - 30 * 10 == 6000
    assert subset.score_subset({}, {}) == 0


def test_optimize_single_cache():
    good = record([[0.9] * 10], [0.5], [(10, 1000)])
    bad = record([[0.1] * 10], [0.5], [(10, 1000)])
    assert subset.optimize(good).subset == (1,)
    assert subset.optimize(bad).subset == () and subset.optimize(bad).score == 0


def test_optimize_hand_record():
    # {1}: 2*990 - 2*10 = 1960; {2}: 3*480 - 20 = 1420; {1,2}: 1960 + 2*480 = 2920
    choice = subset.optimize(HAND)
    assert choice.subset == (1, 2) and choice.score == 2920
    assert [row["score"] for row in choice.table] == [0, 1960, 1420, 2920]


def test_ties_prefer_fewer_caches():
    # cache 2 never sees anything once cache 1 takes all samples
    rec = record([[0.9, 0.9], [0.9, 0.9]], [0.5, 0.5], [(0, 10), (0, 10)])
    assert subset.optimize(rec).subset == (1,)


def test_too_many_caches():
    rec = record([[0.5]] * 3, [0.5] * 3, [(1, 2)] * 3)
    with pytest.raises(ValueError):
        subset.optimize(rec, max_caches=2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_replay_partitions_reaching_samples(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 30)), int(rng.integers(1, 5))
    rec = record(rng.uniform(0, 1, (k, n)).tolist(), rng.uniform(0, 1, k).tolist(),
                 [(int(rng.integers(1, 50)), int(rng.integers(50, 500))) for _ in range(k)])
    chosen = tuple(o for o in range(1, k + 1) if rng.uniform() < 0.6)
    replay = subset.replay_subset(rec, chosen)
    reaching = set(rec.sample_ids)
    for o in sorted(chosen):
        hits, misses = replay[o]
        assert set(hits) | set(misses) == reaching and not set(hits) & set(misses)
        reaching = set(misses)
    # K decomposes per sample: saved FLOPs for hits, paid overhead for misses
    costs = rec.costs()
    per_sample = 0
    for s in rec.sample_ids:
        paid = 0
        for o in sorted(chosen):
            c1, c2 = costs[o]
            if s in replay[o][0]:
                per_sample += c2 - c1 - paid
                break
            paid += c1
        else:
            per_sample -= paid
    assert subset.score_subset(replay, costs) == per_sample


def test_val_record_round_trip():
    back = ValRecord.from_dict(HAND.to_dict())
    assert back.sample_ids == HAND.sample_ids
    for o in HAND.ordinals:
        assert back.caches[o].threshold == HAND.caches[o].threshold
        assert back.caches[o].confidence.tobytes() == HAND.caches[o].confidence.tobytes()
    assert subset.optimize(back).to_dict() == subset.optimize(HAND).to_dict()


@pytest.fixture(scope="module")
def fixture0():
    return mlp_fixture(0)


def test_recorded_predictions_cardinality(fixture0):
    f = fixture0
    rec = subset.record_val_predictions(f.caches[:2], f.datasets)
    assert rec.ordinals == [1, 3]
    assert all(len(c.confidence) == len(rec.sample_ids) == 512 for c in rec.caches.values())
    again = subset.record_val_predictions(f.caches[:2], f.datasets)
    assert again.to_dict() == rec.to_dict()


def test_disabled_cache_still_recorded(fixture0):
    f = fixture0
    off = f.caches[0].with_(threshold=DISABLED_THRESHOLD)
    rec = subset.record_val_predictions([off], f.datasets)
    assert len(rec.caches[1].predicted) == 512


def test_optimize_matches_oracle(fixture0):
    f = fixture0
    rec = subset.record_val_predictions(f.caches, f.datasets)
    best, results = subset.oracle_optimize(f.caches, f.graph, f.val_inputs, f.val_ids)
    assert subset.optimize(rec).subset == best
    for chosen, (score, counts) in results.items():
        replay = subset.replay_subset(rec, chosen)
        assert {o: (len(h), len(m)) for o, (h, m) in replay.items()} == counts
        assert subset.score_subset(replay, rec.costs()) == score
