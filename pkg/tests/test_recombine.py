import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmr.errors import EmptyAggregateError, EmptyPopulationError, InvalidGranularityError, PlanShapeError, ShapeMismatchError
from fedmr.recombine import (
    RecombinationPlan,
    block_multiset,
    check_lemma1,
    n_groups_for,
    plan_for,
    recombine,
    sample_plan,
    segment_groups,
)

from .conftest import random_list

SHAPES8 = [(3, 4), (4,), (4, 4), (4,), (4, 4), (4,), (4, 2), (2,)]


def sizes(groups):
    return [len(g) for g in groups]


def test_sample_plan_k1_is_identity():
    p = sample_plan(1, 5, seed=3)
    assert p.permutations.tolist() == [[0]] * 5


def test_sample_plan_deterministic():
    a = sample_plan(3, 4, seed=99)
    b = sample_plan(3, 4, seed=99)
    assert np.array_equal(a.permutations, b.permutations)


def test_sample_plan_uniform_over_s3():
    counts = Counter(tuple(sample_plan(3, 1, seed=s).permutations[0]) for s in range(60000))
    assert set(counts) == set(itertools.permutations(range(3)))
    for perm, c in counts.items():
        assert abs(c / 60000 - 1 / 6) <= 0.01, perm


def test_identity_plan_is_noop(rng):
    models = random_list(rng, 4, SHAPES8)
    plan = RecombinationPlan("layer", np.tile(np.arange(4), (8, 1)))
    out = recombine(models, plan)
    assert all(a.bitwise_equal(b) for a, b in zip(models, out))


def test_routing_first_three_layers(rng):
    # recombined model 0 takes layer 0 from m1, layer 1 from m2 and layer 2 from mK
    K = 4
    models = random_list(rng, K, SHAPES8)
    perms = np.tile(np.arange(K), (8, 1))
    perms[1] = [1, 0, 2, 3]
    perms[2] = [3, 1, 2, 0]
    out = recombine(models, RecombinationPlan("layer", perms))
    assert out[0].layers[0] is models[0].layers[0]
    assert out[0].layers[1] is models[1].layers[1]
    assert out[0].layers[2] is models[K - 1].layers[2]
    assert out[3].layers[2] is models[0].layers[2]


def test_block_multiset_preserved(rng):
    models = random_list(rng, 5, SHAPES8)
    out = recombine(models, plan_for(models, None, 17))
    assert block_multiset(models) == block_multiset(out)


def test_every_output_block_is_an_input_block_at_same_position(rng):
    models = random_list(rng, 6, SHAPES8)
    out = recombine(models, plan_for(models, 0.34, 5))
    for m in out:
        for i, blk in enumerate(m.layers):
            assert any(blk is src.layers[i] for src in models)


@pytest.mark.parametrize(
    "n, x, expected",
    [
        (8, 1.0, [8]),
        (8, 0.25, [2, 2, 2, 2]),
        (5, 0.5, [3, 2]),
        (7, 1 / 3, [3, 2, 2]),
        (3, 0.1, [1, 1, 1]),
        (1, 0.5, [1]),
    ],
)
def test_segment_groups(n, x, expected):
    groups = segment_groups(n, x)
    assert sizes(groups) == expected
    assert [i for g in groups for i in g] == list(range(n))


def balanced_oracle(n, S):
    """Enumerate every contiguous split of n into S parts and keep those with size spread <= 1."""
    out = []
    for cuts in itertools.combinations(range(1, n), S - 1):
        parts = np.diff([0, *cuts, n]).tolist()
        if max(parts) - min(parts) <= 1:
            out.append(parts)
    return out


@given(st.integers(1, 14), st.sampled_from([1.0, 0.5, 0.34, 0.25, 0.2, 0.125, 0.1]))
def test_segment_groups_balanced_rule(n, x):
    got = sizes(segment_groups(n, x))
    S = int(np.ceil(1 / x - 1e-9))
    if S >= n:
        assert got == [1] * n
    else:
        assert got in balanced_oracle(n, S)
        # documented tie-break: larger segments first
        assert got == sorted(got, reverse=True)


@pytest.mark.parametrize("x", [0.0, -0.5, 1.5, float("nan")])
def test_segment_groups_rejects(x):
    with pytest.raises(InvalidGranularityError):
        segment_groups(4, x)


def test_n_groups_for():
    assert n_groups_for(8, None) == ("layer", 8)
    assert n_groups_for(8, 0.5) == (2, 2)
    assert n_groups_for(8, 1.0) == (1, 1)


def test_plan_validation():
    with pytest.raises(PlanShapeError):
        RecombinationPlan("layer", [[0, 0, 1]])
    with pytest.raises(PlanShapeError):
        RecombinationPlan(0, [[0, 1]])


def test_recombine_errors(rng):
    with pytest.raises(EmptyPopulationError):
        sample_plan(0, 3, 0)
    with pytest.raises(EmptyAggregateError):
        recombine([], RecombinationPlan("layer", [[0]]))
    models = random_list(rng, 3, SHAPES8)
    with pytest.raises(PlanShapeError):
        recombine(models, sample_plan(4, 8, 0))
    with pytest.raises(PlanShapeError):
        recombine(models, sample_plan(3, 5, 0))
    other = random_list(rng, 1, [(2,)])[0]
    with pytest.raises(ShapeMismatchError):
        recombine([*models[:2], other], sample_plan(3, 8, 0))


def test_compose_matches_sequential(rng):
    models = random_list(rng, 5, SHAPES8)
    p, q = sample_plan(5, 8, 1), sample_plan(5, 8, 2)
    seq = recombine(recombine(models, p), q)
    once = recombine(models, p.compose(q))
    assert all(a.bitwise_equal(b) for a, b in zip(seq, once))


def test_plan_json_roundtrip():
    p = sample_plan(6, 3, 4, granularity=3)
    q = RecombinationPlan.from_json(p.to_json())
    assert q.granularity == 3 and np.array_equal(p.permutations, q.permutations)


def test_lemma1_examples(rng):
    models = random_list(rng, 6, SHAPES8)
    x = random_list(rng, 1, SHAPES8)[0]
    same = check_lemma1(models, models, x)
    assert same.sum_gap == 0.0 and same.sqdist_gap == 0.0
    out = recombine(models, plan_for(models, None, 3))
    assert check_lemma1(models, out, x).passed()
    w = out[0].flatten().copy()
    w[5] += 1.0
    broken = [out[0].unflatten(w), *out[1:]]
    rep = check_lemma1(models, broken, x)
    assert rep.sum_gap >= 1.0 - 1e-9 and not rep.passed()


@given(
    st.integers(2, 20),
    st.integers(2, 12),
    st.sampled_from([None, 1.0, 0.5, 0.3, 0.25, 0.1]),
    st.integers(0, 2**32 - 1),
)
def test_lemma1_property(K, n_layers, gran, seed):
    rng = np.random.default_rng(seed)
    shapes = [tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(1, 3))) for _ in range(n_layers)]
    models = random_list(rng, K, shapes, scale=10.0 ** rng.uniform(-2, 2))
    x = random_list(rng, 1, shapes)[0]
    out = recombine(models, plan_for(models, gran, seed))
    rep = check_lemma1(models, out, x)
    assert rep.sum_gap <= 1e-9
    assert rep.sqdist_gap <= 1e-12
