import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imbnas.errors import ConfigError, GenotypeParseError, NumericError
from imbnas.space import (
    OP_NAMES,
    Genotype,
    MixtureParams,
    build_search_space,
    canonical_op,
    decode_genotype,
    derive_genotype,
    encode_genotype,
    mixture_weights,
    random_genotype,
)


def test_single_pair_space():
    s = build_search_space(1, 2, OP_NAMES)
    assert s.num_edges == 1
    assert len(random_genotype(s, np.random.default_rng(0))) == 1


def test_edge_count_two_cells_four_nodes():
    s = build_search_space(2, 4, OP_NAMES)
    assert s.num_edges == 2 * math.comb(4, 2) == 12


def test_genotype_count_by_enumeration():
    s = build_search_space(1, 3, ["zero", "skip"])
    assert s.num_edges == 3 and s.num_ops == 2
    assert len({g.token for g in s.all_genotypes()}) == s.num_genotypes == 8


def test_choice_edges_lexicographic_and_acyclic():
    s = build_search_space(2, 4)
    assert list(s.choice_edges) == sorted(s.choice_edges)
    assert all(src < dst for _, src, dst in s.choice_edges)


def test_unknown_op_names_entry():
    with pytest.raises(ConfigError, match="conv_7x7"):
        build_search_space(1, 3, ["skip_connect", "conv_7x7"])


def test_op_aliases():
    assert canonical_op("skip") == "skip_connect"
    assert canonical_op("sep-conv-3x3") == "sep_conv_3x3"
    assert canonical_op("separable-conv-5x5") == "sep_conv_5x5"


@pytest.mark.parametrize("bad", [0, -1, 1.5])
def test_invalid_sizes(bad):
    with pytest.raises(ConfigError):
        build_search_space(bad, 3)


def test_duplicate_ops_rejected():
    with pytest.raises(ConfigError):
        build_search_space(1, 3, ["skip", "skip_connect"])


def test_single_op_space_always_zero_genotype():
    s = build_search_space(2, 3, ["sep_conv_3x3"])
    rng = np.random.default_rng(0)
    assert all(random_genotype(s, rng).op_indices == (0,) * 6 for _ in range(50))


def test_random_genotype_uniform():
    s = build_search_space(1, 3, ["zero", "skip"])
    rng = np.random.default_rng(0)
    n = 10_000
    freq = {}
    for _ in range(n):
        tok = random_genotype(s, rng).token
        freq[tok] = freq.get(tok, 0) + 1
    p = 1 / 8
    sigma = math.sqrt(n * p * (1 - p))
    assert len(freq) == 8
    assert all(abs(c - n * p) <= 3 * sigma for c in freq.values())


def test_random_genotype_deterministic():
    s = build_search_space(1, 4)
    a = [random_genotype(s, np.random.default_rng(7)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_random_genotype_reaches_full_space():
    s = build_search_space(1, 3, ["skip", "avg_pool_3x3", "max_pool_3x3", "zero"])
    rng = np.random.default_rng(1)
    seen = {random_genotype(s, rng).token for _ in range(3000)}
    assert seen == {g.token for g in s.all_genotypes()}


def test_mixture_weights_examples():
    np.testing.assert_allclose(mixture_weights([0, 0, 0]), [1 / 3] * 3)
    np.testing.assert_allclose(mixture_weights([math.log(2), 0, 0]), [0.5, 0.25, 0.25], rtol=1e-12)
    assert mixture_weights([10, 0, 0])[0] >= 0.9999


def test_mixture_weights_nan():
    with pytest.raises(NumericError):
        mixture_weights([0.0, float("nan")])


def test_mixture_weights_extreme_logits_stay_finite():
    w = mixture_weights([1e308, -1e308, 0.0])
    assert np.all(np.isfinite(w)) and w[0] == 1.0


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-1e3, 1e3),
)
def test_softmax_sums_and_shift_invariance(row, c):
    w = mixture_weights(row)
    assert abs(w.sum() - 1.0) <= 1e-6
    assert np.max(np.abs(mixture_weights(np.asarray(row) + c) - w)) <= 1e-6


def test_derive_examples():
    s = build_search_space(1, 2, ["zero", "skip", "avg_pool_3x3"])
    assert derive_genotype(MixtureParams([[0.1, 0.9, 0.2]])).op_indices == (1,)
    assert derive_genotype(MixtureParams([[0.5, 0.5, 0.5]])).op_indices == (0,)
    g = Genotype([2])
    assert derive_genotype(MixtureParams.one_hot(s, g)) == g


@given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_derive_shift_invariant(rows, seed, c):
    alpha = np.random.default_rng(seed).normal(size=(rows, 4))
    assert derive_genotype(MixtureParams(alpha)) == derive_genotype(MixtureParams(alpha + c))


def test_mixture_params_rejects_non_finite_and_is_read_only():
    with pytest.raises(NumericError):
        MixtureParams([[0.0, float("inf")]])
    m = MixtureParams([[0.0, 1.0]])
    with pytest.raises(ValueError):
        m.alpha[0, 0] = 3.0


def test_encode_decode_examples():
    s = build_search_space(1, 3, OP_NAMES)
    s4 = build_search_space(2, 2, OP_NAMES)  # 2 edges
    four_edges = build_search_space(4, 2, OP_NAMES)
    assert encode_genotype(Genotype([3, 0, 5, 1])) == "3-0-5-1"
    assert decode_genotype("3-0-5-1", four_edges).op_indices == (3, 0, 5, 1)
    assert decode_genotype("5-1-0", s).op_indices == (5, 1, 0)
    with pytest.raises(GenotypeParseError) as err:
        decode_genotype("9-0", s4)
    assert err.value.position == 0


def test_decode_empty_token_on_zero_edge_space():
    from imbnas.space import SearchSpace

    empty = SearchSpace(0, 2, OP_NAMES, 8, 10)
    assert empty.num_edges == 0
    assert decode_genotype("", empty) == Genotype([])


@pytest.mark.parametrize(
    "token,position",
    [("1-x-2", 1), ("1--2", 1), ("1-2", 2), ("1-2-3-4", 3), ("-1-2-3", 0), ("1-2-6", 2)],
)
def test_decode_errors_carry_position(token, position):
    s = build_search_space(1, 3, OP_NAMES)
    with pytest.raises(GenotypeParseError) as err:
        decode_genotype(token, s)
    assert err.value.position == position


@given(st.data())
def test_encode_decode_bijection(data):
    cells = data.draw(st.integers(1, 2))
    nodes = data.draw(st.integers(2, 4))
    s = build_search_space(cells, nodes, OP_NAMES)
    idx = data.draw(st.lists(st.integers(0, 5), min_size=s.num_edges, max_size=s.num_edges))
    g = Genotype(idx)
    assert decode_genotype(encode_genotype(g), s) == g


def test_encode_is_injective_on_small_space():
    s = build_search_space(1, 3, ["zero", "skip", "avg_pool_3x3"])
    tokens = [g.token for g in s.all_genotypes()]
    assert len(set(tokens)) == len(tokens) == 27
    assert [decode_genotype(t, s) for t in tokens] == list(s.all_genotypes())


def test_genotype_check():
    s = build_search_space(1, 3, OP_NAMES)
    with pytest.raises(ConfigError):
        Genotype([0, 1]).check(s)
    with pytest.raises(ConfigError):
        Genotype([0, 1, 6]).check(s)


def test_describe_round_trip():
    s = build_search_space(2, 3, ["skip", "sep_conv_5x5"], 12, 7, 1)
    assert type(s).from_description(s.describe()) == s
    assert s.with_num_classes(3).num_classes == 3


def test_all_genotypes_product_order():
    s = build_search_space(1, 3, ["zero", "skip"])
    assert [g.op_indices for g in s.all_genotypes()] == list(itertools.product(range(2), repeat=3))
