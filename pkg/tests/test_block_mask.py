import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpsignals.block_mask import (
    MASK_KINDS,
    AttentionMask,
    MaskSpec,
    MaskTooLargeError,
    build_blockwise_mask,
    build_lower_triangular_mask,
    build_mask,
    build_strict_past_mask,
    dump_mask_text,
    export_mask_bitmap,
    mask_predicate,
    parse_mask_text,
    read_bitmap,
)
from oracles import brute_mask, grid_tokens, person_permutation

dims = st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4))


class TestLayout:
    @given(dims)
    def test_layout_is_bijection(self, tpm):
        spec = MaskSpec.of_size(*tpm)
        tokens = grid_tokens(*tpm)
        assert [spec.position(*tok) for tok in tokens] == list(range(spec.length))
        assert [spec.layout(p) for p in range(spec.length)] == tokens
        t, i, k = spec.layout_arrays()
        assert list(zip(t.tolist(), i.tolist(), k.tolist())) == tokens

    def test_bounds(self):
        spec = MaskSpec.of_size(2, 2, 2)
        with pytest.raises(IndexError):
            spec.position(2, 0, 0)
        with pytest.raises(IndexError):
            spec.layout(8)
        with pytest.raises(IndexError):
            mask_predicate(spec, (0, 0, 0), (0, 2, 0))

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            MaskSpec.of_size(0, 1, 1)
        with pytest.raises(ValueError):
            MaskSpec(1, 1, ("gaze", "gaze"))


class TestPredicate:
    SPEC = MaskSpec.of_size(3, 2, 4)

    def test_own_previous(self):
        assert mask_predicate(self.SPEC, (2, 0, 0), (1, 0, 3))

    def test_own_current_blocked(self):
        assert not mask_predicate(self.SPEC, (2, 0, 0), (2, 0, 1))
        assert not mask_predicate(self.SPEC, (2, 0, 0), (2, 0, 0))

    def test_others_current(self):
        assert mask_predicate(self.SPEC, (2, 0, 0), (2, 1, 1))

    def test_future_blocked(self):
        assert not mask_predicate(self.SPEC, (1, 0, 0), (2, 1, 0))

    def test_relaxation_flag(self):
        assert mask_predicate(self.SPEC, (2, 0, 0), (2, 0, 1), allow_own_modalities=True)
        assert not mask_predicate(self.SPEC, (2, 0, 0), (2, 0, 0), allow_own_modalities=True)


class TestBuilders:
    def test_small_blockwise_cases(self):
        assert build_blockwise_mask(MaskSpec.of_size(1, 1, 1)).allow.tolist() == [[False]]
        assert build_blockwise_mask(MaskSpec.of_size(2, 1, 1)).allow.tolist() == [[False, False], [True, False]]
        assert build_blockwise_mask(MaskSpec.of_size(1, 2, 1)).allow.tolist() == [[False, True], [True, False]]

    def test_strict_past_cases(self):
        assert not build_strict_past_mask(MaskSpec.of_size(1, 3, 2)).allow.any()
        allow = build_strict_past_mask(MaskSpec.of_size(2, 2, 1)).allow
        assert allow[2:].tolist() == [[True, True, False, False]] * 2
        assert not allow[:2].any()

    def test_lower_cases(self):
        assert np.array_equal(build_lower_triangular_mask(MaskSpec.of_size(3, 1, 1)).allow, np.tril(np.ones((3, 3), bool)))
        off = build_lower_triangular_mask(MaskSpec.of_size(2, 2, 2), include_diagonal=False)
        assert not np.diag(off.allow).any()

    def test_lower_allows_own_current_that_blockwise_forbids(self):
        spec = MaskSpec.of_size(2, 2, 2)
        extra = build_mask(spec, "lower").allow & ~build_mask(spec, "blockwise").allow
        pairs = {(spec.layout(q), spec.layout(k)) for q, k in zip(*np.nonzero(extra))}
        assert pairs
        for (t, i, _), (t2, j, _) in pairs:
            assert t2 == t and j == i

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_mask(MaskSpec.of_size(1, 1, 1), "diagonal")

    def test_memory_budget(self):
        with pytest.raises(MaskTooLargeError, match="chunk"):
            build_blockwise_mask(MaskSpec.of_size(1000, 3, 6))
        with pytest.raises(MaskTooLargeError):
            build_mask(MaskSpec.of_size(4, 2, 2), "strict_past", memory_budget=100)

    def test_mask_read_only(self):
        mask = build_blockwise_mask(MaskSpec.of_size(2, 2, 2))
        with pytest.raises(ValueError):
            mask.allow[0, 0] = True

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            AttentionMask(MaskSpec.of_size(2, 1, 1), "blockwise", np.zeros((3, 3), bool))


class TestInvariants:
    @given(dims)
    def test_matches_predicate(self, tpm):
        spec = MaskSpec.of_size(*tpm)
        allow = build_blockwise_mask(spec).allow
        tokens = grid_tokens(*tpm)
        for q, k in itertools.product(range(spec.length), repeat=2):
            assert allow[q, k] == mask_predicate(spec, tokens[q], tokens[k])

    @given(dims)
    def test_causal_and_self_block_excluded(self, tpm):
        spec = MaskSpec.of_size(*tpm)
        allow = build_blockwise_mask(spec).allow
        t, i, _ = spec.layout_arrays()
        assert not (allow & (t[None, :] > t[:, None])).any()
        assert not (allow & (t[None, :] == t[:, None]) & (i[None, :] == i[:, None])).any()

    @given(dims)
    def test_monotone_nesting(self, tpm):
        spec = MaskSpec.of_size(*tpm)
        past = build_strict_past_mask(spec).allow
        block = build_blockwise_mask(spec).allow
        t, _, _ = spec.layout_arrays()
        same_or_past = t[None, :] <= t[:, None]
        assert not (past & ~block).any()
        assert not (block & ~same_or_past).any()

    @given(dims, st.randoms(use_true_random=False))
    def test_person_permutation_equivariance(self, tpm, rnd):
        T, P, M = tpm
        perm = list(range(P))
        rnd.shuffle(perm)
        allow = build_blockwise_mask(MaskSpec.of_size(T, P, M)).allow
        pos = person_permutation(T, P, M, perm)
        permuted = np.zeros_like(allow)
        permuted[np.ix_(pos, pos)] = allow
        assert np.array_equal(permuted, allow)

    def test_fully_masked_rows_only_lone_person_first_block(self):
        for T, P, M in itertools.product(range(1, 4), range(1, 4), range(1, 3)):
            spec = MaskSpec.of_size(T, P, M)
            rows = build_blockwise_mask(spec).fully_masked_rows()
            t, _, _ = spec.layout_arrays()
            expected = (t == 0) if P == 1 else np.zeros_like(rows)
            assert np.array_equal(rows, expected)


class TestExport:
    def test_checkerboard_bitmap(self, tmp_path):
        mask = build_blockwise_mask(MaskSpec.of_size(1, 2, 1))
        path = export_mask_bitmap(mask, tmp_path / "m.pbm")
        assert path.read_text().split() == ["P1", "2", "2", "10", "01"]

    def test_bitmap_round_trip_and_size(self, tmp_path):
        mask = build_blockwise_mask(MaskSpec.of_size(12, 3, 6))
        path = export_mask_bitmap(mask, tmp_path / "m.pbm")
        header = path.read_text().splitlines()[:2]
        assert header == ["P1", "216 216"]
        assert max(len(line) for line in path.read_text().splitlines()) <= 70
        assert np.array_equal(read_bitmap(path), mask.allow)

    def test_all_blocked_is_all_black(self, tmp_path):
        mask = build_strict_past_mask(MaskSpec.of_size(1, 2, 2))
        bits = "".join(export_mask_bitmap(mask, tmp_path / "m.pbm").read_text().splitlines()[2:])
        assert set(bits) == {"1"}

    @pytest.mark.parametrize("kind", MASK_KINDS)
    def test_text_dump_round_trip(self, kind):
        mask = build_mask(MaskSpec.of_size(3, 2, 2), kind)
        text = dump_mask_text(mask)
        assert len(text.splitlines()) == 12
        assert np.array_equal(parse_mask_text(text), mask.allow)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            export_mask_bitmap(build_blockwise_mask(MaskSpec.of_size(1, 1, 1)), tmp_path / "missing" / "m.pbm")


@pytest.mark.parametrize("kind", MASK_KINDS)
def test_small_grid_oracle(kind):
    spec = MaskSpec.of_size(2, 3, 2)
    assert np.array_equal(build_mask(spec, kind).allow, brute_mask(2, 3, 2, kind))
