import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotvote import tensor as T
from cotvote.errors import ConfigError, NumericError
from cotvote.metrics import softmax_ce
from cotvote.rng import RngStream
from cotvote.tensor import Tensor, finite_difference_check
from cotvote.voting import (
    LogitStack,
    VoteConfig,
    decode_rationale,
    match_choice,
    vote_answer,
    vote_logits,
    voted_loss,
)

from voting_oracle import scalar_vote

CONFORMANCE_SAMPLES = np.array([[[1.0, 4.0, 0.0]], [[3.0, 2.0, 0.0]]]).swapaxes(1, 1)
# (N=2, L=1, V=3)


def stack_of(rows, mask=None):
    arr = np.asarray(rows, dtype=np.float64)[:, None, :]  # one position
    return LogitStack(Tensor(arr), mask)


def random_stack(rng, n, length, v, scale=2.0):
    return LogitStack(Tensor(rng.normal((n, length, v)) * scale))


# -- conformance against the independent scalar oracle ---------------------------


def test_conformance_appendix_variant():
    cfg = VoteConfig(alpha=0.5, variant="appendix_pseudocode", std_mode="unbiased")
    voted = vote_logits(stack_of([[1.0, 4.0, 0.0], [3.0, 2.0, 0.0]]), cfg)
    oracle = scalar_vote([[1.0, 4.0, 0.0], [3.0, 2.0, 0.0]])
    for name in ("mean", "std", "weights", "weighted", "final"):
        assert np.allclose(getattr(voted, name).data[0], oracle[name], atol=1e-15), name
    assert np.allclose(voted.mean.data[0], [2.0, 3.0, 0.0], atol=1e-12)
    assert np.allclose(voted.std.data[0], [np.sqrt(2.0), np.sqrt(2.0), 0.0], atol=1e-12)
    assert np.allclose(voted.weights.data[0], [0.414214, 0.414214, 1.0], atol=1e-6)
    assert np.allclose(voted.weighted.data[0], [0.906163, 1.359244, 0.0], atol=1e-6)
    assert np.allclose(voted.final.data[0], [1.453081, 2.179622, 0.0], atol=1e-6)


def test_conformance_eq9_variant():
    cfg = VoteConfig(alpha=0.5, variant="eq9_normalized", std_mode="unbiased")
    voted = vote_logits(stack_of([[1.0, 4.0, 0.0], [3.0, 2.0, 0.0]]), cfg)
    oracle = scalar_vote([[1.0, 4.0, 0.0], [3.0, 2.0, 0.0]], variant="eq9_normalized")
    assert np.allclose(voted.weighted.data[0], oracle["weighted"], atol=1e-15)
    assert np.allclose(voted.weighted.data[0], [0.453081, 0.679622, 0.0], atol=1e-6)
    assert np.allclose(voted.final.data[0], [1.226541, 1.839811, 0.0], atol=1e-6)


def test_random_stacks_match_oracle_everywhere():
    rng = RngStream(21, 0)
    for variant in ("appendix_pseudocode", "eq9_normalized"):
        for std_mode in ("unbiased", "population"):
            for alpha in (0.0, 0.3, 1.0):
                cfg = VoteConfig(alpha=alpha, variant=variant, std_mode=std_mode)
                n, length, v = 5, 3, 4
                stack = random_stack(rng, n, length, v)
                voted = vote_logits(stack, cfg)
                for j in range(length):
                    rows = [list(stack.samples.data[i, j]) for i in range(n)]
                    oracle = scalar_vote(rows, alpha, variant, std_mode)
                    for name in ("mean", "std", "weights", "weighted", "final"):
                        assert np.allclose(
                            getattr(voted, name).data[j], oracle[name], atol=1e-12
                        ), (variant, std_mode, alpha, name)


# -- degenerate and exactness contracts -------------------------------------------


@pytest.mark.parametrize("variant", ["appendix_pseudocode", "eq9_normalized"])
@pytest.mark.parametrize("alpha", [0.0, 0.37, 1.0])
def test_single_sample_bypass_bitwise(variant, alpha):
    rng = RngStream(4, 1)
    sample = rng.normal((1, 5, 7))
    voted = vote_logits(LogitStack(Tensor(sample)), VoteConfig(alpha=alpha, variant=variant))
    assert np.array_equal(voted.final.data, sample[0])
    assert np.array_equal(voted.mean.data, sample[0])
    assert np.array_equal(voted.weighted.data, sample[0])
    assert np.array_equal(voted.std.data, np.zeros((5, 7)))
    assert np.array_equal(voted.weights.data, np.ones((5, 7)))


@pytest.mark.parametrize("n,v", [(2, 4), (4, 8)])
def test_identical_samples_closed_form_exact(n, v):
    # n and v powers of two so every float sum below is exact
    rng = RngStream(4, 2)
    sample = rng.normal((3, v))
    stack = LogitStack(Tensor(np.broadcast_to(sample, (n, 3, v)).copy()))
    voted = vote_logits(stack, VoteConfig(alpha=0.5, variant="appendix_pseudocode"))
    assert np.array_equal(voted.mean.data, sample)
    assert np.array_equal(voted.std.data, np.zeros_like(sample))
    assert np.array_equal(voted.weights.data, np.ones_like(sample))
    assert np.array_equal(voted.weighted.data, (n / v) * sample)
    voted9 = vote_logits(stack, VoteConfig(alpha=0.5, variant="eq9_normalized"))
    assert np.array_equal(voted9.weighted.data, (1.0 / v) * sample)


def test_identical_samples_n3_matches_oracle_exactly():
    sample = [0.731, -2.5, 0.125, 9.0]
    stack = stack_of([sample, sample, sample])
    voted = vote_logits(stack, VoteConfig())
    oracle = scalar_vote([sample] * 3)
    for name in ("mean", "std", "weights", "weighted", "final"):
        assert np.array_equal(getattr(voted, name).data[0], oracle[name]), name


def test_alpha_extremes_exact():
    rng = RngStream(4, 3)
    stack = random_stack(rng, 4, 3, 5)
    v1 = vote_logits(stack, VoteConfig(alpha=1.0))
    assert np.array_equal(v1.final.data, v1.mean.data)
    v0 = vote_logits(stack, VoteConfig(alpha=0.0))
    assert np.array_equal(v0.final.data, v0.weighted.data)


def test_permutation_invariance():
    rng = RngStream(4, 4)
    stack = random_stack(rng, 6, 2, 5)
    shuffled = LogitStack(Tensor(stack.samples.data[::-1].copy()))
    for variant in ("appendix_pseudocode", "eq9_normalized"):
        cfg = VoteConfig(variant=variant)
        a, b = vote_logits(stack, cfg), vote_logits(shuffled, cfg)
        for name in ("mean", "std", "weights", "weighted", "final"):
            assert np.allclose(getattr(a, name).data, getattr(b, name).data, atol=1e-12)


def test_mean_branch_argmax_shift_invariant():
    rng = RngStream(4, 5)
    stack = random_stack(rng, 4, 6, 9)
    cfg = VoteConfig(alpha=1.0)
    base = np.argmax(vote_logits(stack, cfg).final.data, axis=-1)
    shifts = rng.normal((6, 1)) * 50.0  # one constant per position, all samples
    shifted = LogitStack(Tensor(stack.samples.data + shifts[None, :, :]))
    assert np.array_equal(np.argmax(vote_logits(shifted, cfg).final.data, axis=-1), base)


# -- jensen property ---------------------------------------------------------------


def test_jensen_mean_branch_loss_bound():
    rng = RngStream(4, 6)
    cfg = VoteConfig(alpha=1.0)
    for _ in range(300):
        n = int(rng.integers(2, 9))
        v = int(rng.integers(2, 17))
        stack = LogitStack(Tensor(rng.normal((n, 1, v)) * 3.0))
        y = np.array([int(rng.integers(0, v))])
        voted = voted_loss(stack, y, cfg).item()
        per_sample = softmax_ce(stack.samples.data, np.broadcast_to(y, (n, 1))).mean()
        assert voted <= per_sample + 1e-9


# -- voted_loss --------------------------------------------------------------------


def test_voted_loss_n1_equals_plain_ce_exactly():
    rng = RngStream(4, 7)
    sample = rng.normal((1, 4, 6))
    y = rng.integers(0, 6, (4,))
    loss = voted_loss(LogitStack(Tensor(sample)), y, VoteConfig())
    plain = T.cross_entropy_logits(Tensor(sample[0]), y).mean()
    assert loss.item() == plain.item()


def test_voted_loss_identical_samples_alpha1_equals_plain_ce():
    rng = RngStream(4, 8)
    sample = rng.normal((4, 6))
    stacked = np.broadcast_to(sample, (4, 4, 6)).copy()
    y = rng.integers(0, 6, (4,))
    loss = voted_loss(LogitStack(Tensor(stacked)), y, VoteConfig(alpha=1.0))
    plain = T.cross_entropy_logits(Tensor(sample), y).mean()
    assert loss.item() == pytest.approx(plain.item(), abs=1e-12)


def test_voted_loss_respects_mask():
    rng = RngStream(4, 9)
    arr = rng.normal((3, 5, 4))
    y = rng.integers(0, 4, (5,))
    mask = np.array([1, 1, 0, 1, 0], dtype=bool)
    loss = voted_loss(LogitStack(Tensor(arr), mask), y, VoteConfig())
    trimmed = voted_loss(LogitStack(Tensor(arr[:, mask, :])), y[mask], VoteConfig())
    assert loss.item() == pytest.approx(trimmed.item(), abs=1e-12)


def test_voted_loss_target_length_mismatch():
    rng = RngStream(4, 10)
    with pytest.raises(ValueError):
        voted_loss(random_stack(rng, 2, 3, 4), np.zeros(5, dtype=int), VoteConfig())


def test_stack_rejects_non_finite():
    arr = np.zeros((2, 2, 2))
    arr[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        LogitStack(Tensor(arr))


def test_stack_rejects_empty():
    with pytest.raises(ValueError):
        LogitStack(Tensor(np.zeros((0, 2, 2))))


def test_vote_config_validation():
    with pytest.raises(ConfigError):
        VoteConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        VoteConfig(n_rationale_samples=0)
    with pytest.raises(ConfigError):
        VoteConfig(variant="nope")


# -- differentiability ---------------------------------------------------------------


@pytest.mark.parametrize("variant", ["appendix_pseudocode", "eq9_normalized"])
def test_fd_through_voted_loss(variant):
    rng = RngStream(4, 11)
    samples = Tensor(rng.normal((3, 4, 5)), requires_grad=True)
    y = rng.integers(0, 5, (4,))
    mask = np.array([1, 1, 1, 0], dtype=bool)
    cfg = VoteConfig(alpha=0.4, variant=variant)

    def f():
        return voted_loss(LogitStack(samples, mask), y, cfg)

    err = finite_difference_check(f, [samples])
    assert err <= 1e-4
    assert err <= 1e-6  # actual agreement is much tighter than the contract


def test_gradients_reach_every_sample():
    rng = RngStream(4, 12)
    samples = Tensor(rng.normal((4, 2, 5)), requires_grad=True)
    y = rng.integers(0, 5, (2,))
    voted_loss(LogitStack(samples), y, VoteConfig(alpha=0.3)).backward()
    per_sample_norms = np.abs(samples.grad).sum(axis=(1, 2))
    assert (per_sample_norms > 0).all()


# -- decoding -------------------------------------------------------------------------


def test_decode_rationale_n1_is_greedy_argmax():
    rng = RngStream(4, 13)
    sample = rng.normal((1, 6, 8))
    stack = LogitStack(Tensor(sample))
    cfg = VoteConfig()
    toks = decode_rationale(vote_logits(stack, cfg), stack, cfg, end_token=None)
    assert toks == [int(t) for t in sample[0].argmax(-1)]


def test_decode_rationale_truncates_at_end_token():
    arr = np.full((1, 4, 5), -10.0)
    for j, tok in enumerate([3, 1, 2, 4]):  # 2 is the end token
        arr[0, j, tok] = 10.0
    stack = LogitStack(Tensor(arr))
    cfg = VoteConfig()
    assert decode_rationale(vote_logits(stack, cfg), stack, cfg, end_token=2) == [3, 1]


def test_token_majority_strict_majority():
    arr = np.full((3, 1, 10), -5.0)
    for i, tok in enumerate([5, 5, 7]):
        arr[i, 0, tok] = 5.0
    stack = LogitStack(Tensor(arr))
    cfg = VoteConfig(rationale_decode="token_majority")
    assert decode_rationale(vote_logits(stack, cfg), stack, cfg, None) == [5]


def test_token_majority_tie_breaks_to_lowest_id():
    arr = np.full((2, 1, 10), -5.0)
    arr[0, 0, 7] = 5.0
    arr[1, 0, 5] = 5.0
    stack = LogitStack(Tensor(arr))
    cfg = VoteConfig(rationale_decode="token_majority")
    assert decode_rationale(vote_logits(stack, cfg), stack, cfg, None) == [5]


def test_vote_answer_identical_samples_pick_matching_choice():
    # every sample's argmax sequence spells choice B
    arr = np.full((3, 2, 9), -4.0)
    arr[:, 0, 6] = 4.0
    arr[:, 1, 2] = 4.0
    stack = LogitStack(Tensor(arr))
    choices = [[5, 2], [6, 2], [6, 3]]
    assert vote_answer(stack, VoteConfig(), choices, end_token=None) == 1


def test_vote_answer_majority_under_token_majority():
    arr = np.full((3, 1, 9), -4.0)
    for i, tok in enumerate([4, 4, 7]):  # A, A, C
        arr[i, 0, tok] = 4.0
    stack = LogitStack(Tensor(arr))
    cfg = VoteConfig(rationale_decode="token_majority")
    assert vote_answer(stack, cfg, [[4], [5], [7]], end_token=None) == 0


def test_vote_answer_empty_choices():
    rng = RngStream(4, 14)
    with pytest.raises(ValueError):
        vote_answer(random_stack(rng, 2, 1, 4), VoteConfig(), [], None)


def test_match_choice_falls_back_to_rouge():
    # no exact match: [1 2 3] overlaps [1 2] more than [9 8]
    assert match_choice([1, 2, 3], [[9, 8], [1, 2]]) == 1
    # tie on score -> lowest index
    assert match_choice([1, 2], [[1], [2]]) == 0


# -- hypothesis property tests ---------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=2, max_value=6),
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_jensen_and_permutation(n, v, seed):
    rng = RngStream(seed, 77)
    samples = rng.normal((n, 1, v)) * 4.0
    y = np.array([int(rng.integers(0, v))])
    stack = LogitStack(Tensor(samples))
    cfg = VoteConfig(alpha=1.0)
    voted = voted_loss(stack, y, cfg).item()
    per_sample = softmax_ce(samples, np.broadcast_to(y, (n, 1))).mean()
    assert voted <= per_sample + 1e-9
    perm = RngStream(seed, 78).permutation(n)
    shuffled = LogitStack(Tensor(samples[perm].copy()))
    a = vote_logits(stack, VoteConfig())
    b = vote_logits(shuffled, VoteConfig())
    assert np.allclose(a.final.data, b.final.data, atol=1e-12)
