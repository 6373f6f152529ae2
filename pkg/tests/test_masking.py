import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flavars.encoders import TokenSequence
from flavars.errors import ConfigurationError, DataError
from flavars.masking import (
    CLS_ID,
    KEEP,
    MASK,
    MASK_ID,
    NUM_SPECIAL,
    PAD_ID,
    RANDOM,
    SEP_ID,
    MaskingConfig,
    MaskPlan,
    apply_image_mask,
    plans_to_mask,
    round_half_away,
    sample_image_mask,
    sample_text_mask,
)

ACTIONS = (0.8, 0.1, 0.1)


def seq(*body, pads=0):
    ids = (CLS_ID, *body, SEP_ID) + (PAD_ID,) * pads
    return TokenSequence(ids, (False,) * (len(ids) - pads) + (True,) * pads)


# ---------------------------------------------------------------- config / plan


def test_config_defaults_and_validation():
    cfg = MaskingConfig()
    assert (cfg.image_mask_ratio, cfg.text_mask_prob, cfg.mlm_actions) == (0.4, 0.15, ACTIONS)
    with pytest.raises(ConfigurationError):
        MaskingConfig(image_mask_ratio=1.5)
    with pytest.raises(ConfigurationError):
        MaskingConfig(mlm_actions=(0.8, 0.1, 0.2))
    MaskingConfig(mlm_actions=(0.8, 0.1, 0.1 + 5e-10))


def test_plan_rejects_duplicates_and_disorder():
    with pytest.raises(DataError):
        MaskPlan((1, 1), (MASK, MASK))
    with pytest.raises(DataError):
        MaskPlan((2, 1), (MASK, MASK))


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.4)] == [1, 2, 3, -1, 2]


# ---------------------------------------------------------------- image masks


def test_image_ratio_zero_is_empty():
    assert len(sample_image_mask(10, 0.0, np.random.default_rng(0))) == 0


def test_image_ratio_one_is_everything():
    assert sample_image_mask(10, 1.0, np.random.default_rng(0)).positions == tuple(range(10))


def test_image_ratio_point_four_gives_four():
    plan = sample_image_mask(10, 0.4, np.random.default_rng(0))
    assert len(set(plan.positions)) == 4 and set(plan.actions) == {MASK}


@pytest.mark.parametrize("ratio", [-0.1, 1.01])
def test_image_ratio_out_of_range(ratio):
    with pytest.raises(ConfigurationError):
        sample_image_mask(10, ratio, np.random.default_rng(0))


def test_image_mask_size_exhaustive():
    rng = np.random.default_rng(0)
    for n in range(1, 257):
        for ratio in (0, 0.25, 0.4, 0.75, 1):
            plan = sample_image_mask(n, ratio, rng)
            assert len(plan) == round_half_away(ratio * n)
            assert all(0 <= p < n for p in plan.positions)


def test_image_mask_reproducible():
    a = sample_image_mask(64, 0.4, np.random.default_rng(9))
    b = sample_image_mask(64, 0.4, np.random.default_rng(9))
    assert a == b


def test_image_mask_roughly_uniform():
    counts = np.zeros(16)
    rng = np.random.default_rng(1)
    for _ in range(4000):
        counts[list(sample_image_mask(16, 0.25, rng).positions)] += 1
    freq = counts / 4000
    assert np.abs(freq - 0.25).max() < 0.03


# ---------------------------------------------------------------- text masks


def test_text_prob_zero_leaves_tokens():
    tokens = seq(7, 8, 9)
    plan, out = sample_text_mask(tokens, 0.0, ACTIONS, np.random.default_rng(0), 20)
    assert len(plan) == 0 and out == tokens


def test_text_mask_deterministic():
    tokens = seq(*range(5, 15), pads=3)
    a = sample_text_mask(tokens, 0.5, ACTIONS, np.random.default_rng(4), 30)
    b = sample_text_mask(tokens, 0.5, ACTIONS, np.random.default_rng(4), 30)
    assert a == b


def test_text_prob_out_of_range():
    with pytest.raises(ConfigurationError):
        sample_text_mask(seq(7), 1.2, ACTIONS, np.random.default_rng(0), 20)


def test_text_actions_applied():
    tokens = seq(*range(5, 25))
    plan, out = sample_text_mask(tokens, 1.0, ACTIONS, np.random.default_rng(2), 40)
    assert len(plan) == 20
    for pos, act in zip(plan.positions, plan.actions):
        if act == MASK:
            assert out.ids[pos] == MASK_ID
        elif act == KEEP:
            assert out.ids[pos] == tokens.ids[pos]
        else:
            assert act == RANDOM and NUM_SPECIAL <= out.ids[pos] < 40
    unplanned = set(range(len(tokens.ids))) - set(plan.positions)
    assert all(out.ids[i] == tokens.ids[i] for i in unplanned)


def test_text_monte_carlo_rates():
    rng = np.random.default_rng(2024)
    tokens = seq(*([7] * 1000))
    selected = 0
    tally = {MASK: 0, RANDOM: 0, KEEP: 0}
    for _ in range(100):  # 100 x 1000 candidate draws
        plan, _ = sample_text_mask(tokens, 0.15, ACTIONS, rng, 50)
        selected += len(plan)
        for act in plan.actions:
            tally[act] += 1
    assert abs(selected / 100_000 - 0.15) <= 0.005
    for act, want in zip((MASK, RANDOM, KEEP), ACTIONS):
        assert abs(tally[act] / selected - want) <= 0.01


@settings(max_examples=200, deadline=None)
@given(
    body=st.lists(st.integers(0, 39), min_size=0, max_size=20),
    pads=st.integers(0, 5),
    prob=st.floats(0, 1),
    seed=st.integers(0, 2**32 - 1),
)
def test_specials_never_selected(body, pads, prob, seed):
    tokens = seq(*body, pads=pads)
    plan, out = sample_text_mask(tokens, prob, ACTIONS, np.random.default_rng(seed), 40)
    for pos in plan.positions:
        assert tokens.ids[pos] >= NUM_SPECIAL and not tokens.pad_mask[pos]
    assert out.pad_mask == tokens.pad_mask


# ---------------------------------------------------------------- apply


def test_apply_empty_plan_unchanged(rng):
    x = rng.random((3, 4))
    assert np.array_equal(apply_image_mask(x, MaskPlan(), np.zeros(4)), x)


def test_apply_full_plan(rng):
    x = rng.random((3, 4))
    token = np.arange(4.0)
    out = apply_image_mask(x, MaskPlan((0, 1, 2), (MASK,) * 3), token)
    assert (out == token).all()


def test_apply_single_row_torch():
    x = torch.randn(3, 4)
    token = torch.full((4,), 7.0)
    out = apply_image_mask(x, MaskPlan((0,), (MASK,)), token)
    assert torch.equal(out[0], token) and torch.equal(out[1:], x[1:])
    assert not torch.equal(x[0], token)


def test_apply_out_of_range():
    with pytest.raises(DataError):
        apply_image_mask(np.zeros((3, 2)), MaskPlan((3,), (MASK,)), np.zeros(2))


def test_plans_to_mask():
    m = plans_to_mask([MaskPlan((1,), (MASK,)), MaskPlan()], 3)
    assert m.tolist() == [[False, True, False], [False, False, False]]
