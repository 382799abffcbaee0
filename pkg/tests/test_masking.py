from collections import Counter
from itertools import combinations

import numpy as np
import pytest
import torch
from scipy.stats import chi2_contingency, chisquare, hypergeom

from mci_mae.masking import (
    MaskBranch,
    MaskConfig,
    MaskingError,
    MaskPlan,
    MaskStrategy,
    baseline_mask,
    channel_fixed_mask,
    dcp_branch,
    dcp_mask,
    draw_plans,
    dynamic_channel_mask,
    make_mask,
    mask_rng,
    random_patch_mask,
)

N, C = 16, 4


def test_mask_config_rejects_bad_probabilities():
    with pytest.raises(MaskingError):
        MaskConfig(p_patch=0.7, p_channel=0.6)
    with pytest.raises(MaskingError):
        MaskConfig(r_p=1.0)


def test_strategy_parse_is_case_insensitive():
    assert MaskStrategy.parse("dcp") == MaskStrategy.DCP
    assert MaskStrategy.parse("random-patch-fixed") == MaskStrategy.RANDOM_PATCH_FIXED
    with pytest.raises(MaskingError):
        MaskStrategy.parse("nonsense")


def test_plan_rejects_fully_masked_matrix():
    with pytest.raises(MaskingError):
        MaskPlan(torch.ones(N, C, dtype=torch.bool), MaskBranch.PATCH_ONLY)


def test_channel_only_plan_must_mask_whole_channels():
    mask = torch.zeros(N, C, dtype=torch.bool)
    mask[:3, 0] = True
    with pytest.raises(MaskingError):
        MaskPlan(mask, MaskBranch.CHANNEL_ONLY)


def test_token_mask_is_channel_major():
    mask = torch.zeros(3, 2, dtype=torch.bool)
    mask[1, 1] = True
    plan = MaskPlan(mask, MaskBranch.PATCH_ONLY)
    # position 1 of channel 1 is token 1*3 + 1
    assert plan.token_mask().nonzero().flatten().tolist() == [4]


def test_empty_plan():
    plan = MaskPlan.empty(N, C)
    assert plan.branch == MaskBranch.NONE
    assert plan.num_masked == 0
    assert plan.num_visible == N * C


def test_random_patch_mask_exact_count_per_channel():
    for draw in range(200):
        plan = random_patch_mask(N, C, 0.75, mask_rng(0, draw))
        assert plan.mask.sum(dim=0).tolist() == [12] * C


def test_random_patch_mask_zero_ratio_masks_nothing():
    plan = random_patch_mask(N, C, 0.0, mask_rng(0, 0))
    assert plan.num_masked == 0


def test_shared_spatial_mask_duplicates_columns():
    plan = random_patch_mask(N, C, 0.5, mask_rng(3, 0), independent_spatial=False)
    for j in range(1, C):
        assert torch.equal(plan.mask[:, 0], plan.mask[:, j])


def test_independent_spatial_masks_differ_across_channels():
    differing = 0
    for draw in range(50):
        plan = random_patch_mask(N, C, 0.5, mask_rng(3, draw))
        differing += int(not torch.equal(plan.mask[:, 0], plan.mask[:, 1]))
    assert differing >= 45


def test_dynamic_channel_mask_never_masks_every_channel():
    for draw in range(500):
        plan = dynamic_channel_mask(N, C, mask_rng(1, draw))
        assert len(plan.masked_channels) < C
        assert plan.num_masked == len(plan.masked_channels) * N


def test_single_channel_dynamic_mask_is_empty():
    plan = dynamic_channel_mask(N, 1, mask_rng(0, 0))
    assert plan.num_masked == 0


def test_dcp_branch_rule():
    cfg = MaskConfig(p_patch=0.3, p_channel=0.2)
    assert dcp_branch(0.1, cfg) == MaskBranch.PATCH_ONLY
    assert dcp_branch(0.3, cfg) == MaskBranch.CHANNEL_ONLY
    assert dcp_branch(0.49, cfg) == MaskBranch.CHANNEL_ONLY
    assert dcp_branch(0.5, cfg) == MaskBranch.COMBINED


def test_dcp_combination_always_combines():
    cfg = MaskConfig.dcp_combination(seed=2)
    for draw in range(100):
        plan = dcp_mask(N, C, cfg, mask_rng(cfg.seed, draw))
        assert plan.branch == MaskBranch.COMBINED


def test_combined_plan_is_union_of_constituents():
    cfg = MaskConfig.dcp_combination(seed=5)
    for draw in range(200):
        plan = dcp_mask(N, C, cfg, mask_rng(cfg.seed, draw))
        assert torch.equal(plan.mask, plan.patch_component | plan.channel_component)


def test_combined_masked_fraction_for_quarter_patch_ratio():
    cfg = MaskConfig.dcp_combination(seed=0)
    plans = draw_plans(N, C, cfg, 0, 4000)
    fraction = np.mean([p.num_masked / (N * C) for p in plans])
    # 1 - (1 - 0.25) * (1 - E[k]/c) with E[k] = 1.5
    assert fraction == pytest.approx(1 - 0.75 * (1 - 1.5 / C), abs=0.02)


def test_dcp_requires_dcp_strategy():
    cfg = MaskConfig(strategy="RANDOM_PATCH_FIXED")
    with pytest.raises(MaskingError):
        dcp_mask(N, C, cfg, mask_rng(0, 0))


def test_same_seed_and_draw_give_same_plan():
    cfg = MaskConfig.dcp_alternate(seed=11)
    a = make_mask(N, C, cfg, mask_rng(11, 42))
    b = make_mask(N, C, cfg, mask_rng(11, 42))
    assert torch.equal(a.mask, b.mask)
    assert a.branch == b.branch
    assert a.seed_trace == b.seed_trace


def test_draw_plans_is_one_plan_per_image():
    cfg = MaskConfig.dcp_alternate(seed=0)
    plans = draw_plans(N, C, cfg, 0, 64)
    branches = Counter(p.branch for p in plans)
    # per-image draws mix branches within a batch
    assert branches[MaskBranch.PATCH_ONLY] > 0
    assert branches[MaskBranch.CHANNEL_ONLY] > 0


def test_draw_plans_continue_the_draw_counter():
    cfg = MaskConfig.dcp_alternate(seed=0)
    whole = draw_plans(N, C, cfg, 0, 10)
    tail = draw_plans(N, C, cfg, 6, 4)
    for a, b in zip(whole[6:], tail):
        assert torch.equal(a.mask, b.mask)


def test_channel_fixed_mask_count():
    plan = channel_fixed_mask(N, C, 0.5, mask_rng(0, 0))
    assert len(plan.masked_channels) == 2


def test_random_patch_dynamic_uses_listed_ratios():
    cfg = MaskConfig(strategy="RANDOM_PATCH_DYNAMIC", dynamic_ratios=(0.25, 0.75))
    counts = set()
    for draw in range(100):
        plan = baseline_mask(N, C, cfg, mask_rng(0, draw))
        counts.add(int(plan.mask[:, 0].sum()))
    assert counts == {4, 12}


def test_channel_plus_patch_fixed_is_union():
    cfg = MaskConfig(strategy="CHANNEL_PLUS_PATCH_FIXED", r_p=0.5, r_c=0.25)
    plan = baseline_mask(N, C, cfg, mask_rng(0, 0))
    assert plan.branch == MaskBranch.COMBINED
    assert len(plan.masked_channels) >= 1
    assert torch.equal(plan.mask, plan.patch_component | plan.channel_component)


def test_baseline_mask_rejects_dcp():
    with pytest.raises(MaskingError):
        baseline_mask(N, C, MaskConfig(), mask_rng(0, 0))


# sampler statistics over 10,000 seeded draws
def test_sampler_statistics_over_many_draws():
    draws = 10000

    alternate = MaskConfig.dcp_alternate(seed=0)
    plans = draw_plans(N, C, alternate, 0, draws)
    branches = Counter(p.branch for p in plans)
    assert branches[MaskBranch.PATCH_ONLY] / draws == pytest.approx(0.5, abs=0.02)
    assert branches[MaskBranch.CHANNEL_ONLY] / draws == pytest.approx(0.5, abs=0.02)

    for plan in plans:
        if plan.branch == MaskBranch.PATCH_ONLY:
            assert plan.mask.sum(dim=0).tolist() == [12] * C

    k_values = [len(p.masked_channels) for p in plans if p.branch == MaskBranch.CHANNEL_ONLY]
    counts = np.bincount(k_values, minlength=C)
    assert chisquare(counts).pvalue > 0.01


def test_patch_mask_frequency_is_uniform_over_positions():
    draws = 20000
    rng = mask_rng(0, 0)
    counts = torch.zeros(N, C)
    for _ in range(draws):
        counts += random_patch_mask(N, C, 0.75, rng).mask.to(torch.float32)

    frequency = counts / draws
    assert torch.all((frequency - 0.75).abs() <= 0.02)


def test_every_channel_subset_of_a_size_is_equally_likely():
    rng = mask_rng(1, 0)
    subsets = Counter()
    for _ in range(12000):
        subsets[tuple(sorted(dynamic_channel_mask(N, C, rng).masked_channels))] += 1

    for k in range(1, C):
        observed = [subsets[s] for s in combinations(range(C), k)]
        assert chisquare(observed).pvalue > 0.001


def test_hcs_dynamic_matches_dynamic_channel_mask():
    draws = 5000
    hcs = MaskConfig(strategy="HCS_DYNAMIC", seed=2)
    rng = mask_rng(3, 0)

    from_strategy = Counter(len(p.masked_channels) for p in draw_plans(N, C, hcs, 0, draws))
    direct = Counter(len(dynamic_channel_mask(N, C, rng).masked_channels) for _ in range(draws))

    table = [[from_strategy[k] for k in range(C)], [direct[k] for k in range(C)]]
    assert chi2_contingency(table).pvalue > 0.001


def test_independent_columns_overlap_like_hypergeometric():
    draws = 8000
    masked = int(N * 0.75)
    rng = mask_rng(4, 0)

    overlaps = Counter()
    equal = 0
    for _ in range(draws):
        mask = random_patch_mask(N, C, 0.75, rng, independent_spatial=True).mask
        for a, b in combinations(range(C), 2):
            shared = int((mask[:, a] & mask[:, b]).sum())
            overlaps[shared] += 1
            equal += shared == masked

    pairs = draws * C * (C - 1) // 2
    support = range(2 * masked - N, masked + 1)
    expected = [hypergeom.pmf(s, N, masked, masked) * pairs for s in support]
    observed = [overlaps[s] for s in support]
    assert sum(observed) == pairs
    assert chisquare(observed, expected).pvalue > 0.001

    # identical columns: one chance in C(16, 12)
    assert equal / pairs == pytest.approx(1 / 1820, abs=5e-4)
