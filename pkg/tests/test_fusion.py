import pytest
import torch

from mci_mae.encoder import EncodedBatch, encode
from mci_mae.fusion import FusionError, HybridTokenFusion, PoolMode, fuse, pool
from mci_mae.masking import MaskConfig, make_mask, mask_rng
from mci_mae.tokenizer import patchify

D = 16


def _batch(seed, num_patches=6, l=2, padded=0):
    generator = torch.Generator().manual_seed(seed)
    special = 1 + l
    embeddings = torch.randn(2, special + num_patches, D, generator=generator)
    padding = torch.zeros(2, special + num_patches, dtype=torch.bool)
    slot_index = torch.arange(num_patches).repeat(2, 1)
    if padded:
        padding[1, -padded:] = True
        slot_index[1, -padded:] = -1
    return EncodedBatch(embeddings, padding, slot_index, special)


@pytest.fixture
def fusion():
    torch.manual_seed(0)
    return HybridTokenFusion(D, mlp_ratio=1.0)


def test_pool_mode_parse():
    assert PoolMode.parse("cls+avg") == PoolMode.CLS_PLUS_AVG
    assert PoolMode.parse("hybrid") == PoolMode.HYBRID
    with pytest.raises(FusionError):
        PoolMode.parse("max")


def test_fuse_output_shape(fusion):
    assert fuse(_batch(0), fusion).shape == (2, D)


def test_fuse_ignores_memory_outputs(fusion):
    batch = _batch(1)
    changed = batch.embeddings.clone()
    changed[:, 1:3] = torch.randn(2, 2, D) * 50

    with torch.no_grad():
        a = fuse(batch, fusion)
        b = fuse(batch.with_embeddings(changed), fusion)

    assert torch.equal(a, b)


def test_fuse_ignores_padding(fusion):
    batch = _batch(2, padded=2)
    changed = batch.embeddings.clone()
    changed[1, -2:] = 1e3

    with torch.no_grad():
        a = fuse(batch, fusion)
        b = fuse(batch.with_embeddings(changed), fusion)

    assert torch.equal(a, b)


def test_gate_is_in_unit_interval(fusion):
    gate = fusion.gate(_batch(3).patches)
    assert bool(((gate > 0) & (gate < 1)).all())


def test_fuse_is_gated_cls_through_mlp(fusion):
    batch = _batch(4)
    expected = fusion.mlp(batch.cls * fusion.gate(batch.patches))
    assert torch.allclose(fuse(batch, fusion), expected)


def test_fuse_single_sequence(small_model, random_image):
    tokens = patchify(random_image, small_model.cfg.patch, small_model)
    plan = make_mask(16, 3, MaskConfig.dcp_alternate(seed=0), mask_rng(0, 0))
    enc = encode(tokens, plan, small_model)

    single = fuse(enc, small_model)
    assert single.shape == (16,)
    assert torch.allclose(single, fuse(enc.to_batch(), small_model)[0])


def test_fuse_needs_patch_tokens(fusion):
    with pytest.raises(FusionError):
        fuse(_batch(0, num_patches=0), fusion)


def test_cls_pooling_returns_cls():
    batch = _batch(5)
    assert torch.equal(pool(batch, "CLS"), batch.cls)


def test_average_pooling_skips_padding():
    batch = _batch(6, padded=2)
    avg = pool(batch, PoolMode.AVG)

    assert torch.allclose(avg[0], batch.patches[0].mean(dim=0))
    assert torch.allclose(avg[1], batch.patches[1, :4].mean(dim=0))
    assert torch.allclose(pool(batch, "CLS_PLUS_AVG"), batch.cls + avg)


def test_hybrid_pooling_matches_fuse(fusion):
    batch = _batch(7)
    assert torch.equal(pool(batch, "HYBRID", fusion), fuse(batch, fusion))


def test_fuse_is_invariant_to_patch_order(fusion):
    batch = _batch(5, num_patches=8)
    special = batch.num_special
    order = torch.randperm(8, generator=torch.Generator().manual_seed(5))

    embeddings = batch.embeddings.clone()
    embeddings[:, special:] = batch.embeddings[:, special:][:, order]
    shuffled = EncodedBatch(embeddings, batch.padding, batch.slot_index[:, order], special)

    with torch.no_grad():
        assert torch.allclose(fuse(batch, fusion), fuse(shuffled, fusion), atol=1e-6)


def test_patch_query_receives_gradient(fusion):
    fuse(_batch(6), fusion).pow(2).sum().backward()

    assert fusion.q_patch.grad is not None
    assert fusion.q_patch.grad.abs().sum() > 0
