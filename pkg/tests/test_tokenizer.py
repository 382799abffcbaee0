import pytest
import torch

from mci_mae.tokenizer import (
    ChannelTokenizer,
    MultiChannelImage,
    PatchConfig,
    TokenizerError,
    TokenKind,
    UnknownChannelError,
    extract_patches,
    patchify,
    token_meta,
    unpatchify,
)

from utils.factories import small_model_config


def test_patch_config_counts_positions():
    cfg = PatchConfig(p=8, image_size=(32, 64))
    assert cfg.grid == (4, 8)
    assert cfg.n == 32


def test_patch_config_rejects_indivisible_size():
    with pytest.raises(TokenizerError):
        PatchConfig(p=5, image_size=(32, 32))


def test_image_rejects_duplicate_channel_ids():
    with pytest.raises(TokenizerError):
        MultiChannelImage(torch.zeros(2, 8, 8), (3, 3))


def test_image_rejects_non_finite_pixels():
    pixels = torch.zeros(1, 8, 8)
    pixels[0, 0, 0] = float("nan")
    with pytest.raises(TokenizerError):
        MultiChannelImage(pixels, (0,))


def test_select_channels_keeps_requested_order(random_image):
    picked = random_image.select_channels((2, 0))
    assert picked.channel_ids == (2, 0)
    assert torch.equal(picked.pixels[0], random_image.pixels[2])
    assert torch.equal(picked.pixels[1], random_image.pixels[0])


def test_select_channels_unknown_id(random_image):
    with pytest.raises(UnknownChannelError):
        random_image.select_channels((7,))


def test_extract_patches_layout():
    pixels = torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(2, 4, 4)
    patches = extract_patches(pixels, 2)

    assert patches.shape == (4, 2, 4)
    # position 1 is the top-right 2x2 block of channel 0
    assert patches[1, 0].tolist() == [2.0, 3.0, 6.0, 7.0]
    # position 2 is the bottom-left block of channel 1
    assert patches[2, 1].tolist() == [24.0, 25.0, 28.0, 29.0]


def test_unpatchify_inverts_extract_patches(random_image):
    cfg = PatchConfig(p=4, d=16, l=2, image_size=(16, 16))
    patches = extract_patches(random_image.pixels, 4)
    restored = unpatchify(patches, cfg, channel_ids=random_image.channel_ids)

    assert torch.equal(restored.pixels, random_image.pixels)
    assert restored.channel_ids == random_image.channel_ids


def test_patchify_sequence_layout(small_model, random_image):
    cfg = small_model.cfg.patch
    tokens = patchify(random_image, cfg, small_model)

    n, c, l = 16, 3, cfg.l
    assert len(tokens) == 1 + l + n * c
    assert tokens.embeddings.shape == (1 + l + n * c, cfg.d)
    assert tokens.meta[0].kind == TokenKind.CLS
    assert all(m.kind == TokenKind.MEMORY for m in tokens.meta[1 : 1 + l])

    # channel-major, position varying fastest
    first_patch = tokens.meta[1 + l]
    assert (first_patch.channel, first_patch.position) == (0, 0)
    second_channel = tokens.meta[1 + l + n]
    assert (second_channel.channel, second_channel.position) == (1, 0)


def test_patch_token_is_projection_plus_position_plus_channel(small_model, random_image):
    cfg = small_model.cfg.patch
    tok = small_model.tokenizer
    tokens = patchify(random_image, cfg, small_model)

    j, i = 2, 5
    patch = extract_patches(random_image.pixels, cfg.p)[i, j]
    expected = tok.patch_proj(patch) + tok.pos_embed[i] + tok.channel_tokens[random_image.channel_ids[j]]

    index = 1 + cfg.l + j * tokens.n + i
    assert torch.allclose(tokens.embeddings[index], expected, atol=1e-6)


def test_channel_permutation_permutes_tokens(small_model, random_image):
    cfg = small_model.cfg.patch
    permuted = random_image.select_channels((2, 0, 1))

    a = patchify(random_image, cfg, small_model).embeddings
    b = patchify(permuted, cfg, small_model).embeddings

    n, special = 16, 1 + cfg.l
    assert torch.allclose(a[:special], b[:special])
    # channel 2 comes first in the permuted image
    assert torch.allclose(a[special + 2 * n : special + 3 * n], b[special : special + n], atol=1e-6)


def test_unknown_channel_raises(small_model):
    image = MultiChannelImage(torch.zeros(1, 16, 16), (5,))
    with pytest.raises(UnknownChannelError) as e:
        patchify(image, small_model.cfg.patch, small_model)
    assert e.value.channel_id == 5


def test_channel_id_outside_table_cannot_be_registered():
    tokenizer = ChannelTokenizer(small_model_config().patch)
    with pytest.raises(TokenizerError):
        tokenizer.register_channels([8])


def test_wrong_image_size_raises(small_model):
    image = MultiChannelImage(torch.zeros(3, 8, 8), (0, 1, 2))
    with pytest.raises(TokenizerError):
        patchify(image, small_model.cfg.patch, small_model)


def test_token_meta_without_memory_tokens():
    meta = token_meta(2, (4, 9), 0)
    assert [m.kind for m in meta] == [TokenKind.CLS] + [TokenKind.PATCH] * 4
    assert [(m.channel, m.position) for m in meta[1:]] == [(4, 0), (4, 1), (9, 0), (9, 1)]
