import math

import numpy as np
import pytest
import torch

from gridvlp.encoder import (
    IGNORE, CrossModalEncoder, LossCounters, itm_loss, mlm_accuracy, mlm_loss, sample_mlm_mask,
)
from gridvlp.nn import AttentionConfig, ShapeError
from gridvlp.text import collate_tokens, tokenize
from gridvlp.visual import GridFeatureMap, positional_encoding_2d

from conftest import make_tiny

CAPTION = "a red circle left of a blue square"


def grid(features, shape):
    return GridFeatureMap(features, shape, positional_encoding_2d(shape, features.shape[-1],
                                                                  dtype=features.dtype))


def encoder(d=16, layers=2, seed=0):
    torch.manual_seed(seed)
    return CrossModalEncoder(AttentionConfig(d, 2, 32, 0.0), layers).double().eval()


def test_spans_and_cls(tiny_model, vocab):
    tokens = tiny_model.tokens([CAPTION])
    state = tiny_model.encode(torch.randn(1, 3, 64, 96), tokens)
    lt = tokens["token_ids"].shape[1]
    assert state.text_span == slice(0, lt)
    assert state.image_span == slice(lt, lt + 6)
    assert state.final.shape[1] == lt + 6
    assert torch.equal(state.cls_vector, state.final[:, 0])
    assert len(state.layer_outputs) == 2


def test_zero_image_single_cell(tiny_model):
    text = tiny_model.text_embed(tiny_model.tokens([CAPTION])["token_ids"])
    mask = torch.ones(text.shape[:2], dtype=torch.bool)
    state = tiny_model.encoder(text, mask, grid(torch.zeros(1, 1, 16), (1, 1)))
    assert torch.isfinite(state.text).all()
    assert tiny_model.itm_logits(state).shape == (1, 2)


def test_d_mismatch_rejected():
    enc = encoder()
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 3, 16, dtype=torch.float64), torch.ones(1, 3, dtype=torch.bool),
            grid(torch.randn(1, 4, 8, dtype=torch.float64), (2, 2)))


def test_permuting_grid_rows_permutes_outputs():
    enc = encoder()
    text = torch.randn(1, 4, 16, dtype=torch.float64)
    mask = torch.ones(1, 4, dtype=torch.bool)
    feats = torch.randn(1, 6, 16, dtype=torch.float64)
    g = grid(feats, (2, 3))
    base = enc(text, mask, g).final
    perm = torch.tensor([0, 4, 2, 3, 1, 5])
    swapped = GridFeatureMap(feats[:, perm], (2, 3), g.pos_encoding[perm])
    out = enc(text, mask, swapped).final
    torch.testing.assert_close(out[:, 4 + perm], base[:, 4:], rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(out[:, :4], base[:, :4], rtol=1e-12, atol=1e-12)


def test_blocking_image_makes_mlm_image_independent(tiny_model):
    tokens = tiny_model.tokens([CAPTION])
    a = torch.randn(1, 3, 64, 64)
    b = torch.randn(1, 3, 64, 64)
    la = tiny_model.mlm_logits(tiny_model.encode(a, tokens, block_text_to_image=True))
    lb = tiny_model.mlm_logits(tiny_model.encode(b, tokens, block_text_to_image=True))
    assert torch.equal(la, lb)
    full_a = tiny_model.mlm_logits(tiny_model.encode(a, tokens))
    full_b = tiny_model.mlm_logits(tiny_model.encode(b, tokens))
    assert not torch.equal(full_a, full_b)


def test_positional_codes_enter_every_layer(tiny_model):
    tokens = tiny_model.tokens([CAPTION])
    images = torch.randn(1, 3, 64, 64)
    base = tiny_model.encode(images, tokens).final
    for layer in range(tiny_model.cfg.encoder_layers):
        dropped = tiny_model.encode(images, tokens, drop_pos_at_layer=layer).final
        assert not torch.equal(dropped, base)


def test_padding_rows_do_not_leak(tiny_model):
    short = tiny_model.tokens(["a red circle"])
    padded = tiny_model.tokens(["a red circle", CAPTION])
    images = torch.randn(1, 3, 64, 64).expand(2, -1, -1, -1)
    s1 = tiny_model.encode(images[:1], short)
    s2 = tiny_model.encode(images, padded)
    torch.testing.assert_close(s2.cls_vector[0], s1.cls_vector[0], rtol=1e-5, atol=1e-5)


# --- masking -------------------------------------------------------------------------

def test_mask_rate_and_split(vocab):
    seqs = [tokenize(CAPTION, vocab)] * 2000
    batch = collate_tokens(seqs, vocab.pad_id)
    corrupted, mask = sample_mlm_mask(batch["token_ids"], batch["attention_mask"], vocab,
                                      np.random.default_rng(0))
    eligible = 2000 * 8
    rate = len(mask.positions) / eligible
    assert abs(rate - 0.15) < 0.01
    kinds = np.array(mask.corruption)
    assert abs(np.mean(kinds == "MASK") - 0.8) < 0.03
    assert abs(np.mean(kinds == "RANDOM") - 0.1) < 0.03
    for b, t in mask.positions:
        assert 0 < t < 9
    assert (corrupted[:, 0] == vocab.cls_id).all() and (corrupted[:, 9] == vocab.sep_id).all()


def test_specials_and_padding_never_masked(vocab):
    batch = collate_tokens([tokenize("red", vocab), tokenize(CAPTION, vocab)], vocab.pad_id)
    _, mask = sample_mlm_mask(batch["token_ids"], batch["attention_mask"], vocab,
                              np.random.default_rng(1), rate=1.0)
    for b, t in mask.positions:
        assert bool(batch["attention_mask"][b, t])
        assert int(batch["token_ids"][b, t]) not in vocab.special_ids
    assert len(mask.positions) == 1 + 8


def test_labels_restricted_to_rows(vocab):
    batch = collate_tokens([tokenize(CAPTION, vocab)] * 2, vocab.pad_id)
    _, mask = sample_mlm_mask(batch["token_ids"], batch["attention_mask"], vocab,
                              np.random.default_rng(2), rate=1.0)
    labels = mask.labels((2, 10), rows={1})
    assert (labels[0] == IGNORE).all()
    assert (labels[1, 1:9] != IGNORE).all()


# --- losses --------------------------------------------------------------------------

def test_uniform_mlm_is_log_vocab():
    labels = torch.tensor([[IGNORE, 5, IGNORE, 9]])
    assert float(mlm_loss(torch.zeros(1, 4, 50), labels)) == pytest.approx(math.log(50))


def test_perfect_mlm_is_zero():
    logits = torch.full((1, 3, 20), -50.0, dtype=torch.float64)
    logits[0, 1, 7] = 50.0
    labels = torch.tensor([[IGNORE, 7, IGNORE]])
    assert float(mlm_loss(logits, labels)) == pytest.approx(0.0, abs=1e-12)
    assert mlm_accuracy(logits, labels) == 1.0


def test_no_masked_positions_gives_zero_and_counts():
    before = LossCounters.empty_mlm_batches
    loss = mlm_loss(torch.randn(2, 3, 10), torch.full((2, 3), IGNORE))
    assert float(loss) == 0.0
    assert LossCounters.empty_mlm_batches == before + 1


def test_unmasked_logits_do_not_matter():
    logits = torch.randn(2, 5, 30)
    labels = torch.full((2, 5), IGNORE)
    labels[0, 2] = 4
    labels[1, 3] = 11
    zeroed = logits.clone()
    keep = labels != IGNORE
    zeroed[~keep] = 0
    assert torch.equal(mlm_loss(logits, labels), mlm_loss(zeroed, labels))


def test_mlm_head_tied_to_token_table(tiny_model):
    assert tiny_model.mlm_head.embedding[0] is tiny_model.text_embed.token
    names = [n for n, _ in tiny_model.mlm_head.named_parameters()]
    assert not any("embedding" in n for n in names)


def test_untrained_itm_near_chance(tiny_model):
    labels = torch.tensor([True, False] * 4)
    with torch.no_grad():
        state = tiny_model.encode(torch.randn(8, 3, 64, 64), tiny_model.tokens([CAPTION] * 8))
        loss = itm_loss(tiny_model.itm_logits(state), labels)
    assert float(loss) == pytest.approx(math.log(2), abs=0.05)


def test_mlm_gradient_reaches_stem(vocab):
    model = make_tiny(vocab)
    model.train()
    tokens = model.tokens([CAPTION] * 2)
    corrupted, mask = sample_mlm_mask(tokens["token_ids"], tokens["attention_mask"], vocab,
                                      np.random.default_rng(0), rate=0.5)
    tokens["token_ids"] = corrupted
    state = model.encode(torch.randn(2, 3, 64, 64), tokens)
    mlm_loss(model.mlm_logits(state), mask.labels(tuple(corrupted.shape))).backward()
    assert float(model.visual.backbone.stem.weight.grad.norm()) > 0
