import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp.nn import (
    AttentionConfig, ConfigError, FeedForward, LayerNorm, MultiHeadAttention, ShapeError,
    TensorSpec, causal_mask, conv2d, init_weights, layer_norm,
)
from gridvlp.verify import finite_diff_grad, relative_error


def attention(d=8, heads=2, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    attn = MultiHeadAttention(AttentionConfig(d, heads, 4 * d, 0.0)).to(dtype)
    init_weights(attn, std=0.3)
    return attn.eval()


def analytic_grad(loss_fn, param):
    param.grad = None
    loss_fn().backward()
    return param.grad.detach().clone()


# --- config and specs -----------------------------------------------------------

def test_twelve_heads_on_256_rejected_with_hint():
    with pytest.raises(ConfigError, match="264"):
        AttentionConfig(256, 12)


def test_default_config_is_integral():
    cfg = AttentionConfig()
    assert (cfg.hidden_size, cfg.num_heads, cfg.ffn_size) == (256, 8, 1024)
    assert cfg.head_dim == 32
    assert AttentionConfig(264, 12).head_dim == 22


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_dropout_range(rate):
    with pytest.raises(ConfigError):
        AttentionConfig(dropout_rate=rate)


def test_tensor_spec_rejects_nonpositive_dims():
    with pytest.raises(ShapeError):
        TensorSpec((2, 0))


def test_tensor_spec_check():
    spec = TensorSpec((None, 3), torch.float32)
    spec.check(torch.zeros(5, 3))
    with pytest.raises(ShapeError):
        spec.check(torch.zeros(5, 4))
    with pytest.raises(ShapeError):
        spec.check(torch.zeros(5, 3, 1))
    with pytest.raises(ShapeError):
        spec.check(torch.zeros(5, 3, dtype=torch.float64))


# --- attention ----------------------------------------------------------------------

def test_single_token_attention_is_value_projection():
    attn = attention()
    x = torch.randn(1, 8, dtype=torch.float64)
    out = attn(x, x, x, torch.tensor([[True]]))
    expected = attn.out_proj(attn.v_proj(x))
    assert torch.equal(out, expected)


def test_causal_row_zero_ignores_future():
    attn = attention()
    x = torch.randn(4, 8, dtype=torch.float64)
    mask = causal_mask(4)
    base = attn(x, x, x, mask)
    y = x.clone()
    y[1:] = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(attn(y, y, y, mask)[0], base[0])


def test_fully_masked_row_returns_zeros_and_counts():
    attn = attention()
    x = torch.randn(3, 8, dtype=torch.float64)
    mask = torch.ones(3, 3, dtype=torch.bool)
    mask[1] = False
    out = attn(x, x, x, mask)
    assert torch.isfinite(out).all()
    assert torch.equal(out[1], torch.zeros(8, dtype=torch.float64))
    assert attn.empty_rows == 1


def test_fully_masked_row_has_finite_gradients():
    attn = attention()
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    mask = torch.zeros(3, 3, dtype=torch.bool)
    mask[0, 0] = True
    attn(x, x, x, mask).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_mask_shape_checked_before_compute():
    attn = attention()
    x = torch.randn(3, 8, dtype=torch.float64)
    with pytest.raises(ShapeError):
        attn(x, x, x, torch.ones(3, 2, dtype=torch.bool))
    with pytest.raises(ShapeError):
        attn(x, torch.randn(3, 6, dtype=torch.float64), x)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(5))), st.integers(0, 2**16))
def test_full_mask_permutation_equivariant_in_keys(perm, seed):
    attn = attention(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(2, 8, generator=g, dtype=torch.float64)
    kv = torch.randn(5, 8, generator=g, dtype=torch.float64)
    pos = torch.randn(5, 8, generator=g, dtype=torch.float64)
    base = attn(q, kv + pos, kv)
    p = torch.tensor(perm)
    permuted = attn(q, kv[p] + pos[p], kv[p])
    torch.testing.assert_close(permuted, base, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("target", ["query", "key_value", "weight"])
def test_attention_gradients_match_finite_differences(target):
    attn = attention(seed=3)
    q = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    kv = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    mask = torch.rand(3, 4, generator=torch.Generator().manual_seed(1)) > 0.3
    mask[:, 0] = True
    w = torch.randn(3, 8, dtype=torch.float64)
    param = {"query": q, "key_value": kv, "weight": attn.q_proj.weight}[target]

    def loss():
        return (attn(q, kv, kv, mask) * w).sum()

    fd = finite_diff_grad(loss, param)
    assert relative_error(analytic_grad(loss, param), fd.grad) < 1e-4


def test_feed_forward_gradient():
    torch.manual_seed(0)
    ffn = FeedForward(AttentionConfig(8, 2, 16, 0.0)).double()
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)

    def loss():
        return ffn(x).pow(2).sum()

    assert relative_error(analytic_grad(loss, x), finite_diff_grad(loss, x).grad) < 1e-4


# --- convolution ----------------------------------------------------------------------

def test_identity_1x1_conv():
    x = torch.randn(3, 5, 6)
    kernel = torch.eye(3).view(3, 3, 1, 1)
    assert torch.equal(conv2d(x, kernel), x)


def test_all_ones_window_sum():
    out = conv2d(torch.ones(1, 3, 3), torch.ones(1, 1, 3, 3))
    assert out.shape == (1, 1, 1)
    assert out.item() == 9.0


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 2, 1), (8, 1, 1, 0), (5, 5, 1, 2), (9, 3, 3, 0)])
def test_conv_output_size_formula(h, k, s, p):
    out = conv2d(torch.randn(2, h, h), torch.randn(4, 2, k, k), stride=s, padding=p)
    assert out.shape[-1] == (h + 2 * p - k) // s + 1


def test_conv_invalid_output_raises():
    with pytest.raises(ConfigError):
        conv2d(torch.randn(1, 2, 2), torch.randn(1, 1, 3, 3))
    with pytest.raises(ConfigError):
        conv2d(torch.randn(1, 4, 4), torch.randn(1, 1, 3, 3), stride=0)
    with pytest.raises(ShapeError):
        conv2d(torch.randn(2, 4, 4), torch.randn(1, 1, 3, 3))


@pytest.mark.parametrize("wrt", ["input", "kernel"])
def test_conv_gradients(wrt):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 5, generator=g, dtype=torch.float64, requires_grad=True)
    kernel = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 3, 3, generator=g, dtype=torch.float64)
    param = x if wrt == "input" else kernel

    def loss():
        return (conv2d(x, kernel, stride=2, padding=1) * w).sum()

    assert relative_error(analytic_grad(loss, param), finite_diff_grad(loss, param).grad) < 1e-4


# --- layer norm -------------------------------------------------------------------------

def test_constant_row_normalizes_to_zero():
    assert torch.equal(layer_norm(torch.full((2, 5), 3.0)), torch.zeros(2, 5))


def test_symmetric_row_unchanged():
    out = layer_norm(torch.tensor([[1.0, -1.0]], dtype=torch.float64))
    torch.testing.assert_close(out, torch.tensor([[1.0, -1.0]], dtype=torch.float64))


def test_layer_norm_requires_two_features():
    with pytest.raises(ShapeError):
        layer_norm(torch.ones(3, 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=16))
def test_layer_norm_moments(row):
    x = torch.tensor([row], dtype=torch.float64)
    out = layer_norm(x)
    assert abs(float(out.mean())) < 1e-9
    if float(x.var(unbiased=False)) > 1e-6:
        assert abs(float(out.pow(2).mean()) - 1.0) < 1e-6


def test_layer_norm_gradient():
    torch.manual_seed(0)
    norm = LayerNorm(6).double()
    x = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 6, dtype=torch.float64)

    def loss():
        return (norm(x) * w).sum()

    for param in (x, norm.weight):
        assert relative_error(analytic_grad(loss, param), finite_diff_grad(loss, param).grad) < 1e-4


def test_init_weights_conventions():
    torch.manual_seed(0)
    mods = torch.nn.Sequential(torch.nn.Linear(64, 64), torch.nn.Embedding(50, 64),
                               torch.nn.Conv2d(8, 8, 3))
    init_weights(mods)
    lin, emb, conv = (m.weight.detach() for m in mods)
    assert float(lin.abs().max()) <= 0.04 + 1e-7
    assert float(emb.abs().max()) <= 0.04 + 1e-7
    assert torch.equal(mods[0].bias.detach(), torch.zeros(64))
    assert abs(float(conv.std()) - (2 / 72) ** 0.5) < 0.03
