import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from wirehallu import neural_core as nc


def test_spec_validation():
    with pytest.raises(ValueError):
        nc.TensorSpec((2, 0))
    with pytest.raises(ValueError):
        nc.AttentionConfig(6, 4)
    assert nc.AttentionConfig(8, 2).head_dim == 4
    with pytest.raises(ValueError):
        nc.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        nc.TrainConfig(batch_size=0)


# --- convolution


def test_conv_identity_kernel():
    x = torch.randn(2, 3, 5, 7)
    k = torch.zeros(3, 3, 3, 3)
    for c in range(3):
        k[c, c, 1, 1] = 1
    assert torch.equal(nc.conv2d_forward(x, k), x)


def test_conv_zero_kernel_gives_bias():
    x = torch.randn(1, 2, 4, 4)
    out = nc.conv2d_forward(x, torch.zeros(3, 2, 3, 3), torch.tensor([1.5, -2.0, 0.0]))
    assert torch.all(out[0, 0] == 1.5) and torch.all(out[0, 1] == -2.0) and torch.all(out[0, 2] == 0)


def test_conv_window_sums():
    out = nc.conv2d_forward(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3))
    expected = torch.tensor([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    assert torch.equal(out[0, 0], expected)


@pytest.mark.parametrize(
    "x, k",
    [
        (torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3)),
        (torch.zeros(2, 4, 4), torch.zeros(1, 2, 3, 3)),
        (torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 5, 5)),
    ],
)
def test_conv_shape_errors(x, k):
    with pytest.raises(ValueError):
        nc.conv2d_forward(x, k)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_conv_linearity(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(2, 3, 6, 6, generator=g), torch.randn(2, 3, 6, 6, generator=g)
    k = torch.randn(4, 3, 3, 3, generator=g)
    lhs = nc.conv2d_forward(a * x + b * y, k)
    rhs = a * nc.conv2d_forward(x, k) + b * nc.conv2d_forward(y, k)
    scale = rhs.abs().max().clamp_min(1.0)
    assert ((lhs - rhs).abs().max() / scale) < 1e-5


# --- attention


def _explicit_attention(x, wq, wk, wv, wo, heads):
    """Reference softmax attention written out with numpy loops."""
    x = x.astype(np.float64)
    b, n, d = x.shape
    dh = d // heads
    out = np.zeros_like(x)
    for bi in range(b):
        q, k, v = x[bi] @ wq, x[bi] @ wk, x[bi] @ wv
        cat = np.zeros((n, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            s /= s.sum(axis=1, keepdims=True)
            cat[:, sl] = s @ v[:, sl]
        out[bi] = cat @ wo
    return out


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_explicit_softmax(heads):
    g = torch.Generator().manual_seed(heads)
    x = torch.randn(3, 10, 8, generator=g, dtype=torch.float64)
    ws = [torch.randn(8, 8, generator=g, dtype=torch.float64) * 0.5 for _ in range(4)]
    got = nc.attention_forward(x, *ws, num_heads=heads).numpy()
    want = _explicit_attention(x.numpy(), *[w.numpy() for w in ws], heads)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_attention_single_position():
    x = torch.randn(2, 1, 4, dtype=torch.float64)
    wq, wk, wv, wo = (torch.randn(4, 4, dtype=torch.float64) for _ in range(4))
    out = nc.attention_forward(x, wq, wk, wv, wo)
    torch.testing.assert_close(out, x @ wv @ wo)


def test_attention_uniform_when_query_key_zero():
    x = torch.randn(1, 6, 4, dtype=torch.float64)
    z = torch.zeros(4, 4, dtype=torch.float64)
    wv, wo = torch.randn(4, 4, dtype=torch.float64), torch.randn(4, 4, dtype=torch.float64)
    out = nc.attention_forward(x, z, z, wv, wo)
    want = (x[0] @ wv).mean(dim=0) @ wo
    for row in out[0]:
        torch.testing.assert_close(row, want)


@given(st.permutations(list(range(7))), st.integers(0, 1000))
def test_attention_permutation_equivariance(perm, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 7, 4, generator=g, dtype=torch.float64)
    ws = [torch.randn(4, 4, generator=g, dtype=torch.float64) for _ in range(4)]
    p = torch.tensor(perm)
    torch.testing.assert_close(nc.attention_forward(x[:, p], *ws), nc.attention_forward(x, *ws)[:, p])


@given(st.integers(0, 1000))
def test_attention_rows_in_convex_hull(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 9, 4, generator=g, dtype=torch.float64)
    eye = torch.eye(4, dtype=torch.float64)
    out = nc.attention_forward(x, torch.randn(4, 4, generator=g, dtype=torch.float64), eye.clone(), eye, eye)
    lo, hi = x.min(dim=1, keepdim=True).values, x.max(dim=1, keepdim=True).values
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)


def test_attention_bias_sets_weights_when_query_key_zero():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 5, 4, generator=g, dtype=torch.float64)
    z = torch.zeros(4, 4, dtype=torch.float64)
    wv, wo = torch.randn(4, 4, generator=g, dtype=torch.float64), torch.randn(4, 4, generator=g, dtype=torch.float64)
    bias = torch.randn(1, 5, 5, generator=g, dtype=torch.float64)
    out = nc.attention_forward(x, z, z, wv, wo, bias=bias).numpy()
    b = bias[0].numpy()
    wts = np.exp(b - b.max(axis=1, keepdims=True))
    wts /= wts.sum(axis=1, keepdims=True)
    want = np.einsum("ij,bjd->bid", wts, x.numpy() @ wv.numpy()) @ wo.numpy()
    np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)


def test_attention_zero_bias_is_no_bias():
    g = torch.Generator().manual_seed(4)
    x = torch.randn(1, 6, 4, generator=g, dtype=torch.float64)
    ws = [torch.randn(4, 4, generator=g, dtype=torch.float64) for _ in range(4)]
    bias = torch.zeros(2, 6, 6, dtype=torch.float64)
    torch.testing.assert_close(nc.attention_forward(x, *ws, num_heads=2, bias=bias), nc.attention_forward(x, *ws, num_heads=2))


def test_attention_shape_errors():
    w = torch.zeros(4, 4)
    with pytest.raises(ValueError):
        nc.attention_forward(torch.zeros(4, 4), w, w, w, w)
    with pytest.raises(ValueError):
        nc.attention_forward(torch.zeros(1, 3, 5), w, w, w, w)
    with pytest.raises(ValueError):
        nc.attention_forward(torch.zeros(1, 3, 4), w, w, w, w, num_heads=3)
    with pytest.raises(ValueError):
        nc.attention_forward(torch.zeros(1, 3, 4), w, w, w, w, bias=torch.zeros(1, 3, 2))


# --- gradient check


class _Vec(nn.Module):
    def __init__(self, n):
        super().__init__()
        self.x = nn.Parameter(torch.randn(n))


def test_gradient_check_quadratic():
    m = _Vec(80)
    err = nc.gradient_check(m, lambda mod: 0.5 * (mod.x**2).sum())
    assert err < 1e-6
    assert m.x.dtype == torch.float32


def test_gradient_check_constant_model():
    m = _Vec(10)
    assert nc.gradient_check(m, lambda mod: mod.x.sum() * 0.0) == 0.0


def test_gradient_check_restores_values():
    m = _Vec(20)
    before = m.x.detach().clone()
    nc.gradient_check(m, lambda mod: (mod.x**3).sum())
    torch.testing.assert_close(m.x.detach(), before)


def test_gradient_check_nonfinite():
    m = _Vec(3)
    with pytest.raises(FloatingPointError):
        nc.gradient_check(m, lambda mod: mod.x.sum() / 0.0)


def test_gradient_check_attention_conv_stack():
    torch.manual_seed(0)
    model = nn.Sequential(nc.Conv3x3(2, 4), nn.SiLU())
    attn = nc.SelfAttention(nc.AttentionConfig(4, 2))
    x = torch.randn(2, 2, 3, 5)

    class Stack(nn.Module):
        def __init__(self):
            super().__init__()
            self.conv, self.attn = model, attn

        def forward(self, x):
            h = self.conv(x).flatten(2).transpose(1, 2)
            return h + self.attn(h)

    m = Stack()
    err = nc.gradient_check(m, lambda mod: (mod(x.to(mod.attn.w_q.dtype)) ** 2).mean(), n_params=60)
    assert err < 1e-3


# --- optimizer


def test_adam_reaches_quadratic_minimum():
    w = nn.Parameter(torch.tensor([0.0]))
    opt = nc.make_optimizer([w], nc.TrainConfig(learning_rate=0.1))
    for _ in range(500):
        opt.zero_grad()
        loss = 0.5 * (w - 3.0) ** 2
        loss.sum().backward()
        opt.step()
    assert abs(w.item() - 3.0) < 1e-3


def test_cosine_schedule_floor():
    w = nn.Parameter(torch.zeros(1))
    cfg = nc.TrainConfig(learning_rate=1.0)
    opt = nc.make_optimizer([w], cfg)
    sched = nc.make_lr_schedule(opt, cfg, 10)
    for _ in range(10):
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] == pytest.approx(0.05)
    assert nc.make_lr_schedule(opt, nc.TrainConfig(cosine_decay=False), 10) is None


# --- helpers


def test_sinusoidal_embedding():
    e = nc.sinusoidal_embedding(torch.tensor([0, 1, 59]), 9)
    assert e.shape == (3, 9)
    assert torch.allclose(e[0, :4], torch.ones(4))
    assert torch.all(e[:, -1] == 0)


@given(st.integers(0, 1000))
def test_complex_channel_round_trip(seed):
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((3, 8, 32)) + 1j * rng.standard_normal((3, 8, 32))).astype(np.complex64)
    x = nc.complex_to_channels(h)
    assert x.shape == (3, 2, 8, 32)
    assert np.array_equal(nc.channels_to_complex(x), h)


# --- checkpoints


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    m = nn.Sequential(nc.Conv3x3(2, 3), nn.Linear(4, 2))
    p = nc.save_checkpoint(tmp_path / "m.ckpt", m, {"note": "x"})
    state, meta = nc.load_checkpoint(p)
    assert meta == {"note": "x"}
    for k, v in m.state_dict().items():
        assert torch.equal(state[k], v)
    assert nc.checkpoint_hash(m, {"note": "x"}) == nc.checkpoint_hash(m, {"note": "x"})


def test_checkpoint_header_layout():
    m = nc.Conv3x3(1, 1)
    raw = nc.checkpoint_bytes(m)
    assert raw[:8] == nc.CHECKPOINT_MAGIC
    version, hlen = np.frombuffer(raw[8:16], dtype="<u4")
    assert version == nc.CHECKPOINT_VERSION
    # 9 weights + 1 bias as little-endian float32
    assert len(raw) == 16 + hlen + 4 * 10


@pytest.mark.parametrize(
    "mutate",
    [lambda r: b"XXXXXXXX" + r[8:], lambda r: r[:-2], lambda r: r + b"\0\0\0\0"],
    ids=["magic", "truncated", "trailing"],
)
def test_checkpoint_corruption(mutate):
    raw = nc.checkpoint_bytes(nc.Conv3x3(2, 2))
    with pytest.raises(nc.CheckpointError):
        nc.parse_checkpoint(mutate(raw))
