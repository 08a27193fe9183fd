import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from m3g.errors import ConfigError, LengthNotDivisible, ModelMismatch, ShapeMismatch
from m3g.mgvqvae import (
    GranularitySpec, MgvqvaeModel, VQConfig, decode, decode_tokens, encode, geodesic_angles, load_checkpoint,
    load_token_stream, nearest_codes, normalized_conv, param_count, quantize, reconstruct, save_checkpoint,
    save_token_stream, straight_through, train_vqvae, vqvae_loss, width_for_budget,
)
from m3g.motion_data import matrix_to_rot6d, synth_corpus


def _zero_biases(model):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()


# normalized convolution

def test_normalized_conv_ks1_is_plain():
    x, w, b = torch.randn(10, 3), torch.randn(5, 3, 1), torch.randn(5)
    plain = F.conv1d(x.T[None], w, b)[0].T
    assert torch.equal(normalized_conv(x, w, b), plain)


def test_normalized_conv_pair_mean():
    x = torch.tensor([[1.0], [3.0], [5.0], [11.0]])
    y = normalized_conv(x, torch.ones(1, 1, 2), torch.zeros(1), stride=2)
    assert torch.allclose(y[:, 0], torch.tensor([2.0, 8.0]))


@pytest.mark.parametrize("ks", [1, 2, 3, 4, 7])
def test_normalized_conv_constant_input(ks):
    y = normalized_conv(torch.full((16, 1), 2.5), torch.ones(1, 1, ks))
    assert torch.allclose(y, torch.full_like(y, 2.5))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2), st.integers(0, 1000))
def test_normalized_conv_times_ks_is_plain(ks, s, p, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 12, 3, generator=g, dtype=torch.float64)
    w = torch.randn(4, 3, ks, generator=g, dtype=torch.float64)
    b = torch.randn(4, generator=g, dtype=torch.float64)
    plain = F.conv1d(x.transpose(1, 2), w, b, stride=s, padding=p).transpose(1, 2)
    torch.testing.assert_close(normalized_conv(x, w, b, s, p) * ks, plain, rtol=1e-12, atol=1e-12)


def test_scaled_layers_divide_same_weights_by_ks():
    torch.manual_seed(0)
    a = MgvqvaeModel(6, GranularitySpec(3), 8, 4, 8, scaled=True)
    torch.manual_seed(0)
    b = MgvqvaeModel(6, GranularitySpec(3), 8, 4, 8, scaled=False)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)  # same default initialisation, only the forward differs
    x = torch.randn(2, 16, 6)
    conv_a, conv_b = a.encoder.levels[2][2], b.encoder.levels[2][2]
    h = torch.randn(2, 8, 16)
    torch.testing.assert_close(conv_a(h) * 4, conv_b(h))
    assert not torch.allclose(a.encode(x)[2], b.encode(x)[2])


# encoder / decoder shapes

@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_pyramid_shape_law(n):
    m = MgvqvaeModel(7, GranularitySpec(n), 16, 8, 8)
    F_levels = m.encode(torch.randn(3, 64, 7))
    assert [f.shape for f in F_levels] == [(3, 64 // 2 ** i, 8) for i in range(n)]
    assert m(torch.randn(3, 64, 7))["x_hat"].shape == (3, 64, 7)


def test_encode_examples():
    m = MgvqvaeModel(5, GranularitySpec(4), 16, 8, 8)
    assert [f.shape[0] for f in encode(np.zeros((64, 5), np.float32), m)] == [64, 32, 16, 8]
    with pytest.raises(LengthNotDivisible):
        encode(np.zeros((60, 5), np.float32), m)
    _zero_biases(m)
    for f in encode(np.zeros((64, 5), np.float32), m):
        assert not f.any()


def test_decode_additivity_and_single_level():
    torch.manual_seed(1)
    m = MgvqvaeModel(5, GranularitySpec(3), 16, 8, 8)
    pyr = [torch.randn(1, 16 // 2 ** i, 8) for i in range(3)]
    full = m.decode(pyr)
    parts = m.decoder.level_outputs(pyr)
    torch.testing.assert_close(full, sum(parts))
    zeroed = [p if i != 1 else torch.zeros_like(p) for i, p in enumerate(pyr)]
    diff = full - m.decode(zeroed)
    expected = parts[1] - m.decoder.levels[1](torch.zeros_like(pyr[1]).transpose(1, 2)).transpose(1, 2)
    torch.testing.assert_close(diff, expected)

    m1 = MgvqvaeModel(5, GranularitySpec(1), 16, 8, 8)
    f = torch.randn(1, 16, 8)
    torch.testing.assert_close(m1.decode([f]), m1.decoder.levels[0](f.transpose(1, 2)).transpose(1, 2))


def test_decode_linear_without_bias():
    torch.manual_seed(2)
    m = MgvqvaeModel(4, GranularitySpec(2), 16, 6, 8)
    _zero_biases(m)
    assert not decode([torch.zeros(8, 6), torch.zeros(4, 6)], m).any()


def test_decode_shape_mismatch():
    m = MgvqvaeModel(4, GranularitySpec(2), 16, 6, 8)
    with pytest.raises(ShapeMismatch):
        decode([torch.zeros(8, 6), torch.zeros(3, 6)], m)
    with pytest.raises(ShapeMismatch):
        decode([torch.zeros(8, 6)], m)


# quantizer

def test_quantize_exact_entry_and_shared_codebook():
    torch.manual_seed(0)
    Z = torch.randn(16, 4)
    F_levels = [torch.stack([Z[7], Z[3]]), Z[7][None]]
    tokens, Fq = quantize(F_levels, Z)
    assert tokens[0].tolist() == [7, 3] and tokens[1].tolist() == [7]
    assert torch.equal(Fq[1][0], Z[7])
    for q, fq in zip(tokens, Fq):
        assert torch.equal(fq, Z[q])


def test_quantize_tie_breaks_low():
    Z = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    tokens, _ = quantize([torch.zeros(1, 2)], Z)
    assert tokens[0].item() == 0
    tokens, _ = quantize([torch.tensor([[0.0, 0.3]])], Z[[3, 2, 1, 0]].flip(0))
    assert tokens[0].item() == 2
    Z = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    tokens, _ = quantize([torch.tensor([[2.0, 0.0]])], Z)
    assert tokens[0].item() == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 64), st.integers(1, 16), st.integers(0, 10_000))
def test_quantize_matches_brute_force(C, d, seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(C, d))
    f = rng.normal(size=(50, d))
    dist = ((f[:, None, :] - Z[None]) ** 2).sum(-1)
    q = nearest_codes(torch.from_numpy(f), torch.from_numpy(Z)).numpy()
    assert np.array_equal(q, dist.argmin(1))


# losses

def test_loss_zero_at_perfect_reconstruction():
    g = torch.randn(2, 8, 13)
    F_levels = [torch.randn(2, 8, 4)]
    out = vqvae_loss(g, g.clone(), F_levels, [f.clone() for f in F_levels], rot_joints=0)
    assert all(float(v) == 0 for v in out.values())


@pytest.mark.parametrize("theta", [0.1, 0.7, 1.5, 2.9])
def test_geodesic_term_equals_angle(theta):
    R1 = Rotation.from_rotvec([0, 0, theta]).as_matrix()
    ref = np.arccos((np.trace(R1 @ np.eye(3).T) - 1) / 2)
    a = torch.from_numpy(matrix_to_rot6d(R1))[None]
    b = torch.tensor([[1.0, 0, 0, 0, 1, 0]], dtype=torch.float64)
    assert abs(float(geodesic_angles(a, b)[0]) - ref) < 1e-9
    g = torch.cat([b, b], -1).reshape(1, 1, 12)
    gh = torch.cat([a, b], -1).reshape(1, 1, 12)
    out = vqvae_loss(g, gh, [torch.zeros(1, 1, 2)], [torch.zeros(1, 1, 2)], rot_joints=2)
    assert abs(float(out["rec"]) - theta / 2) < 1e-9  # mean over the two joints


def test_geodesic_nonnegative_and_zero_iff_equal():
    r = torch.from_numpy(matrix_to_rot6d(Rotation.random(20, random_state=0).as_matrix()))
    s = torch.from_numpy(matrix_to_rot6d(Rotation.random(20, random_state=1).as_matrix()))
    assert (geodesic_angles(r, s) > 1e-6).all()
    assert (geodesic_angles(r, r).abs() < 1e-6).all()


def test_translation_offset_only_moves_reconstruction():
    g = torch.randn(1, 16, 7, dtype=torch.float64)
    gh = g + 0.1 * torch.randn_like(g)
    F0 = [torch.zeros(1, 16, 2)]
    base = vqvae_loss(g, gh, F0, F0, part="global")
    shifted = gh.clone()
    shifted[..., 5] += 0.8
    moved = vqvae_loss(g, shifted, F0, F0, part="global")
    assert abs(float(moved["vel"] - base["vel"])) < 1e-12
    assert abs(float(moved["acc"] - base["acc"])) < 1e-12
    assert moved["rec"] > base["rec"]


def test_stop_gradient_routing():
    f = torch.randn(5, 3, requires_grad=True)
    z = torch.randn(5, 3, requires_grad=True)
    g = torch.zeros(1, 4, 2)
    vqvae_loss(g, g, [f], [z], rot_joints=0)["codebook"].backward()
    assert f.grad is None or not f.grad.any()
    assert z.grad.abs().sum() > 0
    f.grad, z.grad = None, None
    vqvae_loss(g, g, [f], [z], rot_joints=0)["commit"].backward()
    assert z.grad is None or not z.grad.any()
    assert f.grad.abs().sum() > 0


# gradient checks

def _fd_check(fn, params, eps=1e-6, n_dirs=4, seed=0):
    """Directional central differences against autograd; returns the worst relative error."""
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        analytic = sum((gr * d).sum() for gr, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            up = fn().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            down = fn().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(fd - analytic) / max(abs(analytic), 1e-12))
    return worst


def test_straight_through_identity_and_fd_three_frames():
    torch.manual_seed(0)
    m = MgvqvaeModel(6, GranularitySpec(1), 4, 3, 5, rot_joints=1).double()
    x = torch.randn(1, 3, 6, dtype=torch.float64)
    F_levels = m.encode(x)
    _, Fq = quantize(F_levels, m.codebook)
    # d loss / d F through the straight-through path equals d loss / d F_hat at the decoder input
    Fst = straight_through(F_levels, Fq)
    loss = vqvae_loss(x, m.decode(Fst), [f.detach() for f in F_levels], [f.detach() for f in Fq], rot_joints=1)["rec"]
    gF = torch.autograd.grad(loss, F_levels, retain_graph=True)[0]
    Fh = Fq[0].detach().clone().requires_grad_(True)
    loss_h = vqvae_loss(x, m.decode([Fh]), [Fh.detach()], [Fh.detach()], rot_joints=1)["rec"]
    gFh = torch.autograd.grad(loss_h, Fh)[0]
    torch.testing.assert_close(gF, gFh, rtol=1e-12, atol=1e-14)
    # and d loss / d F_hat agrees with finite differences
    err = _fd_check(lambda: vqvae_loss(x, m.decode([Fh]), [Fh.detach()], [Fh.detach()],
                                       rot_joints=1)["rec"], [Fh])
    assert err < 1e-4


def test_end_to_end_fd_toy():
    torch.manual_seed(3)
    m = MgvqvaeModel(8, GranularitySpec(2), 4, 3, 6, rot_joints=1).double()
    x = torch.randn(2, 4, 8, dtype=torch.float64)
    params = [p for p in m.parameters()]
    with torch.no_grad():
        F0 = m.encode(x)
        _, Fq0 = quantize(F0, m.codebook)
        offsets = [fq - f for f, fq in zip(F0, Fq0)]
        tokens = [quantize([f], m.codebook)[0][0] for f in F0]

    def loss_fn():
        # straight-through surrogate: quantizer offset and stop-gradient arguments are frozen constants
        F_levels = m.encode(x)
        Fq = [m.codebook[q] for q in tokens]
        dec_in = [f + o for f, o in zip(F_levels, offsets)]
        terms = vqvae_loss(x, m.decode(dec_in), F_levels, Fq, rot_joints=1)
        f, fq = torch.cat([a.reshape(-1) for a in F_levels]), torch.cat([a.reshape(-1) for a in Fq])
        f0, fq0 = torch.cat([a.reshape(-1) for a in F0]), torch.cat([a.reshape(-1) for a in Fq0])
        return terms["rec"] + terms["vel"] + terms["acc"] + F.mse_loss(fq, f0) + F.mse_loss(f, fq0)

    # the surrogate's forward value matches the model's own loss
    out = m(x)
    real = vqvae_loss(x, out["x_hat"], out["F"], out["F_hat"], rot_joints=1)["total"]
    assert abs(float(real.detach() - loss_fn().detach())) < 1e-12
    # and its autograd gradient equals the model's straight-through gradient
    g_model = torch.autograd.grad(real, params)
    g_sur = torch.autograd.grad(loss_fn(), params)
    for a, b in zip(g_model, g_sur):
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12)
    assert _fd_check(loss_fn, params) < 1e-4


# training

def test_training_reduces_loss_and_is_deterministic():
    corpus = synth_corpus(0, 12, 32)
    hyper = VQConfig(codebook_size=16, dim=8, width=16, window=32, lr=2e-3, batch_size=8, steps=200, seed=5)
    a = train_vqvae(corpus, "upper", GranularitySpec(3), hyper)
    assert a.history[-1]["total"] < a.history[0]["total"]
    assert len(a.history) == 200 and len(a.usage) > 0
    assert torch.isfinite(a.model.codebook).all()
    assert all(h["commit"] >= 0 for h in a.history)
    hyper_short = VQConfig(codebook_size=16, dim=8, width=16, window=32, lr=2e-3, batch_size=8, steps=20, seed=5)
    b1 = train_vqvae(corpus, "face", GranularitySpec(2), hyper_short)
    b2 = train_vqvae(corpus, "face", GranularitySpec(2), hyper_short)
    assert b1.history == b2.history


def test_config_errors():
    with pytest.raises(ConfigError):
        VQConfig(window=60).validate(GranularitySpec(4))
    with pytest.raises(ConfigError):
        VQConfig(lr=0.0).validate(GranularitySpec(1))
    with pytest.raises(ConfigError):
        train_vqvae(synth_corpus(0, 1, 16), "arms", GranularitySpec(1), VQConfig(window=16, steps=1))


def test_width_for_budget():
    budget = param_count(MgvqvaeModel(54, GranularitySpec(4), 64, 32, 32))
    w1 = width_for_budget(54, GranularitySpec(1), 64, 32, budget)
    n1 = param_count(MgvqvaeModel(54, GranularitySpec(1), 64, 32, w1))
    n1_next = param_count(MgvqvaeModel(54, GranularitySpec(1), 64, 32, w1 + 1))
    assert n1 <= budget < n1_next


# persistence

def test_checkpoint_round_trip(tmp_path):
    res = train_vqvae(synth_corpus(0, 4, 16), "hands", GranularitySpec(2),
                      VQConfig(codebook_size=8, dim=4, width=4, window=16, steps=3, batch_size=2))
    p = save_checkpoint(res, tmp_path / "hands.pt")
    m, part, cfg = load_checkpoint(p)
    assert part == "hands" and cfg["steps"] == 3
    x = torch.randn(2, 16, 180)
    torch.testing.assert_close(m(x)["x_hat"], res.model(x)["x_hat"])
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ModelMismatch):
        load_checkpoint(tmp_path / "bad.pt")


def test_token_stream_round_trip(tmp_path):
    torch.manual_seed(0)
    m = MgvqvaeModel(7, GranularitySpec(3), 16, 4, 4)
    x = torch.randn(1, 32, 7)
    toks = [q[0] for q in m.tokenize(x)]
    p = save_token_stream(tmp_path / "t.npz", toks, "global", 32, 16, 30.0)
    header, levels = load_token_stream(p)
    assert header == {"version": 1, "part": "global", "n": 3, "T": 32, "C": 16, "fps": 30.0}
    for a, b in zip(toks, levels):
        assert np.array_equal(a.numpy(), b)
    # reconstruct(tokenize(g)) goes through the same decode path as decode(lookup(tokens))
    with torch.no_grad():
        via_file = decode_tokens(m, [torch.from_numpy(q)[None] for q in levels])
    assert torch.equal(reconstruct(m, x), via_file)
