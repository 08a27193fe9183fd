import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from m3g.audio_features import (FusionGate, HashedNgramEmbedder, PretrainedEmbeddings, embed_transcript,
                                extract_rhythm, fuse, onset_strength, rms_amplitude)
from m3g.errors import EmptyAudio, ShapeMismatch
from m3g.motion_data import AudioClip, Transcript

SR, FPS = 16000, 30.0


def _clip(samples, T):
    return AudioClip(np.asarray(samples, np.float32), SR, FPS, T)


def test_silence():
    a = _clip(np.zeros(SR), 30)
    feat = extract_rhythm(a, 30, d=8)
    assert feat.raw.shape == (30, 2) and not feat.raw.any()
    assert feat.r.shape == (30, 8) and not feat.r.any()


def test_click_onset_peak():
    T = 40
    a = _clip(np.zeros(int(T * SR / FPS) + 1), T)
    a.samples[a.frame_start(17) + 100] = 1.0
    feat = extract_rhythm(a, T)
    assert int(np.argmax(feat.onset)) == 17
    assert int(np.argmax(feat.amplitude)) == 17


def test_constant_tone():
    T = 30
    t = np.arange(int(T * SR / FPS) + 1) / SR
    a = _clip(0.5 * np.sin(2 * np.pi * 250.0 * t), T)
    amp = rms_amplitude(a, T)
    np.testing.assert_allclose(amp, 0.5 / np.sqrt(2), rtol=1e-2)
    onset = onset_strength(a, T)
    assert onset[0] > 0.05  # attack
    assert onset[2:].max() < 0.02 * onset[0]


def test_empty_audio():
    with pytest.raises(EmptyAudio):
        extract_rhythm(_clip(np.zeros(0), 0), 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 80), st.integers(0, 1000))
def test_rhythm_length_exact(T, seed):
    a = _clip(np.random.default_rng(seed).normal(size=int(T * SR / FPS)), T)
    r1, r2 = extract_rhythm(a, T, d=4), extract_rhythm(a, T, d=4)
    assert r1.r.shape == (T, 4) and np.isfinite(r1.r).all()
    assert np.array_equal(r1.r, r2.r)


def test_embed_transcript():
    prov = HashedNgramEmbedder(16)
    assert not embed_transcript(Transcript([]), 10, prov).c.any()
    c = embed_transcript(Transcript([("hello", 0, 4)]), 10, prov, d=8).c
    assert c.shape == (10, 8)
    assert all(np.array_equal(c[0], c[i]) for i in range(1, 4))
    assert not c[4:].any() and c[0].any()
    c = embed_transcript(Transcript([("go", 1, 3), ("stop", 3, 5), ("go", 7, 9)]), 10, prov).c
    assert np.array_equal(c[1], c[7]) and not np.array_equal(c[1], c[3])
    assert not c[[0, 5, 6, 9]].any()


def test_pretrained_embeddings(tmp_path):
    p = tmp_path / "vec.txt"
    p.write_text("2 3\nhello 1 0 0\nworld 0 1 0\n")
    prov = PretrainedEmbeddings.from_file(p)
    assert prov.width == 3
    assert np.array_equal(prov("Hello"), [1, 0, 0])
    assert not prov("unknown").any()
    c = embed_transcript(Transcript([("world", 2, 3)]), 4, prov).c
    assert np.array_equal(c[2], [0, 1, 0]) and not c[[0, 1, 3]].any()


def test_fuse_equal_inputs():
    r = torch.randn(10, 6)
    out = fuse(r, r.clone())
    torch.testing.assert_close(out.f, r)


def test_fuse_alpha_forced_to_one():
    gate = FusionGate(4)
    with torch.no_grad():
        last = gate.mlp[-1]
        last.weight.zero_()
        last.bias.copy_(torch.tensor([60.0, -60.0] * 4))
    r, c = torch.randn(5, 4), torch.randn(5, 4)
    f, alpha = gate(r, c)
    assert torch.equal(alpha, torch.ones_like(alpha))
    assert torch.equal(f, r)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fuse_convex_bound(seed):
    g = torch.Generator().manual_seed(seed)
    r, c = torch.randn(8, 5, generator=g), torch.randn(8, 5, generator=g) * 3
    out = fuse(r, c)
    assert ((out.alpha > 0) & (out.alpha < 1)).all()
    lo, hi = torch.minimum(r, c), torch.maximum(r, c)
    assert (out.f >= lo - 1e-6).all() and (out.f <= hi + 1e-6).all()
    torch.testing.assert_close(out.f, out.alpha * r + (1 - out.alpha) * c)


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        fuse(torch.zeros(4, 3), torch.zeros(4, 2))
