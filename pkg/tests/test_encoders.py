import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from valor import numeric as nm
from valor.encoders import AudioEncoder, TextEncoder, VisionEncoder, patchify
from valor.errors import InputError

from conftest import tiny_encoder

CFG = tiny_encoder(layers=2)


def _text_encoder():
    torch.manual_seed(0)
    return TextEncoder(CFG)


@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_text_encoder_ignores_padding_content(n_valid, seed):
    enc = _text_encoder()
    g = np.random.default_rng(seed)
    ids = g.integers(5, CFG.vocab_size, size=(1, 8))
    mask = np.arange(8)[None] < n_valid
    other = ids.copy()
    other[~mask] = g.integers(0, CFG.vocab_size, size=int((~mask).sum()))
    with torch.no_grad():
        a = enc(torch.as_tensor(ids), torch.as_tensor(mask))
        b = enc(torch.as_tensor(other), torch.as_tensor(mask))
    assert torch.equal(a[:, :n_valid], b[:, :n_valid])


def test_text_encoder_shapes_and_errors():
    enc = _text_encoder()
    out = enc(torch.zeros(3, 8, dtype=torch.long), torch.ones(3, 8, dtype=torch.bool))
    assert out.shape == (3, 8, CFG.text_hidden) and out.dtype == nm.DTYPE
    assert enc(torch.zeros(5, dtype=torch.long), torch.ones(5, dtype=torch.bool)).shape == (5, 4)
    with pytest.raises(InputError):
        enc(torch.zeros(1, 9, dtype=torch.long), torch.ones(1, 9, dtype=torch.bool))
    with pytest.raises(IndexError):
        enc(torch.full((1, 3), CFG.vocab_size), torch.ones(1, 3, dtype=torch.bool))


def test_patchify_row_major():
    img = torch.arange(16.0).reshape(4, 4, 1)
    p = patchify(img, 2, 2)
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(p[0].numpy(), [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1].numpy(), [2, 3, 6, 7])


def test_vision_frames_encoded_independently():
    torch.manual_seed(1)
    enc = VisionEncoder(CFG)
    frames = torch.randn(2, 3, 4, 4, 1, dtype=nm.DTYPE)
    with torch.no_grad():
        full = enc(frames)
        alone = enc(frames[1:2, 2:3])
    assert full.shape == (2, 3, CFG.vision_seq_len, CFG.vision_hidden)
    np.testing.assert_allclose(full[1, 2].numpy(), alone[0, 0].numpy(), atol=1e-12)


def test_audio_clips_encoded_independently():
    torch.manual_seed(2)
    enc = AudioEncoder(CFG)
    specs = torch.randn(2, 2, 4, 4, dtype=nm.DTYPE)
    with torch.no_grad():
        full = enc(specs)
        alone = enc(specs[0, 1:2])
    assert full.shape == (2, 2, CFG.audio_seq_len, CFG.audio_hidden)
    np.testing.assert_allclose(full[0, 1].numpy(), alone[0].numpy(), atol=1e-12)


def test_geometry_mismatch_rejected():
    with pytest.raises(InputError):
        VisionEncoder(CFG)(torch.zeros(1, 1, 8, 8, 1, dtype=nm.DTYPE))
    with pytest.raises(InputError):
        AudioEncoder(CFG)(torch.zeros(1, 1, 4, 6, dtype=nm.DTYPE))


def test_encoder_gradients_match_finite_differences():
    torch.manual_seed(3)
    enc = VisionEncoder(tiny_encoder())
    frames = torch.randn(1, 1, 4, 4, 1, dtype=nm.DTYPE)
    w = torch.randn(1, 1, CFG.vision_seq_len, CFG.vision_hidden, dtype=nm.DTYPE)
    params = list(enc.parameters())
    assert nm.gradient_check(lambda: (enc(frames) * w).sum(), params) < 1e-5
