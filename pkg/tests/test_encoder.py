import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seqclr.encoder import (
    RESNET29_TRACE,
    EncoderConfig,
    ProjectionHead,
    SeqEncoder,
    SequentialFeatureMap,
    ShapeError,
    ToyCNN,
    build_encoder,
    build_head,
    count_frames,
    horizontal_receptive_fields,
    parameter_digest,
    project,
    resolve_decoder_tap,
)

SMALL = EncoderConfig(toy_widths=(8, 8, 16, 16), lstm_hidden=16, lstm_layers=1)


def test_toy_cnn_shapes():
    enc = build_encoder(EncoderConfig()).eval()
    v = enc(torch.rand(2, 1, 32, 100), "V")
    assert v.frames.shape == (2, 26, 128)
    assert v.T > 1 and v.T == count_frames(100)


def test_identical_images_identical_maps():
    enc = build_encoder(SMALL).eval()
    x = torch.rand(1, 1, 32, 100)
    out = enc(torch.cat([x, x]))
    assert torch.equal(out.frames[0], out.frames[1])
    assert torch.equal(enc(x).frames, enc(x).frames)


def test_resnet29_trace():
    enc = build_encoder(EncoderConfig(backbone="resnet29", sequence_modeling=False, representation="V")).eval()
    with torch.no_grad():
        v = enc(torch.rand(1, 1, 32, 100))
    assert (v.F, v.T) == (RESNET29_TRACE["F"], RESNET29_TRACE["T"])


def test_wrong_input_shape():
    enc = build_encoder(SMALL)
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 1, 31, 100))
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 3, 32, 100))
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 32, 100))


def test_bilstm_dims():
    enc = build_encoder(EncoderConfig(lstm_hidden=256, lstm_layers=1)).eval()
    x = torch.rand(1, 1, 32, 100)
    v, h, hv = enc(x, "V"), enc(x, "H"), enc(x, "HV")
    assert v.T == h.T == hv.T == 26
    assert h.F == 512
    assert hv.F == h.F + v.F
    assert torch.equal(hv.frames[..., : h.F], h.frames)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(sequence_modeling=False, representation="H")
    with pytest.raises(ValueError):
        EncoderConfig(backbone="vgg")
    with pytest.raises(ValueError):
        resolve_decoder_tap(EncoderConfig(sequence_modeling=False, representation="V"), "H")
    assert resolve_decoder_tap(SMALL, "auto") == "H"


def test_head_none_is_identity():
    r = torch.randn(2, 7, 5)
    head = ProjectionHead("none", 5)
    assert torch.equal(head(r), r)
    assert torch.equal(project(SequentialFeatureMap(r, "H"), head).frames, r)


@given(st.integers(1, 12), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_mlp_head_permutation_equivariant(T, seed):
    torch.manual_seed(seed)
    head = ProjectionHead("mlp_per_frame", 6, 4)
    r = torch.randn(2, T, 6)
    perm = torch.randperm(T)
    assert torch.allclose(head(r[:, perm]), head(r)[:, perm], atol=1e-6)


def test_bilstm_head_not_equivariant():
    found = False
    for seed in range(10):
        torch.manual_seed(seed)
        head = ProjectionHead("bilstm", 6, 4)
        r = torch.randn(1, 5, 6)
        perm = torch.tensor([4, 3, 2, 1, 0])
        if not torch.allclose(head(r[:, perm]), head(r)[:, perm], atol=1e-4):
            found = True
            break
    assert found


@pytest.mark.parametrize("kind,dim", [("none", 32), ("mlp_per_frame", 128), ("bilstm", 256)])
def test_heads_preserve_frame_count(kind, dim):
    cfg = EncoderConfig(toy_widths=(8, 8, 16, 16), lstm_hidden=16, lstm_layers=1, projection_head=kind)
    enc = build_encoder(cfg)
    head = build_head(cfg, enc.representation_dim)
    out = head(enc(torch.rand(2, 1, 32, 100)).frames)
    assert out.shape == (2, 26, dim)


def test_receptive_field_locality():
    enc = build_encoder(SMALL).eval()
    fields = horizontal_receptive_fields(ToyCNN.horizontal_layers, 26, 100)
    assert fields[0][0] == 0 and fields[-1][1] == 99
    assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(fields, fields[1:]))
    torch.manual_seed(0)
    x = torch.rand(1, 1, 32, 100)
    base = enc(x, "V").frames[0]
    for t in (0, 5, 13, 25):
        lo, hi = fields[t]
        y = x.clone()
        outside = [c for c in range(100) if c < lo or c > hi]
        y[..., outside] = torch.rand(1, 1, 32, len(outside))
        out = enc(y, "V").frames[0]
        assert torch.equal(out[t], base[t]), t
        # the field is tight enough to matter: some other frame changed
        assert not torch.equal(out, base)


def test_digest_tracks_parameters():
    a, b = build_encoder(SMALL), build_encoder(SMALL)
    assert parameter_digest(a) == parameter_digest(b)
    with torch.no_grad():
        next(b.parameters()).add_(1e-3)
    assert parameter_digest(a) != parameter_digest(b)


def test_transform_slot_is_identity():
    assert isinstance(SeqEncoder(SMALL).transform, torch.nn.Identity)
