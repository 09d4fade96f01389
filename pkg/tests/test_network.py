import numpy as np
import pytest
import torch

from octfp.core import N_CLASSES, BScan
from octfp.network import (
    ReconstructionDecoder,
    _init_weights,
    SegmentationNet,
    attention_fusion,
    bscan_to_input,
    build_network,
    infer_bscan,
    load_checkpoint,
    save_checkpoint,
    stage_channels,
)
from oracles import attention_fusion_scalar

SMALL_HW = (32, 96)
SMALL_BASE = 8


def small_net(seed=0):
    return build_network(SMALL_HW, SMALL_BASE, seed=seed)


def test_reference_stage_shapes():
    net = SegmentationNet()
    assert net.expected_stage_shapes() == [
        (128, 384, 64),
        (64, 192, 128),
        (32, 96, 256),
        (16, 48, 512),
        (8, 24, 512),
    ]
    assert net.latent_hw == (8, 24)


def test_small_net_forward_shapes():
    net = small_net()
    x = torch.rand(2, 3, *SMALL_HW)
    out = net(x)
    h, w = SMALL_HW
    chs = stage_channels(SMALL_BASE)
    assert out["seg"].shape == (2, N_CLASSES, h, w)
    assert out["recon"].shape == (2, 3, h, w)
    assert out["latent"].shape == (2, chs[4], h // 32, w // 32)
    for k, s in enumerate(out["skips"]):
        assert s.shape == (2, chs[k], h >> (k + 1), w >> (k + 1))


def test_seg_output_is_simplex():
    net = small_net()
    with torch.no_grad():
        seg = net(torch.rand(1, 3, *SMALL_HW))["seg"]
    sums = seg.sum(dim=1)
    assert torch.all(seg >= 0)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_attention_matches_sitewise_oracle():
    rng = np.random.default_rng(3)
    f_d = rng.normal(size=(2, 2, 3))
    f_s = rng.normal(size=(2, 2, 3))
    want = attention_fusion_scalar(f_d, f_s)
    got = attention_fusion(
        torch.from_numpy(f_d).permute(2, 0, 1).unsqueeze(0),
        torch.from_numpy(f_s).permute(2, 0, 1).unsqueeze(0),
    )[0].permute(1, 2, 0).numpy()
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_attention_uniform_two_channels_scales_by_three_halves():
    f_d = torch.full((1, 2, 4, 4), 0.7, dtype=torch.float64)
    f_s = torch.arange(32, dtype=torch.float64).reshape(1, 2, 4, 4)
    np.testing.assert_allclose(attention_fusion(f_d, f_s).numpy(),
                               1.5 * f_s.numpy(), rtol=1e-12)


def test_attention_single_channel_doubles():
    f_d = torch.randn(1, 1, 3, 5, dtype=torch.float64)
    f_s = torch.randn(1, 1, 3, 5, dtype=torch.float64)
    np.testing.assert_allclose(attention_fusion(f_d, f_s).numpy(),
                               2.0 * f_s.numpy(), rtol=1e-12)


def test_attention_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        attention_fusion(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4))


def test_zero_input_gives_zero_latent():
    net = small_net().eval()
    with torch.no_grad():
        z, _ = net.encode(torch.zeros(1, 3, *SMALL_HW))
    assert torch.all(z == 0)


def test_fresh_decoder_is_positively_homogeneous():
    torch.manual_seed(4)
    dec = ReconstructionDecoder(SMALL_BASE, final_activation=False)
    dec.apply(_init_weights)
    dec.eval()
    z = torch.randn(1, stage_channels(SMALL_BASE)[4], 2, 6,
                    dtype=torch.float64)
    dec.double()
    with torch.no_grad():
        one, _, _ = dec(z, SMALL_HW)
        three, _, _ = dec(3.0 * z, SMALL_HW)
    np.testing.assert_allclose(three.numpy(), 3.0 * one.numpy(),
                               rtol=1e-9, atol=1e-12)


def test_construction_and_forward_deterministic():
    a, b = small_net(seed=7), small_net(seed=7)
    sa, sb = a.state_dict(), b.state_dict()
    assert sorted(sa) == sorted(sb)
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k
    x = torch.rand(1, 3, *SMALL_HW)
    a.eval(), b.eval()
    with torch.no_grad():
        assert torch.equal(a(x)["seg"], b(x)["seg"])


def test_seeds_change_weights():
    a, b = small_net(seed=1), small_net(seed=2)
    assert not torch.equal(a.blocks[0].a1[0].weight, b.blocks[0].a1[0].weight)


def test_encode_rejects_wrong_spatial_size():
    net = small_net()
    with pytest.raises(ValueError):
        net.encode(torch.zeros(1, 3, 64, 96))


def test_input_size_must_divide_by_32():
    with pytest.raises(ValueError):
        SegmentationNet((40, 96), SMALL_BASE)


def test_infer_bscan_output_contract():
    net = small_net()
    rng = np.random.default_rng(0)
    b = BScan(rng.random(SMALL_HW))
    out = infer_bscan(net, b)
    assert out.segmentation.probabilities.shape == (*SMALL_HW, N_CLASSES)
    assert out.reconstruction.shape == (*SMALL_HW, 3)
    assert 0.0 <= out.reconstruction.min() <= out.reconstruction.max() <= 1.0
    assert out.latent.tensor.shape == (1, 3, stage_channels(SMALL_BASE)[4])
    np.testing.assert_allclose(out.latent.pooled,
                               out.latent.tensor.mean(axis=(0, 1)))
    assert len(out.skip_features) == 5


def test_bscan_to_input_replicates_channels():
    b = BScan(np.linspace(0, 1, 32 * 96).reshape(SMALL_HW))
    x = bscan_to_input(b)
    assert x.shape == (1, 3, *SMALL_HW)
    assert torch.equal(x[0, 0], x[0, 2])


def test_bscan_to_input_rejects_unnormalized():
    b = BScan(np.full(SMALL_HW, 3.0))
    with pytest.raises(ValueError):
        bscan_to_input(b)


def test_checkpoint_roundtrip_preserves_outputs(tmp_path):
    net = small_net(seed=5)
    path = save_checkpoint(net, tmp_path / "net.ckpt", meta={"fold": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"fold": 1}
    assert loaded.in_hw == net.in_hw and loaded.base == net.base
    x = torch.rand(1, 3, *SMALL_HW)
    net.eval()
    with torch.no_grad():
        assert torch.equal(net(x)["recon"], loaded(x)["recon"])


def test_checkpoint_bytes_deterministic(tmp_path):
    net = small_net(seed=5)
    p1 = save_checkpoint(net, tmp_path / "a.ckpt")
    p2 = save_checkpoint(net, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    import json
    import struct

    net = small_net()
    path = save_checkpoint(net, tmp_path / "net.ckpt")
    raw = path.read_bytes()
    header_len = struct.unpack("<IQ", raw[8:20])[1]
    header = json.loads(raw[20:20 + header_len])
    header["net"]["base"] = 2 * SMALL_BASE
    payload = json.dumps(header, sort_keys=True).encode()
    tampered = tmp_path / "tampered.ckpt"
    tampered.write_bytes(raw[:12] + struct.pack("<Q", len(payload)) + payload
                         + raw[20 + header_len:])
    with pytest.raises(ValueError):
        load_checkpoint(tampered)
