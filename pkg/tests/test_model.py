import dataclasses

import numpy as np
import pytest

from cupid import autodiff as ad
from cupid import model as M
from cupid.autodiff import DimensionError, Tensor
from cupid.model import MaskSpec, ModelConfig

TINY = ModelConfig(patch_size=4, d_model=16, enc_blocks=1, enc_heads=2, dec_blocks=2, dec_heads=2,
                   window_len=40, dtype="float64")


def tiny_inputs(seed=0, batch=2, config=TINY, scale=0.0):
    """Initial parameters, or with ``scale > 0`` a random point where every weight is O(scale).

    Gradient checks use the latter: at the default init some gradients are
    ~1e-9, below what central differences resolve in double precision.
    """
    rng = np.random.default_rng(seed)
    params = M.init_params(config, rng)
    for name, p in params.items():
        if name.endswith(".g"):
            p.data += 0.1 * rng.standard_normal(p.shape)
        elif scale:
            p.data[...] = scale * rng.standard_normal(p.shape)
        else:
            p.data += 0.1 * rng.standard_normal(p.shape) * name.rsplit(".", 1)[-1].startswith("b")
    x = rng.standard_normal((batch, config.window_len))
    mask = M.random_mask(config.n_patches, config.mask_ratio, rng, batch=batch)
    return params, x, mask


# -- patches and masks ------------------------------------------------------------


@pytest.mark.parametrize("patch, shape", [(20, (50, 20)), (25, (40, 25)), (10, (100, 10))])
def test_patchify_shapes(patch, shape):
    x = np.arange(1000.0)
    p = M.patchify(x, patch)
    assert p.shape == shape
    np.testing.assert_array_equal(p[1], x[patch:2 * patch])
    np.testing.assert_array_equal(M.unpatchify(p), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(M.ConfigError):
        M.patchify(np.zeros(1000), 30)
    with pytest.raises(M.ConfigError):
        ModelConfig(patch_size=30)


def test_mask_counts():
    rng = np.random.default_rng(0)
    m = M.random_mask(50, 0.4, rng)
    assert m.count == 20 and (~m.masked).sum() == 30
    assert M.random_mask(50, 0.0, rng).count == 0
    for n in range(1, 80):
        for r in (0.1, 0.25, 0.4, 0.75, 0.9):
            assert M.random_mask(n, r, rng).count == int(np.floor(r * n + 0.5))


def test_mask_is_uniform():
    m = M.random_mask(50, 0.4, np.random.default_rng(1), batch=100_000)
    freq = m.masked.mean(axis=0)
    assert np.all(np.abs(freq - 0.4) < 0.01)


def test_mask_is_seeded():
    a = M.random_mask(50, 0.4, np.random.default_rng(5), batch=3).masked
    b = M.random_mask(50, 0.4, np.random.default_rng(5), batch=3).masked
    np.testing.assert_array_equal(a, b)


def test_mask_positions_increase():
    m = M.random_mask(50, 0.4, np.random.default_rng(2), batch=4)
    assert np.all(np.diff(m.visible_positions, axis=1) > 0)
    assert np.all(np.diff(m.masked_positions, axis=1) > 0)


# -- encoder -------------------------------------------------------------------------


def test_encoder_residual_identity():
    params, x, _ = tiny_inputs()
    for name in params:
        if name.startswith("enc.") and name.endswith(("attn.wo", "attn.bo", "mlp.w2", "mlp.b2")):
            params[name].data[...] = 0.0
    patches = M.patchify(x, 4)
    pos = np.broadcast_to(np.arange(10), (2, 10))
    out = M.encode(params, TINY, patches, pos).data
    embedded = patches @ params["patch_embed.w"].data + params["patch_embed.b"].data + params["enc_pos"].data
    np.testing.assert_array_equal(out, embedded)


def test_encoder_permutation_equivariance():
    params, x, mask = tiny_inputs(3)
    patches = M.patchify(x, 4)
    vis = mask.visible_positions
    visible = np.take_along_axis(patches, vis[:, :, None], axis=1)
    out = M.encode(params, TINY, visible, vis).data
    perm = np.random.default_rng(4).permutation(vis.shape[1])
    out_p = M.encode(params, TINY, visible[:, perm], vis[:, perm]).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-12, atol=1e-13)


def test_single_token():
    params, x, _ = tiny_inputs()
    out = M.encode(params, TINY, M.patchify(x, 4)[:, :1], np.array([[3], [7]])).data
    assert out.shape == (2, 1, 16) and np.all(np.isfinite(out))


# -- decoder assembly --------------------------------------------------------------------


def reference_assembly(encoded, masked, mask_token, dec_pos):
    B, N = masked.shape
    out = np.zeros((B, N, encoded.shape[-1]))
    for b in range(B):
        j = 0
        for i in range(N):
            if masked[b, i]:
                out[b, i] = mask_token + dec_pos[i]
            else:
                out[b, i] = encoded[b, j]
                j += 1
    return out


@pytest.mark.parametrize("count", [0, 4, 10])
def test_assemble_against_reference(count):
    params, _, _ = tiny_inputs()
    rng = np.random.default_rng(count)
    masked = np.zeros((3, 10), bool)
    for b in range(3):
        masked[b, rng.permutation(10)[:count]] = True
    enc = Tensor(rng.standard_normal((3, 10 - count, 16)))
    got = M.assemble_decoder_input(enc, MaskSpec(masked), params).data
    expected = reference_assembly(enc.data, masked, params["mask_token"].data, params["dec_pos"].data)
    np.testing.assert_array_equal(got, expected)
    if count == 0:
        np.testing.assert_array_equal(got, enc.data)


def test_assemble_rejects_wrong_count():
    params, _, mask = tiny_inputs()
    with pytest.raises(DimensionError):
        M.assemble_decoder_input(Tensor(np.zeros((2, 5, 16))), mask, params)


# -- decoder -----------------------------------------------------------------------------


def test_single_block_decoder_ignores_spectrogram():
    cfg = dataclasses.replace(TINY, dec_blocks=1)
    params, x, mask = tiny_inputs(config=cfg)
    _, a = M.forward(params, cfg, x, mask)
    _, b = M.forward(params, dataclasses.replace(cfg, variant="mtae"), x, mask)
    assert a.data.tobytes() == b.data.tobytes()


def test_two_block_decoder_uses_spectrogram():
    params, x, mask = tiny_inputs(scale=0.3)
    _, a = M.forward(params, TINY, x, mask)
    _, b = M.forward(params, dataclasses.replace(TINY, variant="mtae"), x, mask)
    assert not np.allclose(a.data, b.data)


def test_zero_keys_give_uniform_attention():
    params, _, _ = tiny_inputs()
    p = {k: v for k, v in params.items()}
    p["dec.1.attn.bk"] = Tensor(np.zeros(16))
    h = np.random.default_rng(5).standard_normal((2, 10, 16))
    out = M.multi_head_attention(Tensor(h), Tensor(np.zeros((2, 10, 16))), Tensor(h), p, "dec.1.attn", 2).data
    v = h @ p["dec.1.attn.wv"].data + p["dec.1.attn.bv"].data
    expected = v.mean(axis=1, keepdims=True) @ p["dec.1.attn.wo"].data + p["dec.1.attn.bo"].data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), rtol=1e-12, atol=1e-14)


def test_cross_block_with_zero_spectrogram():
    params, x, mask = tiny_inputs()
    params["spec_proj.b"].data[...] = 0.0
    params["dec_pos"].data[...] = 0.0
    params["dec.1.attn.bk"].data[...] = 0.0
    h = Tensor(np.random.default_rng(6).standard_normal((2, 10, 16)))
    spec = M.project_spectrogram(params, np.zeros((2, 10, 255)))
    assert not spec.data.any()
    got = M.transformer_block(h, params, "dec.1", 2, key=spec).data
    # hand evaluation of the pre-norm block with uniform attention weights
    def ln(z, g, b):
        mu = z.mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(z.var(-1, keepdims=True) + 1e-5) * g + b
    P = {k: v.data for k, v in params.items() if k.startswith("dec.1.")}
    a = ln(h.data, P["dec.1.ln1.g"], P["dec.1.ln1.b"])
    v = a @ P["dec.1.attn.wv"] + P["dec.1.attn.bv"]
    z = h.data + v.mean(axis=1, keepdims=True) @ P["dec.1.attn.wo"] + P["dec.1.attn.bo"]
    u = ln(z, P["dec.1.ln2.g"], P["dec.1.ln2.b"]) @ P["dec.1.mlp.w1"] + P["dec.1.mlp.b1"]
    gelu = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u ** 3)))
    expected = z + gelu @ P["dec.1.mlp.w2"] + P["dec.1.mlp.b2"]
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_spectrogram_frame_count_mismatch():
    params, x, mask = tiny_inputs()
    h = Tensor(np.zeros((2, 10, 16)))
    with pytest.raises(DimensionError):
        M.decode(params, TINY, h, Tensor(np.zeros((2, 9, 16))))


def test_default_output_shape():
    cfg = ModelConfig()
    params = M.init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((1, 1000))
    loss, recon = M.forward(params, cfg, x, M.random_mask(50, 0.4, np.random.default_rng(1)))
    assert recon.shape == (1, 50, 20) and np.isfinite(loss.item())


# -- attention oracle ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(8))
def test_fused_attention_matches_naive(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 6))
    B, N = int(rng.integers(1, 4)), int(rng.integers(1, 12))
    p = {f"a.w{n}": Tensor(rng.standard_normal((d, d))) for n in "qkvo"}
    p.update({f"a.b{n}": Tensor(rng.standard_normal(d)) for n in "qkvo"})
    q = Tensor(rng.standard_normal((B, N, d)))
    k = Tensor(rng.standard_normal((B, N, d))) if seed % 2 else q
    fused = M.multi_head_attention(q, k, q, p, "a", heads).data
    naive = M.naive_attention(q, k, q, p, "a", heads).data
    assert np.max(np.abs(fused - naive)) < 1e-10


# -- loss -------------------------------------------------------------------------------------


def test_masked_l1_examples():
    x = np.random.default_rng(0).standard_normal((1, 4, 5))
    all_masked = np.ones((1, 4), bool)
    assert M.masked_l1(x, Tensor(x), all_masked).item() == 0.0
    assert M.masked_l1(x, Tensor(x + 0.3), all_masked).item() == pytest.approx(0.3, abs=1e-15)
    target = np.zeros((1, 4, 5))
    recon = Tensor(np.array([0.2, 9.0, 0.4, 9.0])[None, :, None] * np.ones((1, 4, 5)))
    assert M.masked_l1(target, recon, np.array([[1, 0, 1, 0]], bool)).item() == pytest.approx(0.3)


def test_masked_l1_needs_a_masked_patch():
    with pytest.raises(M.UndefinedLossError):
        M.masked_l1(np.zeros((1, 4, 5)), Tensor(np.zeros((1, 4, 5))), np.zeros((1, 4), bool))


def test_loss_locality():
    rng = np.random.default_rng(1)
    for _ in range(100):
        target = rng.standard_normal((3, 10, 4))
        recon = Tensor(rng.standard_normal((3, 10, 4)))
        mask = M.random_mask(10, 0.4, rng, batch=3)
        base = M.masked_l1(target, recon, mask).item()
        target[~mask.masked] += rng.standard_normal(target[~mask.masked].shape) * 100
        assert M.masked_l1(target, recon, mask).item() == base


@pytest.mark.parametrize("variant", ["cupid", "mtae"])
def test_end_to_end_gradient(variant):
    cfg = dataclasses.replace(TINY, variant=variant)
    params, x, mask = tiny_inputs(7, config=cfg, scale=0.3)
    loss, _ = M.forward(params, cfg, x, mask)
    loss.backward()
    rng = np.random.default_rng(8)
    for name, p in params.items():
        if p.grad is None:
            assert variant == "mtae" and name.startswith("spec_proj")
            continue
        idx = rng.choice(p.data.size, min(6, p.data.size), replace=False)
        num = ad.numerical_gradient(lambda: M.forward(params, cfg, x, mask)[0], p, indices=idx)
        ana = p.grad.reshape(-1)[idx]
        if name.endswith("attn.bk") or name == "spec_proj.b":
            # both shift every key equally; softmax is shift invariant, so the gradient is zero
            assert np.abs(ana).max() < 1e-12 and np.abs(num.reshape(-1)[idx]).max() < 1e-9
            continue
        assert ad.relative_error(ana, num.reshape(-1)[idx]) < 1e-5, name


# -- representations and checkpoints -------------------------------------------------------------


def test_represent_is_deterministic():
    cfg = ModelConfig(d_model=32, enc_blocks=1, dec_blocks=1)
    params = M.init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal(1000)
    r = M.represent(params, cfg, np.stack([x, x]))
    assert r.shape == (2, 32) and np.all(np.isfinite(r))
    np.testing.assert_array_equal(r[0], r[1])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = dataclasses.replace(TINY, dtype="float32")
    params = M.init_params(cfg, 3)
    path = tmp_path / "m.cpck"
    M.save_checkpoint(path, cfg, {k: v.data for k, v in params.items()}, {"iteration": 5})
    cfg2, arrays, meta = M.load_checkpoint(path)
    assert cfg2 == cfg and meta == {"iteration": 5}
    for k, v in params.items():
        assert arrays[k].dtype == v.dtype and arrays[k].tobytes() == v.data.tobytes()
    path2 = tmp_path / "m2.cpck"
    M.save_checkpoint(path2, cfg2, arrays, meta)
    assert path.read_bytes() == path2.read_bytes()
    assert path.read_bytes()[:4] == b"CPCK"


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        M.load_checkpoint(path)
