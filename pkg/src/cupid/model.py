"""Masked-patch ECG autoencoder: ViT encoder plus a decoder cued by the spectrogram.

``variant="cupid"`` feeds projected spectrogram frames as attention keys from
the second decoder block on; ``variant="mtae"`` is the same network with plain
self-attention throughout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .spectrogram import SpectrogramConfig, project_frames, stft_magnitude

VARIANTS = ("cupid", "mtae")
CHECKPOINT_MAGIC = b"CPCK"
CHECKPOINT_VERSION = 1

ModelParams = dict  # name -> Tensor, insertion-ordered


class ConfigError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 20
    d_model: int = 128
    enc_blocks: int = 4
    enc_heads: int = 4
    dec_blocks: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.4
    variant: str = "cupid"
    window_len: int = 1000
    mlp_ratio: int = 4
    spec_bins: int = 255
    spec_scale: str = "mag"
    dtype: str = "float32"

    def __post_init__(self):
        if self.window_len % self.patch_size:
            raise ConfigError(f"window length {self.window_len} not divisible by patch size {self.patch_size}")
        if self.d_model % self.enc_heads or self.d_model % self.dec_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by head count")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dec_blocks < 1 or self.enc_blocks < 1:
            raise ConfigError("encoder and decoder need at least one block")

    @property
    def n_patches(self) -> int:
        return self.window_len // self.patch_size

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def spectrogram(self) -> SpectrogramConfig:
        return SpectrogramConfig.for_patch(self.patch_size, n_bins=self.spec_bins, scale=self.spec_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MaskSpec:
    """Boolean mask per sample (True = hidden from the encoder)."""
    masked: np.ndarray  # (B, N) bool
    count: int = field(init=False)

    def __post_init__(self):
        self.masked = np.atleast_2d(np.asarray(self.masked, dtype=bool))
        counts = self.masked.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ValueError("every sample in a batch must mask the same number of patches")
        self.count = int(counts[0])

    @property
    def visible_positions(self) -> np.ndarray:
        B, N = self.masked.shape
        return np.nonzero(~self.masked)[1].reshape(B, N - self.count)

    @property
    def masked_positions(self) -> np.ndarray:
        B, _ = self.masked.shape
        return np.nonzero(self.masked)[1].reshape(B, self.count)


# -- patches and masks ---------------------------------------------------------

def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., L) -> (..., L // patch_size, patch_size)."""
    x = np.asarray(x)
    if x.shape[-1] % patch_size:
        raise ConfigError(f"length {x.shape[-1]} is not divisible by patch size {patch_size}")
    return x.reshape(x.shape[:-1] + (x.shape[-1] // patch_size, patch_size))


def unpatchify(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    return p.reshape(p.shape[:-2] + (p.shape[-2] * p.shape[-1],))


def mask_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def random_mask(n: int, ratio: float, rng: np.random.Generator, batch: int | None = None) -> MaskSpec:
    """Exactly ``round(ratio * n)`` positions per sample, drawn without replacement."""
    if not 0 <= ratio < 1:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    count = mask_count(n, ratio)
    rows = 1 if batch is None else batch
    masked = np.zeros((rows, n), dtype=bool)
    for b in range(rows):
        masked[b, rng.permutation(n)[:count]] = True
    return MaskSpec(masked)


# -- parameters -----------------------------------------------------------------

def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def _block_params(prefix: str, d: int, hidden: int, rng, dtype) -> dict[str, np.ndarray]:
    p = {
        f"{prefix}.ln1.g": np.ones(d), f"{prefix}.ln1.b": np.zeros(d),
        f"{prefix}.ln2.g": np.ones(d), f"{prefix}.ln2.b": np.zeros(d),
    }
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.w{name}"] = _trunc_normal(rng, (d, d))
        p[f"{prefix}.attn.b{name}"] = np.zeros(d)
    p[f"{prefix}.mlp.w1"] = _trunc_normal(rng, (d, hidden))
    p[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    p[f"{prefix}.mlp.w2"] = _trunc_normal(rng, (hidden, d))
    p[f"{prefix}.mlp.b2"] = np.zeros(d)
    return p


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d, P, N = config.d_model, config.patch_size, config.n_patches
    hidden = config.mlp_ratio * d
    raw: dict[str, np.ndarray] = {
        "patch_embed.w": _trunc_normal(rng, (P, d)),
        "patch_embed.b": np.zeros(d),
        "enc_pos": _trunc_normal(rng, (N, d)),
        "dec_pos": _trunc_normal(rng, (N, d)),
        "mask_token": rng.standard_normal(d) * 0.02,
    }
    for i in range(config.enc_blocks):
        raw.update(_block_params(f"enc.{i}", d, hidden, rng, config.np_dtype))
    for i in range(config.dec_blocks):
        raw.update(_block_params(f"dec.{i}", d, hidden, rng, config.np_dtype))
    raw["dec_norm.g"] = np.ones(d)
    raw["dec_norm.b"] = np.zeros(d)
    raw["spec_proj.w"] = _trunc_normal(rng, (config.spec_bins, d))
    raw["spec_proj.b"] = np.zeros(d)
    raw["head.w"] = _trunc_normal(rng, (d, P))
    raw["head.b"] = np.zeros(P)
    return {k: Tensor(v.astype(config.np_dtype), requires_grad=True) for k, v in raw.items()}


def encoder_param_names(params: Mapping[str, Tensor]) -> list[str]:
    return [k for k in params if k.startswith(("patch_embed.", "enc_pos", "enc."))]


# -- attention --------------------------------------------------------------------

def _split_heads(t: Tensor, heads: int) -> Tensor:
    B, N, d = t.shape
    return ad.transpose(ad.reshape(t, (B, N, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: Mapping[str, Tensor],
                         prefix: str, heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V over all heads at once.

    Inputs are (B, N, d); keys and values may come from different sources.
    """
    if k_in.shape[:2] != v_in.shape[:2]:
        raise DimensionError(f"keys {k_in.shape} and values {v_in.shape} must share length")
    B, N, d = q_in.shape
    dh = d // heads
    q = _split_heads(ad.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(ad.linear(k_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(ad.linear(v_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
    return ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def naive_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: Mapping[str, Tensor],
                    prefix: str, heads: int) -> Tensor:
    """Reference: one head at a time using column slices of the projections."""
    d = q_in.shape[-1]
    dh = d // heads
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = ad.linear(q_in, p[f"{prefix}.wq"][:, cols], p[f"{prefix}.bq"][cols])
        k = ad.linear(k_in, p[f"{prefix}.wk"][:, cols], p[f"{prefix}.bk"][cols])
        v = ad.linear(v_in, p[f"{prefix}.wv"][:, cols], p[f"{prefix}.bv"][cols])
        a = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)), axis=-1)
        outs.append(ad.matmul(a, v))
    return ad.linear(ad.concat(outs, axis=-1), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int,
                      key: Tensor | None = None) -> Tensor:
    """Pre-norm block. With ``key`` given, attention keys come from it instead of the stream."""
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = ad.add(x, multi_head_attention(h, h if key is None else key, h, p, f"{prefix}.attn", heads))
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]), approximate="tanh")
    return ad.add(x, ad.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"]))


# -- network stages -------------------------------------------------------------

def _as_input(x, config: ModelConfig) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=config.np_dtype))


def encode(params: Mapping[str, Tensor], config: ModelConfig, patches, positions: np.ndarray) -> Tensor:
    """Embed the given patches (B, n, P) at ``positions`` (B, n) and run the encoder blocks."""
    positions = np.asarray(positions, dtype=np.intp)
    x = ad.linear(_as_input(patches, config), params["patch_embed.w"], params["patch_embed.b"])
    x = ad.add(x, ad.take_rows(params["enc_pos"], positions))
    for i in range(config.enc_blocks):
        x = transformer_block(x, params, f"enc.{i}", config.enc_heads)
    return x


def assemble_decoder_input(encoded: Tensor, mask: MaskSpec, params: Mapping[str, Tensor]) -> Tensor:
    """Scatter encoder outputs back to their positions and fill masked slots with mask token + position."""
    vis, hid = mask.visible_positions, mask.masked_positions
    B, N = mask.masked.shape
    if encoded.shape[1] + mask.count != N:
        raise DimensionError(f"{encoded.shape[1]} encoded + {mask.count} masked != {N} patches")
    fill = ad.add(ad.take_rows(params["dec_pos"], hid), params["mask_token"])
    stacked = ad.concat([encoded, fill], axis=1)
    order = np.concatenate([vis, hid], axis=1)
    if np.any(np.sort(order, axis=1) != np.arange(N)):
        raise RuntimeError("position collision while assembling decoder input")
    return ad.gather_rows(stacked, np.argsort(order, axis=1, kind="stable"))


def project_spectrogram(params: Mapping[str, Tensor], frames) -> Tensor:
    return project_frames(frames, params["spec_proj.w"], params["spec_proj.b"], params["dec_pos"])


def decode(params: Mapping[str, Tensor], config: ModelConfig, h: Tensor,
           spec: Tensor | None = None) -> Tensor:
    """Decoder blocks then a per-token linear head to ``patch_size`` samples.

    Block 0 is plain self-attention. For the cupid variant every later block
    uses ``spec`` (projected frames, (B, N, d)) as the attention keys while
    queries and values stay on the token stream.
    """
    cross = config.variant == "cupid" and config.dec_blocks > 1
    if cross:
        if spec is None:
            raise ValueError("cupid decoding needs spectrogram frames")
        if spec.shape[:2] != h.shape[:2]:
            raise DimensionError(f"spectrogram frames {spec.shape} do not match tokens {h.shape}")
    for i in range(config.dec_blocks):
        key = spec if (cross and i >= 1) else None
        h = transformer_block(h, params, f"dec.{i}", config.dec_heads, key=key)
    h = ad.layer_norm(h, params["dec_norm.g"], params["dec_norm.b"])
    return ad.linear(h, params["head.w"], params["head.b"])


def masked_l1(target, recon: Tensor, mask) -> Tensor:
    """Mean over masked patches of each patch's mean absolute error."""
    m = mask.masked if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    total = int(m.sum())
    if total == 0:
        raise UndefinedLossError("masked L1 is undefined when no patch is masked")
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=recon.dtype))
    if target.shape != recon.shape:
        raise DimensionError(f"target {target.shape} vs reconstruction {recon.shape}")
    per_patch = ad.mean(ad.abs_(ad.sub(recon, target)), axis=-1)
    weights = Tensor(m.reshape(per_patch.shape).astype(recon.dtype))
    return ad.mul(ad.sum_(ad.mul(per_patch, weights)), 1.0 / total)


def spectrogram_frames(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    return stft_magnitude(x, config.spectrogram).astype(config.np_dtype)


def forward(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray, mask: MaskSpec,
            frames: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One pretraining forward pass on windows ``x`` (B, L). Returns (loss, reconstruction)."""
    x = np.atleast_2d(np.asarray(x, dtype=config.np_dtype))
    patches = patchify(x, config.patch_size)
    vis = mask.visible_positions
    visible = np.take_along_axis(patches, vis[:, :, None], axis=1)
    h = assemble_decoder_input(encode(params, config, visible, vis), mask, params)
    spec = None
    if config.variant == "cupid" and config.dec_blocks > 1:
        if frames is None:
            frames = spectrogram_frames(x, config)
        spec = project_spectrogram(params, frames)
    recon = decode(params, config, h, spec)
    return masked_l1(patches, recon, mask), recon


def encode_full(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray) -> Tensor:
    x = np.atleast_2d(np.asarray(x, dtype=config.np_dtype))
    patches = patchify(x, config.patch_size)
    B, N = patches.shape[:2]
    return encode(params, config, patches, np.broadcast_to(np.arange(N), (B, N)))


def represent(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray,
              batch_size: int = 256) -> np.ndarray:
    """Mean-pooled encoder tokens of unmasked windows: (B, L) -> (B, d_model)."""
    x = np.atleast_2d(np.asarray(x))
    out = []
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(ad.mean(encode_full(params, config, x[s:s + batch_size]), axis=1).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.d_model))


def reconstruct(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray,
                mask: MaskSpec) -> np.ndarray:
    with ad.no_grad():
        _, recon = forward(params, config, x, mask)
    return unpatchify(recon.data)


# -- checkpoints --------------------------------------------------------------------

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str | Path, config: ModelConfig, arrays: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    """Little-endian: magic, u32 version, u32-length JSON config block, u32 array count,
    then per array (u16 name length, name, u8 dtype code, u8 rank, u32 extents, data)."""
    block = json.dumps({"model": config.to_dict(), "meta": dict(meta or {})}, sort_keys=True).encode()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(block)) + block
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            arr, code = arr.astype(np.float32), 0
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, blen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    block = json.loads(data[off:off + blen])
    off += blen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dt = _CODE_DTYPES[code].newbyteorder("<")
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += n * dt.itemsize
    return ModelConfig.from_dict(block["model"]), arrays, block.get("meta", {})


def params_from_arrays(arrays: Mapping[str, np.ndarray], config: ModelConfig) -> ModelParams:
    template = init_params(config, 0)
    missing = set(template) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    return {k: Tensor(np.array(arrays[k], dtype=config.np_dtype), requires_grad=True) for k in template}


def load_model(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    config, arrays, _ = load_checkpoint(path)
    return config, params_from_arrays(arrays, config)


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant)
