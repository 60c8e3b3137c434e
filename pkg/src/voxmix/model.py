"""Toy encoder-decoder transcriber with optional low-rank adapters.

Pre-LN transformer blocks at desk scale: an input projection plus
sinusoidal positions feed self-attention encoder blocks; the decoder uses
causal self-attention and cross-attention over the encoder output. LoRA
adapters attach to the query and value projections of every attention and
are the only trainable weights during fine-tuning. With all adapter B
matrices at zero the forward pass is bit-identical to the base model.

Batched entry points (`encode_batch`, `decode_batch`) take padded arrays
with validity masks; the per-sample operations wrap them with batch size 1.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from voxmix import numerics as nm
from voxmix.numerics import Tensor
from voxmix.synthdata import BOS_ID, VOCAB_SIZE

NEG_MASK = -1e30


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    num_heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = VOCAB_SIZE
    max_audio_frames: int = 64
    max_token_len: int = 48

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_audio_frames < 1:
            raise ValueError("max_audio_frames must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class LoraAdapter:
    """Low-rank delta (alpha/rank) * B @ A on a frozen weight matrix."""

    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """The dense weight update this adapter currently encodes."""
        return self.scaling * (self.b.values @ self.a.values)


@dataclass
class EncoderOutput:
    e: Tensor  # (T_e, H)
    frame_mask: np.ndarray  # bool, (T_e,)


class TranscriberModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}
        self.enc_pos = _sinusoidal_positions(config.max_audio_frames, config.hidden_dim)

    def attention_prefixes(self) -> list[str]:
        out = [f"enc.{i}.attn" for i in range(self.config.encoder_layers)]
        for i in range(self.config.decoder_layers):
            out.extend([f"dec.{i}.self", f"dec.{i}.cross"])
        return out


def _sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    idx = np.arange(dim // 2)[None, :]
    angle = pos / (10000.0 ** (2 * idx / dim))
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def build_model(config: ModelConfig, seed: int, init_std: float = 0.08) -> TranscriberModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    p: dict[str, Tensor] = {}

    def weight(name, shape):
        p[name] = Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape), requires_grad=True)

    h, f, v = config.hidden_dim, config.feature_dim, config.vocab_size
    weight("enc.in.w", (h, f))
    zeros("enc.in.b", (h,))
    for i in range(config.encoder_layers):
        _init_attention(weight, zeros, ones, f"enc.{i}", h, cross=False)
    ones("enc.ln_out.g", (h,))
    zeros("enc.ln_out.b", (h,))

    weight("dec.tok", (v, h))
    weight("dec.pos", (config.max_token_len, h))
    for i in range(config.decoder_layers):
        _init_attention(weight, zeros, ones, f"dec.{i}", h, cross=True)
    ones("dec.ln_out.g", (h,))
    zeros("dec.ln_out.b", (h,))
    weight("dec.out.w", (v, h))
    zeros("dec.out.b", (v,))

    return TranscriberModel(config, p)


def _init_attention(weight, zeros, ones, prefix, h, cross: bool):
    names = ["self", "cross"] if cross else ["attn"]
    ones(f"{prefix}.ln1.g", (h,))
    zeros(f"{prefix}.ln1.b", (h,))
    for j, kind in enumerate(names):
        if j > 0:
            ones(f"{prefix}.ln{j + 1}.g", (h,))
            zeros(f"{prefix}.ln{j + 1}.b", (h,))
        for m in ("wq", "wk", "wv", "wo"):
            weight(f"{prefix}.{kind}.{m}", (h, h))
        for m in ("bq", "bk", "bv", "bo"):
            zeros(f"{prefix}.{kind}.{m}", (h,))
    ln_mlp = len(names) + 1
    ones(f"{prefix}.ln{ln_mlp}.g", (h,))
    zeros(f"{prefix}.ln{ln_mlp}.b", (h,))
    weight(f"{prefix}.mlp.w1", (4 * h, h))
    zeros(f"{prefix}.mlp.b1", (4 * h,))
    weight(f"{prefix}.mlp.w2", (h, 4 * h))
    zeros(f"{prefix}.mlp.b2", (h,))


def attach_adapters(
    model: TranscriberModel,
    rank: int = 4,
    alpha: float = 4.0,
    dropout: float = 0.1,
    seed: int = 0,
) -> None:
    """Attach LoRA adapters to the q and v projections of every attention.

    A is small Gaussian, B starts at zero so the adapted model is initially
    a no-op over the base model.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C6F7261]))
    h = model.config.hidden_dim
    a_std = 1.0 / math.sqrt(h)
    for prefix in model.attention_prefixes():
        for m in ("wq", "wv"):
            name = f"{prefix}.{m}"
            model.adapters[name] = LoraAdapter(
                a=Tensor(rng.normal(0.0, a_std, size=(rank, h)), requires_grad=True),
                b=Tensor(np.zeros((h, rank)), requires_grad=True),
                rank=rank,
                alpha=float(alpha),
                dropout=float(dropout),
            )


def lora_linear(
    adapter: LoraAdapter,
    w: Tensor,
    x: Tensor,
    train_mode: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """w @ x plus the adapter delta (alpha/rank) * B @ (A @ drop(x)).

    Dropout applies to the adapter input branch only, and only in train mode,
    so the base path stays deterministic.
    """
    base = nm.linear(x, w)
    branch = x
    if train_mode and adapter.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode lora_linear with dropout needs an rng")
        branch = nm.dropout(branch, adapter.dropout, rng)
    delta = nm.linear(nm.linear(branch, adapter.a), adapter.b)
    return nm.add(base, nm.scale(delta, adapter.scaling))


def _proj(model, prefix, matrix, x, train_mode, rng):
    """Base projection plus the LoRA branch when this matrix is adapted."""
    w = model.params[f"{prefix}.{matrix}"]
    b = model.params[f"{prefix}.b{matrix[1]}"]
    out = nm.linear(x, w, b)
    adapter = model.adapters.get(f"{prefix}.{matrix}")
    if adapter is None:
        return out
    branch = x
    if train_mode and adapter.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with adapter dropout needs an rng")
        branch = nm.dropout(branch, adapter.dropout, rng)
    delta = nm.linear(nm.linear(branch, adapter.a), adapter.b)
    return nm.add(out, nm.scale(delta, adapter.scaling))


def _attention(model, prefix, x_q, x_kv, add_mask, train_mode, rng):
    q = _proj(model, prefix, "wq", x_q, train_mode, rng)
    k = nm.linear(x_kv, model.params[f"{prefix}.wk"], model.params[f"{prefix}.bk"])
    v = _proj(model, prefix, "wv", x_kv, train_mode, rng)
    ctx = nm.attention_core(q, k, v, model.config.num_heads, add_mask)
    return nm.linear(ctx, model.params[f"{prefix}.wo"], model.params[f"{prefix}.bo"])


def _ln(model, name, x):
    return nm.layer_norm(x, model.params[f"{name}.g"], model.params[f"{name}.b"])


def _mlp(model, prefix, x):
    h = nm.linear(x, model.params[f"{prefix}.mlp.w1"], model.params[f"{prefix}.mlp.b1"])
    return nm.linear(nm.relu(h), model.params[f"{prefix}.mlp.w2"], model.params[f"{prefix}.mlp.b2"])


def _key_pad_mask(valid: np.ndarray) -> np.ndarray | None:
    """Additive (B, 1, 1, T) mask hiding padded key frames; None when all valid."""
    if valid.all():
        return None
    return np.where(valid, 0.0, NEG_MASK)[:, None, None, :]


def encode_batch(
    model: TranscriberModel,
    x: np.ndarray,
    frame_mask: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode padded features (B, T, F) with validity mask (B, T) to (B, T, H)."""
    cfg = model.config
    bsz, t_a, f = x.shape
    if t_a > cfg.max_audio_frames:
        raise ValueError(
            f"{t_a} frames exceeds max_audio_frames={cfg.max_audio_frames}; "
            "split long inputs into windows (see the decoding module)"
        )
    if f != cfg.feature_dim:
        raise ValueError(f"feature dim {f} does not match model feature_dim {cfg.feature_dim}")
    if not np.isfinite(x).all():
        raise ValueError("encoder input contains non-finite values")

    mask = _key_pad_mask(frame_mask)
    h = nm.linear(Tensor(x), model.params["enc.in.w"], model.params["enc.in.b"])
    h = nm.add(h, Tensor(model.enc_pos[:t_a]))
    for i in range(cfg.encoder_layers):
        prefix = f"enc.{i}"
        a = _ln(model, f"{prefix}.ln1", h)
        h = nm.add(h, _attention(model, f"{prefix}.attn", a, a, mask, train_mode, rng))
        m = _ln(model, f"{prefix}.ln2", h)
        h = nm.add(h, _mlp(model, prefix, m))
    return _ln(model, "enc.ln_out", h)


def encode(
    model: TranscriberModel,
    x: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Encode one sample (T_a, F) to EncoderOutput with E of shape (T_a, H)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"encode expects a (frames, features) array, got shape {x.shape}")
    t_a = x.shape[0]
    e = encode_batch(model, x[None, :, :], np.ones((1, t_a), dtype=bool), train_mode, rng)
    return EncoderOutput(
        e=nm.reshape(e, (t_a, model.config.hidden_dim)),
        frame_mask=np.ones(t_a, dtype=bool),
    )


def decode_batch(
    model: TranscriberModel,
    enc: Tensor,
    enc_frame_mask: np.ndarray,
    y_in: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced decoder logits (B, L, V) for padded token ids (B, L)."""
    cfg = model.config
    bsz, seq = y_in.shape
    if seq > cfg.max_token_len:
        raise ValueError(f"{seq} tokens exceeds max_token_len={cfg.max_token_len}")
    if y_in.max() >= cfg.vocab_size or y_in.min() < 0:
        raise IndexError(
            f"token id out of range [0, {cfg.vocab_size}): min={y_in.min()}, max={y_in.max()}"
        )

    h = nm.embedding(model.params["dec.tok"], y_in)
    h = nm.add(h, nm.embedding(model.params["dec.pos"], np.arange(seq)))

    causal = np.where(np.tril(np.ones((seq, seq), dtype=bool)), 0.0, NEG_MASK)[None, None]
    cross_mask = _key_pad_mask(enc_frame_mask)
    for i in range(cfg.decoder_layers):
        prefix = f"dec.{i}"
        a = _ln(model, f"{prefix}.ln1", h)
        h = nm.add(h, _attention(model, f"{prefix}.self", a, a, causal, train_mode, rng))
        c = _ln(model, f"{prefix}.ln2", h)
        h = nm.add(h, _attention(model, f"{prefix}.cross", c, enc, cross_mask, train_mode, rng))
        m = _ln(model, f"{prefix}.ln3", h)
        h = nm.add(h, _mlp(model, prefix, m))
    h = _ln(model, "dec.ln_out", h)
    return nm.linear(h, model.params["dec.out.w"], model.params["dec.out.b"])


def decoder_forward(
    model: TranscriberModel,
    enc: EncoderOutput,
    y_in,
    train_mode: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits (L, V) for one token prefix; position t sees only y_in[0..t] and E."""
    y = np.asarray(y_in, dtype=np.int64)
    if y.ndim != 1 or y.size == 0 or y[0] != BOS_ID:
        raise ValueError(f"y_in must be a 1-d token sequence starting with BOS, got {y_in!r}")
    t_e = enc.e.values.shape[0]
    e_b = nm.reshape(enc.e, (1, t_e, model.config.hidden_dim))
    logits = decode_batch(model, e_b, enc.frame_mask[None, :], y[None, :], train_mode, rng)
    return nm.reshape(logits, (y.size, model.config.vocab_size))


def trainable_parameters(model: TranscriberModel, phase: str) -> list[Tensor]:
    """pretrain: all base weights; finetune: exactly the adapter A/B tensors."""
    if phase == "pretrain":
        return [model.params[name] for name in sorted(model.params)]
    if phase == "finetune":
        out = []
        for name in sorted(model.adapters):
            out.extend([model.adapters[name].a, model.adapters[name].b])
        return out
    raise ValueError(f"unknown phase {phase!r}, expected 'pretrain' or 'finetune'")


def set_trainable(model: TranscriberModel, phase: str) -> list[Tensor]:
    """Freeze everything except that phase's parameters; returns the live set.

    The requires_grad flag doubles as the per-parameter frozen marker, so
    backward skips gradient work for the frozen side entirely.
    """
    live = trainable_parameters(model, phase)
    live_ids = {id(p) for p in live}
    for p in model.params.values():
        p.requires_grad = id(p) in live_ids
    for ad in model.adapters.values():
        ad.a.requires_grad = id(ad.a) in live_ids
        ad.b.requires_grad = id(ad.b) in live_ids
    return live


def base_digest(model: TranscriberModel) -> str:
    """SHA-256 over all base weights; fine-tuning must never change it."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].values).astype("<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: JSON container, bit-exact round trip
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).astype("<f8").tobytes()).decode(),
    }


def _decode_array(obj: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    return flat.reshape(obj["shape"]).astype(np.float64)


def save_checkpoint(model: TranscriberModel, path, seed_lineage: dict | None = None) -> None:
    doc = {
        "kind": "voxmix-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "seed_lineage": seed_lineage or {},
        "base": {name: _encode_array(t.values) for name, t in model.params.items()},
        "adapters": {
            name: {
                "rank": ad.rank,
                "alpha": ad.alpha,
                "dropout": ad.dropout,
                "a": _encode_array(ad.a.values),
                "b": _encode_array(ad.b.values),
            }
            for name, ad in model.adapters.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path) -> tuple[TranscriberModel, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "voxmix-checkpoint":
        raise ValueError(f"{path} is not a voxmix checkpoint")
    config = ModelConfig(**doc["config"])
    params = {name: Tensor(_decode_array(obj), requires_grad=True) for name, obj in doc["base"].items()}
    model = TranscriberModel(config, params)
    for name, obj in doc["adapters"].items():
        model.adapters[name] = LoraAdapter(
            a=Tensor(_decode_array(obj["a"]), requires_grad=True),
            b=Tensor(_decode_array(obj["b"]), requires_grad=True),
            rank=int(obj["rank"]),
            alpha=float(obj["alpha"]),
            dropout=float(obj["dropout"]),
        )
    return model, doc["seed_lineage"]
