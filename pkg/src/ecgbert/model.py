"""Embedding (token + position + U-Net CNN), transformer encoder, MLM and task heads."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autograd as ag
from .errors import DataError
from .sentences import MaskedBatch
from .signal_io import WINDOW_SECONDS
from .vocabulary import MASK, N_WAVE_TOKENS, VOCAB_SIZE

CHECKPOINT_VERSION = 1
HEAD_KINDS = ("dense_binary", "dense_multiclass", "residual_multiclass")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    vocab_size: int = VOCAB_SIZE
    dropout: float = 0.1
    unet_channels: tuple[int, ...] = (16, 32)
    window_samples: int = 2500
    unet_kernel: int = 7
    cnn_pool: str = "mean"  # reduction of U-Net rows over a wave span
    pooling: str = "cls"  # classification pooling: CLS vector or mean over real tokens
    mask_cnn_too: bool = False  # zero the CNN embedding at MASK positions
    position_mode: str = "index"  # "index": token ordinal; "time": bucket of the wave onset sample
    pos_init: str = "normal"  # "normal" or "sinusoidal" initial positional table
    duration_embedding: bool = True  # add a learned map of each wave's span length
    head_kind: str | None = None
    n_classes: int = 0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "unet_channels", tuple(int(c) for c in self.unet_channels))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size != N_WAVE_TOKENS + 4:
            raise ValueError(f"vocab_size must be {N_WAVE_TOKENS} + 4 specials")
        if len(self.unet_channels) != 2:
            raise ValueError("the U-Net has exactly two down/up blocks")
        if self.cnn_pool not in ("mean", "max") or self.pooling not in ("cls", "mean"):
            raise ValueError("cnn_pool must be mean|max and pooling cls|mean")
        if self.position_mode not in ("index", "time") or self.pos_init not in ("normal", "sinusoidal"):
            raise ValueError("position_mode must be index|time and pos_init normal|sinusoidal")
        if self.head_kind is not None:
            if self.head_kind not in HEAD_KINDS:
                raise ValueError(f"unknown head kind {self.head_kind!r}")
            if self.n_classes < 2:
                raise ValueError(f"a head needs n_classes >= 2, got {self.n_classes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every tensor; init 'buffer_*' marks non-trainable state."""
    d, k = cfg.d_model, cfg.unet_kernel
    c1, c2 = cfg.unet_channels
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (cfg.vocab_size, d), "normal"),
        ("pos_emb", (cfg.max_seq_len, d), "sinusoidal" if cfg.pos_init == "sinusoidal" else "normal"),
    ]

    def conv(name, cout, cin, kk):
        out.extend([(f"{name}.w", (cout, cin, kk), "conv"), (f"{name}.b", (cout,), "zeros")])

    def bn(name, c):
        out.extend(
            [
                (f"{name}.gamma", (c,), "ones"),
                (f"{name}.beta", (c,), "zeros"),
                (f"{name}.mean", (c,), "buffer_zeros"),
                (f"{name}.var", (c,), "buffer_ones"),
            ]
        )

    conv("unet.enc1.conv", c1, 1, k)
    bn("unet.enc1.bn", c1)
    conv("unet.enc2.conv", c2, c1, k)
    bn("unet.enc2.bn", c2)
    out.extend([("unet.dec1.up.w", (c2, c2, 2), "tconv"), ("unet.dec1.up.b", (c2,), "zeros")])
    conv("unet.dec1.conv", c2, 2 * c2, k)
    bn("unet.dec1.bn", c2)
    out.extend([("unet.dec2.up.w", (c2, c1, 2), "tconv"), ("unet.dec2.up.b", (c1,), "zeros")])
    conv("unet.dec2.conv", c1, 2 * c1, k)
    bn("unet.dec2.bn", c1)
    out.extend([("unet.out.w", (d, c1, 1), "normal"), ("unet.out.b", (d,), "zeros")])

    if cfg.duration_embedding:
        out.extend([("dur.w", (len(DURATION_FEATURES), d), "duration")])
    out.extend([("emb_ln.gamma", (d,), "ones"), ("emb_ln.beta", (d,), "zeros")])
    for i in range(cfg.n_layers):
        p = f"enc{i}"
        for m in ("q", "k", "v", "o"):
            out.extend([(f"{p}.attn.{m}.w", (d, d), "normal"), (f"{p}.attn.{m}.b", (d,), "zeros")])
        out.extend([(f"{p}.ln1.gamma", (d,), "ones"), (f"{p}.ln1.beta", (d,), "zeros")])
        out.extend([(f"{p}.ff1.w", (d, cfg.d_ff), "normal"), (f"{p}.ff1.b", (cfg.d_ff,), "zeros")])
        out.extend([(f"{p}.ff2.w", (cfg.d_ff, d), "normal"), (f"{p}.ff2.b", (d,), "zeros")])
        out.extend([(f"{p}.ln2.gamma", (d,), "ones"), (f"{p}.ln2.beta", (d,), "zeros")])

    out.extend([("mlm.w", (d, N_WAVE_TOKENS), "normal"), ("mlm.b", (N_WAVE_TOKENS,), "zeros")])
    out.extend(_head_shapes(cfg))
    return out


def _head_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, n = cfg.d_model, cfg.n_classes
    if cfg.head_kind is None:
        return []
    if cfg.head_kind.startswith("dense"):
        return [
            ("head.fc1.w", (d, d), "fanin"),
            ("head.fc1.b", (d,), "zeros"),
            ("head.fc2.w", (d, n), "fanin"),
            ("head.fc2.b", (n,), "zeros"),
        ]
    out = []
    for i in (1, 2):
        out.extend(
            [
                (f"head.res{i}.conv.w", (d, d, 3), "conv"),
                (f"head.res{i}.conv.b", (d,), "zeros"),
                (f"head.res{i}.bn.gamma", (d,), "ones"),
                (f"head.res{i}.bn.beta", (d,), "zeros"),
                (f"head.res{i}.bn.mean", (d,), "buffer_zeros"),
                (f"head.res{i}.bn.var", (d,), "buffer_ones"),
            ]
        )
    out.extend([("head.fc.w", (d, n), "fanin"), ("head.fc.b", (n,), "zeros")])
    return out


def init_params(cfg: ModelConfig, seed: int | None = None, names_filter=None) -> OrderedDict:
    gen = torch.Generator().manual_seed(cfg.init_seed if seed is None else seed)
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, shape, kind in _shapes(cfg):
        if names_filter is not None and not names_filter(name):
            continue
        if kind in ("zeros", "buffer_zeros"):
            t = torch.zeros(shape)
        elif kind in ("ones", "buffer_ones"):
            t = torch.ones(shape)
        elif kind == "normal":
            t = torch.randn(shape, generator=gen) * 0.02
        elif kind == "fanin":
            t = torch.randn(shape, generator=gen) / math.sqrt(shape[0])
        elif kind == "duration":
            t = torch.randn(shape, generator=gen) * 0.1
        elif kind == "sinusoidal":
            t = _sinusoidal(*shape)
        elif kind == "conv":
            t = torch.randn(shape, generator=gen) * math.sqrt(2.0 / (shape[1] * shape[2]))
        elif kind == "tconv":
            t = torch.randn(shape, generator=gen) * math.sqrt(2.0 / (shape[0] * shape[2]))
        else:
            raise AssertionError(kind)
        t = t.to(ag.DTYPE)
        t.requires_grad_(not kind.startswith("buffer"))
        params[name] = t
    return params


def _sinusoidal(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    out = torch.zeros(n, d, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return out * 0.05


DURATION_FEATURES = ("log1p_samples", "fraction_of_second")


def duration_features(boundaries: np.ndarray, fs: float) -> np.ndarray:
    """(B, L, 2) span-length features; zero rows for specials and padding."""
    n = np.clip(boundaries[..., 1] - boundaries[..., 0], 0, None).astype(np.float64)
    wave = boundaries[..., 0] >= 0
    feats = np.stack([np.log1p(n) / 5.0, n / fs], axis=-1)
    return np.where(wave[..., None], feats, 0.0)


def time_bucket(cfg: ModelConfig) -> int:
    """Samples per positional slot so a whole window fits between CLS and SEP slots."""
    return -(-cfg.window_samples // (cfg.max_seq_len - 2))


def position_ids(cfg: ModelConfig, input_ids: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    b, L = input_ids.shape
    if cfg.position_mode == "index":
        return np.tile(np.arange(L), (b, 1))
    # CLS at slot 0, waves at 1 + onset bucket, SEP and PAD in the last slot
    pos = np.full((b, L), cfg.max_seq_len - 1, dtype=np.int64)
    pos[:, 0] = 0
    wave = boundaries[..., 0] >= 0
    pos[wave] = np.clip(1 + boundaries[..., 0][wave] // time_bucket(cfg), 1, cfg.max_seq_len - 2)
    return pos


# ---------------------------------------------------------------- model


class EcgBert:
    """Functional model over an ordered name -> tensor map (parameters and BN buffers)."""

    def __init__(self, cfg: ModelConfig, params: OrderedDict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = {n: s for n, s, _ in _shapes(cfg)}
        if list(self.params) != list(expected):
            raise DataError("parameter names do not match the model config")
        for n, t in self.params.items():
            if tuple(t.shape) != expected[n]:
                raise DataError(f"{n}: shape {tuple(t.shape)} but config implies {expected[n]}")
        self.training = False

    def train(self, mode: bool = True) -> EcgBert:
        self.training = mode
        return self

    def eval(self) -> EcgBert:
        return self.train(False)

    def trainable(self) -> OrderedDict:
        return OrderedDict((n, t) for n, t in self.params.items() if t.requires_grad)

    def with_head(self, kind: str, n_classes: int, seed: int = 0) -> EcgBert:
        """Copy of this model with a freshly initialised task head (encoder weights shared by value)."""
        cfg = ModelConfig.from_dict({**self.cfg.to_dict(), "head_kind": kind, "n_classes": n_classes})
        head = init_params(cfg, seed=seed, names_filter=lambda n: n.startswith("head."))
        params = OrderedDict()
        for n, _, _ in _shapes(cfg):
            if n.startswith("head."):
                params[n] = head[n]
            else:
                src = self.params[n]
                params[n] = src.detach().clone().requires_grad_(src.requires_grad)
        return EcgBert(cfg, params)

    # ---- U-Net

    def _bn(self, x, name):
        p = self.params
        return ag.batch_norm1d(x, p[f"{name}.gamma"], p[f"{name}.beta"], p[f"{name}.mean"], p[f"{name}.var"], self.training)

    def _conv_block(self, x, name):
        p = self.params
        h = ag.conv1d(x, p[f"{name}.conv.w"], p[f"{name}.conv.b"], padding=self.cfg.unet_kernel // 2)
        return ag.relu(self._bn(h, f"{name}.bn"))

    def unet_features(self, raw) -> torch.Tensor:
        """(W, n) raw windows -> (W, n, d_model) per-sample features."""
        x = torch.as_tensor(raw, dtype=self.params["unet.out.w"].dtype)
        squeeze = x.dim() == 1
        if squeeze:
            x = x[None]
        n = x.shape[-1]
        pad = (-n) % 4
        if pad:
            x = torch.cat([x, x.new_zeros(x.shape[0], pad)], dim=1)
        x = x[:, None, :]
        p = self.params
        h1 = self._conv_block(x, "unet.enc1")
        h2 = self._conv_block(ag.max_pool1d(h1, 2), "unet.enc2")
        bottom = ag.max_pool1d(h2, 2)
        u1 = ag.transposed_conv1d(bottom, p["unet.dec1.up.w"], p["unet.dec1.up.b"], stride=2)
        d1 = self._conv_block(ag.concat([u1, h2], axis=1), "unet.dec1")
        u2 = ag.transposed_conv1d(d1, p["unet.dec2.up.w"], p["unet.dec2.up.b"], stride=2)
        d2 = self._conv_block(ag.concat([u2, h1], axis=1), "unet.dec2")
        out = ag.conv1d(d2, p["unet.out.w"], p["unet.out.b"])
        out = out[:, :, :n].transpose(1, 2)
        return out[0] if squeeze else out

    # ---- embedding

    def _span_pool(self, feats: torch.Tensor, boundaries: np.ndarray, window_index: np.ndarray) -> torch.Tensor:
        b, L, _ = boundaries.shape
        W, T, d = feats.shape
        on, off = boundaries[..., 0], boundaries[..., 1]
        wave = on >= 0
        if np.any(wave & ((on < 0) | (off > T) | (off <= on))):
            raise ValueError(f"token boundary outside the {T}-sample window")
        rows, cols = np.nonzero(wave)
        lengths = (off - on)[rows, cols]
        slot = np.repeat(rows * L + cols, lengths)
        starts = np.repeat(on[rows, cols] - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        t_idx = np.arange(slot.size) + starts
        src = np.repeat(window_index[rows], lengths) * T + t_idx
        flat = feats.reshape(W * T, d)
        slot_t = torch.as_tensor(slot, dtype=torch.long)
        vals = flat[torch.as_tensor(src, dtype=torch.long)]
        if self.cfg.cnn_pool == "mean":
            out = torch.zeros(b * L, d, dtype=feats.dtype).index_add(0, slot_t, vals)
            count = np.zeros(b * L)
            count[rows * L + cols] = lengths
            out = out / torch.as_tensor(np.maximum(count, 1.0), dtype=feats.dtype)[:, None]
        else:
            out = torch.zeros(b * L, d, dtype=feats.dtype).index_reduce(0, slot_t, vals, "amax", include_self=False)
        return out.reshape(b, L, d)

    def embed(self, batch: MaskedBatch) -> torch.Tensor:
        cfg, p = self.cfg, self.params
        ids = torch.as_tensor(batch.input_ids, dtype=torch.long)
        b, L = ids.shape
        if L > cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        pos = position_ids(cfg, batch.input_ids, batch.boundaries)
        h = ag.embedding_lookup(p["tok_emb"], ids) + ag.embedding_lookup(p["pos_emb"], pos)
        if batch.signals is not None:
            if batch.signals.shape[-1] != cfg.window_samples:
                raise ValueError(f"window has {batch.signals.shape[-1]} samples, config expects {cfg.window_samples}")
            feats = self.unet_features(batch.signals)
            cnn = self._span_pool(feats, batch.boundaries, batch.window_index)
            if cfg.mask_cnn_too:
                cnn = cnn * (ids != MASK)[..., None].to(cnn.dtype)
            h = h + cnn
        if cfg.duration_embedding:
            fs = cfg.window_samples / WINDOW_SECONDS
            dur = torch.as_tensor(duration_features(batch.boundaries, fs), dtype=h.dtype)
            h = h + ag.matmul(dur, p["dur.w"])
        return h

    # ---- encoder

    def encode(self, hidden: torch.Tensor, attention_mask, return_attention: bool = False):
        cfg, p = self.cfg, self.params
        att = torch.as_tensor(attention_mask).to(torch.bool)
        b, L, d = hidden.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        h = ag.layer_norm(hidden, p["emb_ln.gamma"], p["emb_ln.beta"])
        h = ag.dropout(h, cfg.dropout, self.training)
        maps = []
        for i in range(cfg.n_layers):
            pre = f"enc{i}.attn"

            def proj(x, m):
                return ag.matmul(x, p[f"{pre}.{m}.w"]) + p[f"{pre}.{m}.b"]

            q = proj(h, "q").reshape(b, L, nh, dh).transpose(1, 2)
            k = proj(h, "k").reshape(b, L, nh, dh).transpose(1, 2)
            v = proj(h, "v").reshape(b, L, nh, dh).transpose(1, 2)
            scores = ag.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
            scores = scores.masked_fill(~att[:, None, None, :], float("-inf"))
            w = ag.softmax(scores, axis=-1)
            if return_attention:
                maps.append(w.detach())
            ctx = ag.matmul(ag.dropout(w, cfg.dropout, self.training), v).transpose(1, 2).reshape(b, L, d)
            a = proj(ctx, "o")
            h = ag.layer_norm(h + ag.dropout(a, cfg.dropout, self.training), p[f"enc{i}.ln1.gamma"], p[f"enc{i}.ln1.beta"])
            f = ag.gelu(ag.matmul(h, p[f"enc{i}.ff1.w"]) + p[f"enc{i}.ff1.b"])
            f = ag.matmul(f, p[f"enc{i}.ff2.w"]) + p[f"enc{i}.ff2.b"]
            h = ag.layer_norm(h + ag.dropout(f, cfg.dropout, self.training), p[f"enc{i}.ln2.gamma"], p[f"enc{i}.ln2.beta"])
        return (h, maps) if return_attention else h

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return ag.matmul(hidden, self.params["mlm.w"]) + self.params["mlm.b"]

    def pool(self, hidden: torch.Tensor, attention_mask) -> torch.Tensor:
        if self.cfg.pooling == "cls":
            return hidden[:, 0]
        m = torch.as_tensor(attention_mask, dtype=hidden.dtype)[..., None]
        return (hidden * m).sum(1) / m.sum(1)

    def head_forward(self, hidden: torch.Tensor, attention_mask) -> torch.Tensor:
        cfg, p = self.cfg, self.params
        if cfg.head_kind is None:
            raise ValueError("model has no task head")
        if cfg.head_kind.startswith("dense"):
            z = self.pool(hidden, attention_mask)
            z = ag.gelu(ag.matmul(z, p["head.fc1.w"]) + p["head.fc1.b"])
            return ag.matmul(z, p["head.fc2.w"]) + p["head.fc2.b"]
        m = torch.as_tensor(attention_mask, dtype=hidden.dtype)[:, None, :]
        x = hidden.transpose(1, 2) * m
        for i in (1, 2):
            c = ag.conv1d(x, p[f"head.res{i}.conv.w"], p[f"head.res{i}.conv.b"], padding=1)
            x = (x + ag.relu(self._bn(c, f"head.res{i}.bn"))) * m
        z = x.sum(-1) / m.sum(-1)
        return ag.matmul(z, p["head.fc.w"]) + p["head.fc.b"]

    def forward_mlm(self, batch: MaskedBatch) -> torch.Tensor:
        return self.mlm_logits(self.encode(self.embed(batch), batch.attention_mask))

    def forward_cls(self, batch: MaskedBatch) -> torch.Tensor:
        return self.head_forward(self.encode(self.embed(batch), batch.attention_mask), batch.attention_mask)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: EcgBert
    vocab_fingerprint: str
    adam: ag.AdamState | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """``manifest.json`` plus ``params.bin`` (little-endian float32 in manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0

    def put(name, role, t):
        nonlocal offset
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "role": role, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    for name, t in ckpt.model.params.items():
        put(name, "param" if t.requires_grad else "buffer", t)
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
        for name in ckpt.model.params:
            if name in a.m:
                put(name, "adam_m", a.m[name])
                put(name, "adam_v", a.v[name])
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.model.cfg.to_dict(),
        "vocab_fingerprint": ckpt.vocab_fingerprint,
        "tensors": entries,
        "adam": adam,
        "extra": ckpt.extra,
    }
    (directory / "params.bin").write_bytes(b"".join(blobs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"checkpoint incomplete: {e.filename} missing") from e
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint manifest is not valid JSON: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as e:
        raise DataError(f"bad model config in checkpoint: {e}") from e
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    m, v = {}, {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise DataError(f"params.bin truncated at tensor {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.float32))
        if e["role"] == "param":
            params[e["name"]] = t.requires_grad_(True)
        elif e["role"] == "buffer":
            params[e["name"]] = t
        elif e["role"] == "adam_m":
            m[e["name"]] = t
        elif e["role"] == "adam_v":
            v[e["name"]] = t
        else:
            raise DataError(f"unknown tensor role {e['role']!r}")
    model = EcgBert(cfg, params)
    adam = None
    if manifest.get("adam") is not None:
        adam = ag.AdamState(**manifest["adam"], m=m, v=v)
    return Checkpoint(model, manifest["vocab_fingerprint"], adam, manifest.get("extra", {}))
