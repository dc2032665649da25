"""Sequence encoder producing fixed-size embeddings, with hand-derived gradients.

Two architectures share one interface:

* ``bag``: mean of the token embedding rows.
* ``transformer``: token + positional embeddings, post-norm self-attention
  blocks (multi-head attention, ReLU feedforward, residuals, layer norm),
  then mean pooling over the non-PAD positions.

Weights are float64 in memory; checkpoints store float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kgrefine.exceptions import ArtifactError
from kgrefine.store import read_header, write_header
from kgrefine.text import PAD_ID, pad_batch

BAG = "bag"
TRANSFORMER = "transformer"

CKPT_MAGIC = b"KGRCKPT\0"
CKPT_VERSION = 1

_LN_EPS = 1e-5
_LAYER_PARAMS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embedding_dim: int = 64
    architecture: str = BAG
    num_layers: int = 1
    num_heads: int = 2
    feedforward_dim: int = 128
    max_seq_len: int = 32
    init_seed: int = 0
    init_scale: float | None = None

    def __post_init__(self):
        if self.architecture not in (BAG, TRANSFORMER):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.embedding_dim <= 0 or self.vocab_size <= 0:
            raise ValueError("embedding_dim and vocab_size must be positive")
        if self.architecture == TRANSFORMER:
            if self.num_heads < 1 or self.embedding_dim % self.num_heads:
                raise ValueError("embedding_dim must be divisible by num_heads")
            if self.num_layers < 0 or self.feedforward_dim < 1 or self.max_seq_len < 1:
                raise ValueError("invalid transformer dimensions")
        if self.init_scale is None:
            object.__setattr__(self, "init_scale", self.embedding_dim ** -0.5)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.embedding_dim, self.feedforward_dim
        shapes = {"tok_emb": (self.vocab_size, d)}
        if self.architecture == TRANSFORMER:
            shapes["pos_emb"] = (self.max_seq_len, d)
            per_layer = {
                "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
                "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
                "ln1_g": (d,), "ln1_b": (d,), "w1": (d, f), "b1": (f,),
                "w2": (f, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
            }
            for layer in range(self.num_layers):
                for name in _LAYER_PARAMS:
                    shapes[f"l{layer}.{name}"] = per_layer[name]
        return shapes


def init_params(config: EncoderConfig) -> dict[str, np.ndarray]:
    """Uniform(-init_scale, init_scale) weights; biases 0, layer-norm gains 1."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in config.param_shapes().items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            params[name] = np.ones(shape)
        elif short.startswith("b") or short.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-config.init_scale, config.init_scale, size=shape)
    return params


class Encoder:
    """Config plus the trainable weights."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        shapes = config.param_shapes()
        if set(self.params) != set(shapes):
            raise ValueError("parameter names do not match the config")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dim(self) -> int:
        return self.config.embedding_dim

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    # -- forward -----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError("empty id sequence")
        if (ids < 0).any() or (ids >= self.config.vocab_size).any():
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        if not (ids != PAD_ID).any(axis=1).all():
            raise ValueError("empty id sequence (all PAD)")
        if self.config.architecture == TRANSFORMER and ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence longer than max_seq_len={self.config.max_seq_len}")

    def forward_batch(self, ids: np.ndarray, return_cache: bool = False):
        """Embed a right-padded ``(batch, length)`` id array into ``(batch, dim)``."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        p = self.params
        mask = (ids != PAD_ID).astype(np.float64)
        count = mask.sum(axis=1)
        x = p["tok_emb"][ids]
        cache = {"ids": ids, "mask": mask, "count": count, "layers": []}
        if self.config.architecture == TRANSFORMER:
            x = x + p["pos_emb"][None, : ids.shape[1]]
            for layer in range(self.config.num_layers):
                x, lcache = self._block_forward(layer, x, mask)
                cache["layers"].append(lcache)
        out = (x * mask[:, :, None]).sum(axis=1) / count[:, None]
        return (out, cache) if return_cache else out

    def forward(self, id_sequence: Sequence[int]) -> np.ndarray:
        return self.forward_batch(np.asarray(id_sequence, dtype=np.int64)[None, :])[0]

    def encode(self, sequences: Sequence[np.ndarray], batch_size: int = 512) -> np.ndarray:
        """Embed variable-length id sequences, batching by padding."""
        out = np.empty((len(sequences), self.dim))
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            out[start : start + len(chunk)] = self.forward_batch(pad_batch(chunk))
        return out

    def _block_forward(self, layer: int, x: np.ndarray, mask: np.ndarray):
        p = {name: self.params[f"l{layer}.{name}"] for name in _LAYER_PARAMS}
        b, n, d = x.shape
        h = self.config.num_heads
        dh = d // h

        def split(t):
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q = split(x @ p["wq"] + p["bq"])
        k = split(x @ p["wk"] + p["bk"])
        v = split(x @ p["wv"] + p["bv"])
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        key_ok = mask[:, None, None, :] > 0
        scores = np.where(key_ok, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        r1 = x + ctx @ p["wo"] + p["bo"]
        y1, ln1 = _layer_norm(r1, p["ln1_g"], p["ln1_b"])
        pre = y1 @ p["w1"] + p["b1"]
        hid = np.maximum(pre, 0.0)
        r2 = y1 + hid @ p["w2"] + p["b2"]
        y2, ln2 = _layer_norm(r2, p["ln2_g"], p["ln2_b"])
        cache = dict(x=x, q=q, k=k, v=v, attn=attn, ctx=ctx, y1=y1, ln1=ln1, pre=pre, hid=hid, ln2=ln2)
        return y2, cache

    # -- backward ----------------------------------------------------------

    def backward_batch(self, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradient of ``sum(d_out * forward_batch(ids))`` w.r.t. every weight."""
        p = self.params
        ids, mask, count = cache["ids"], cache["mask"], cache["count"]
        grads = {name: np.zeros_like(w) for name, w in p.items()}
        dx = mask[:, :, None] * (d_out / count[:, None])[:, None, :]
        if self.config.architecture == TRANSFORMER:
            for layer in reversed(range(self.config.num_layers)):
                dx = self._block_backward(layer, cache["layers"][layer], dx, grads)
            grads["pos_emb"][: ids.shape[1]] += dx.sum(axis=0)
        np.add.at(grads["tok_emb"], ids.ravel(), dx.reshape(-1, dx.shape[-1]))
        return grads

    def _block_backward(self, layer: int, c: dict, dy2: np.ndarray, grads: dict) -> np.ndarray:
        pre = f"l{layer}."
        p = {name: self.params[pre + name] for name in _LAYER_PARAMS}
        b, n, d = dy2.shape
        h = self.config.num_heads
        dh = d // h

        dr2, grads[pre + "ln2_g"][...], grads[pre + "ln2_b"][...] = _layer_norm_backward(dy2, p["ln2_g"], c["ln2"])
        dy1 = dr2.copy()
        grads[pre + "w2"][...] = _flat(c["hid"]).T @ _flat(dr2)
        grads[pre + "b2"][...] = dr2.sum(axis=(0, 1))
        dhid = dr2 @ p["w2"].T
        dpre = dhid * (c["pre"] > 0)
        grads[pre + "w1"][...] = _flat(c["y1"]).T @ _flat(dpre)
        grads[pre + "b1"][...] = dpre.sum(axis=(0, 1))
        dy1 += dpre @ p["w1"].T

        dr1, grads[pre + "ln1_g"][...], grads[pre + "ln1_b"][...] = _layer_norm_backward(dy1, p["ln1_g"], c["ln1"])
        dx = dr1.copy()
        grads[pre + "wo"][...] = _flat(c["ctx"]).T @ _flat(dr1)
        grads[pre + "bo"][...] = dr1.sum(axis=(0, 1))
        dctx = (dr1 @ p["wo"].T).reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        attn, q, k, v = c["attn"], c["q"], c["k"], c["v"]
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        x = c["x"]
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = dt.transpose(0, 2, 1, 3).reshape(b, n, d)
            grads[pre + "w" + name][...] = _flat(x).T @ _flat(dt)
            grads[pre + "b" + name][...] = dt.sum(axis=(0, 1))
            dx += dt @ p["w" + name].T
        return dx


def _flat(t: np.ndarray) -> np.ndarray:
    return t.reshape(-1, t.shape[-1])


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    n = dy.shape[-1]
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# -- triplet objective -------------------------------------------------------


def triplet_loss(d_ap, d_an, margin: float):
    """Hinge ``max(0, d_ap - d_an + margin)``; works on scalars and arrays."""
    d_ap = np.asarray(d_ap, dtype=np.float64)
    d_an = np.asarray(d_an, dtype=np.float64)
    if (d_ap < 0).any() or (d_an < 0).any():
        raise ValueError("distances must be non-negative")
    out = np.maximum(0.0, d_ap - d_an + margin)
    return float(out) if out.ndim == 0 else out


def _unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    # subgradient 0 where the distance vanishes
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)


def triplet_loss_and_grad(
    encoder: Encoder,
    anchors: Sequence[np.ndarray],
    positives: Sequence[np.ndarray],
    negatives: Sequence[np.ndarray],
    margin: float,
    reduction: str = "mean",
):
    """Per-example losses and the gradient of their mean (or sum).

    Returns ``(losses, grads, (d_ap, d_an))``.  The gradient is exactly zero
    for examples whose hinge is inactive.
    """
    b = len(anchors)
    seqs = list(anchors) + list(positives) + list(negatives)
    emb, cache = encoder.forward_batch(pad_batch(seqs), return_cache=True)
    ea, ep, en = emb[:b], emb[b : 2 * b], emb[2 * b :]
    diff_p, diff_n = ea - ep, ea - en
    d_ap = np.sqrt((diff_p**2).sum(axis=1))
    d_an = np.sqrt((diff_n**2).sum(axis=1))
    losses = triplet_loss(d_ap, d_an, margin)
    active = (losses > 0).astype(np.float64)
    scale = 1.0 / b if reduction == "mean" else 1.0
    up = _unit(diff_p, d_ap) * (active * scale)[:, None]
    un = _unit(diff_n, d_an) * (active * scale)[:, None]
    d_emb = np.concatenate([up - un, -up, un])
    if not active.any():
        grads = {name: np.zeros_like(w) for name, w in encoder.params.items()}
    else:
        grads = encoder.backward_batch(cache, d_emb)
    return losses, grads, (d_ap, d_an)


def backward(encoder: Encoder, triplet_ids: Sequence[np.ndarray], margin: float) -> dict[str, np.ndarray]:
    """Exact gradient of the triplet loss of one ``(anchor, positive, negative)``."""
    a, pos, neg = triplet_ids
    _, grads, _ = triplet_loss_and_grad(encoder, [a], [pos], [neg], margin, reduction="sum")
    return grads


def forward(encoder: Encoder, id_sequence: Sequence[int]) -> np.ndarray:
    return encoder.forward(id_sequence)


# -- checkpoint --------------------------------------------------------------


def save_checkpoint(encoder: Encoder, path, config_hash: str = "") -> None:
    block = json.dumps(asdict(encoder.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        write_header(fh, CKPT_MAGIC, CKPT_VERSION, config_hash)
        fh.write(struct.pack("<Q", len(block)) + block)
        for name in encoder.config.param_shapes():
            fh.write(np.ascontiguousarray(encoder.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Encoder, str]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing encoder checkpoint: {path}")
    buf = memoryview(path.read_bytes())
    config_hash, pos = read_header(buf, CKPT_MAGIC, CKPT_VERSION, path)
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    config = EncoderConfig(**json.loads(bytes(buf[pos : pos + n])))
    pos += n
    params = {}
    for name, shape in config.param_shapes().items():
        size = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
        params[name] = arr.astype(np.float64).reshape(shape)
        pos += 4 * size
    if pos != len(buf):
        raise ArtifactError(f"{path}: trailing bytes after weights")
    return Encoder(config, params), config_hash
