"""Modality encoders, retrieval encoders, heads, reconstructors and cross-attention fusion.

Parameters live in flat ``name -> array`` dicts so they can be checkpointed
and handed to the optimizer as-is. Weight matrices are stored in
``(in, out)`` orientation and applied as ``x @ W + b``. Every forward
function takes a mapping of leaves (see ``numkit.leaves``) and a name
prefix, and works on single samples or on a leading batch axis.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import numkit as nk
from .errors import ShapeError
from .numkit import Tensor

MODALITIES = ("a", "t", "v")


def _dense(rng: nk.Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out), scale=1.0 / math.sqrt(fan_in))


def init_encoder(rng: nk.Rng, prefix: str, d_in: int, d: int = 32, tokens: int = 4) -> dict:
    """One token-projection + self-attention + feed-forward encoder."""
    return {
        f"{prefix}.W1": _dense(rng, d_in, tokens * d),
        f"{prefix}.b1": np.zeros(tokens * d),
        f"{prefix}.Wq": _dense(rng, d, d),
        f"{prefix}.Wk": _dense(rng, d, d),
        f"{prefix}.Wv": _dense(rng, d, d),
        f"{prefix}.Wo": _dense(rng, d, d),
        f"{prefix}.Wf1": _dense(rng, d, 4 * d),
        f"{prefix}.bf1": np.zeros(4 * d),
        f"{prefix}.Wf2": _dense(rng, 4 * d, d),
        f"{prefix}.bf2": np.zeros(d),
    }


def init_encoders(rng: nk.Rng, dims: Mapping[str, int], d: int = 32, tokens: int = 4,
                  prefix: str = "enc") -> dict:
    params = {}
    for m in MODALITIES:
        params.update(init_encoder(rng.child(m), f"{prefix}.{m}", dims[m], d, tokens))
    return params


def init_retrieval_encoders(rng: nk.Rng, dims: Mapping[str, int], d_r: int = 32,
                            n_classes: int | None = None) -> dict:
    """Two affine layers per modality; optionally a d_r -> C head used only to fit them."""
    params = {}
    for m in MODALITIES:
        r = rng.child(m)
        params[f"ret.{m}.W1"] = _dense(r, dims[m], d_r)
        params[f"ret.{m}.b1"] = np.zeros(d_r)
        params[f"ret.{m}.W2"] = _dense(r, d_r, d_r)
        params[f"ret.{m}.b2"] = np.zeros(d_r)
        if n_classes is not None:
            params.update(init_head(r, f"ret.{m}.cls", d_r, n_classes))
    return params


def init_head(rng: nk.Rng, prefix: str, d_in: int, n_classes: int) -> dict:
    return {f"{prefix}.W": _dense(rng, d_in, n_classes), f"{prefix}.b": np.zeros(n_classes)}


def init_heads(rng: nk.Rng, d: int, n_classes: int, per_modality: bool = True, joint: bool = True) -> dict:
    params = {}
    if per_modality:
        for m in MODALITIES:
            params.update(init_head(rng.child(m), f"cls.{m}", d, n_classes))
    if joint:
        params.update(init_head(rng.child("joint"), "cls.joint", 3 * d, n_classes))
    return params


def init_linear_reconstructors(rng: nk.Rng, dims: Mapping[str, int], d: int) -> dict:
    params = {}
    for m in MODALITIES:
        params[f"rec.{m}.W"] = _dense(rng.child(m), 3 * d, dims[m])
        params[f"rec.{m}.b"] = np.zeros(dims[m])
    return params


def init_autoencoders(rng: nk.Rng, dims: Mapping[str, int], d: int, d_h: int = 64) -> dict:
    params = {}
    for m in MODALITIES:
        r = rng.child(m)
        params[f"ae.{m}.W1"] = _dense(r, 3 * d, d_h)
        params[f"ae.{m}.b1"] = np.zeros(d_h)
        params[f"ae.{m}.W2"] = _dense(r, d_h, dims[m])
        params[f"ae.{m}.b2"] = np.zeros(dims[m])
    return params


def init_fusion(rng: nk.Rng, d: int) -> dict:
    return {f"fuse.{w}": _dense(rng.child(w), d, d) for w in ("Wq", "Wk", "Wv")}


# ------------------------------------------------------------ forward


def _affine(x, P, prefix):
    return nk.add(nk.matmul(x, P[f"{prefix}.W"]), P[f"{prefix}.b"])


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    scores = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(d))
    return nk.matmul(nk.softmax(scores), v)


def encode(x, m: str, P: Mapping[str, Tensor], training: bool = False, rng: nk.Rng | None = None,
           dropout: float = 0.5, prefix: str = "enc") -> Tensor:
    """Raw modality vector(s) -> L x d token sequence(s).

    ``x`` of ``None`` means the modality is missing and is replaced by the
    zero vector. Dropout hits the feed-forward hidden layer in training only.
    """
    p = f"{prefix}.{m}"
    W1 = P[f"{p}.W1"]
    d_in, width = W1.shape
    d = P[f"{p}.Wq"].shape[0]
    if x is None:
        x = np.zeros(d_in)
    x = nk.as_tensor(x)
    if x.shape[-1] != d_in:
        raise ShapeError(f"encode[{m}]: expected raw dim {d_in}, got {x.shape[-1]}")
    batch = x.shape[:-1]
    h = nk.add(nk.matmul(x, W1), P[f"{p}.b1"])
    seq = nk.reshape(h, (*batch, width // d, d))
    att = attention(nk.matmul(seq, P[f"{p}.Wq"]), nk.matmul(seq, P[f"{p}.Wk"]), nk.matmul(seq, P[f"{p}.Wv"]))
    seq = nk.add(seq, nk.matmul(att, P[f"{p}.Wo"]))
    hid = nk.gelu(nk.add(nk.matmul(seq, P[f"{p}.Wf1"]), P[f"{p}.bf1"]))
    hid = nk.dropout(hid, dropout, rng, training)
    return nk.add(seq, nk.add(nk.matmul(hid, P[f"{p}.Wf2"]), P[f"{p}.bf2"]))


def pool(f) -> Tensor:
    """Mean over the token axis."""
    return nk.mean(f, axis=-2)


def retrieval_embed(x, m: str, P: Mapping[str, Tensor]) -> Tensor:
    h = nk.gelu(nk.add(nk.matmul(x, P[f"ret.{m}.W1"]), P[f"ret.{m}.b1"]))
    return nk.add(nk.matmul(h, P[f"ret.{m}.W2"]), P[f"ret.{m}.b2"])


def classify(features, P: Mapping[str, Tensor], head: str) -> Tensor:
    """Affine logits from pooled features; ``head`` is e.g. ``"cls.a"`` or ``"cls.joint"``."""
    features = nk.as_tensor(features)
    W = P[f"{head}.W"]
    if features.shape[-1] != W.shape[0]:
        raise ShapeError(f"{head}: expects width {W.shape[0]}, got {features.shape[-1]}")
    return _affine(features, P, head)


def joint_features(pooled: Mapping[str, Tensor]) -> Tensor:
    return nk.concat([pooled[m] for m in MODALITIES], axis=-1)


def reconstruct_linear(f_a, f_t, f_v, P: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """x_hat^m = [f_a; f_t; f_v] @ W_m + b_m for every modality."""
    joint = nk.concat([f_a, f_t, f_v], axis=-1)
    return {m: _affine(joint, P, f"rec.{m}") for m in MODALITIES}


def reconstruct_autoencoder(joint: Tensor, m: str, P: Mapping[str, Tensor]) -> Tensor:
    hid = nk.gelu(nk.add(nk.matmul(joint, P[f"ae.{m}.W1"]), P[f"ae.{m}.b1"]))
    return nk.add(nk.matmul(hid, P[f"ae.{m}.W2"]), P[f"ae.{m}.b2"])


def cross_attention(query, keyvalue, P: Mapping[str, Tensor]) -> Tensor:
    """Single-head cross attention: no residual, no output projection."""
    query, keyvalue = nk.as_tensor(query), nk.as_tensor(keyvalue)
    if query.shape[-1] != keyvalue.shape[-1]:
        raise ShapeError(f"cross_attention: widths {query.shape[-1]} and {keyvalue.shape[-1]} differ")
    return attention(nk.matmul(query, P["fuse.Wq"]), nk.matmul(keyvalue, P["fuse.Wk"]),
                     nk.matmul(keyvalue, P["fuse.Wv"]))


def fuse_pair(f_p, f_q, P: Mapping[str, Tensor]) -> Tensor:
    return nk.add(cross_attention(f_p, f_q, P), cross_attention(f_q, f_p, P))
