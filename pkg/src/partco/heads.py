"""Trainable heads: token adapter, projection MLPs, category prototypes.

Everything is plain numpy with explicit backward passes.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def l2_normalize(y, eps=1e-12):
    r = np.sqrt((y * y).sum(axis=-1, keepdims=True))
    r = np.maximum(r, eps)
    return y / r, r


def l2_normalize_backward(g, z, r):
    """Gradient w.r.t. ``y`` given ``z = y / r`` and upstream ``g``."""
    return (g - z * (g * z).sum(axis=-1, keepdims=True)) / r


def init_mlp(rng, d_in, d_hidden, d_out):
    def layer(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in), np.zeros(fan_out)

    W1, b1 = layer(d_in, d_hidden)
    W2, b2 = layer(d_hidden, d_hidden)
    W3, b3 = layer(d_hidden, d_out)
    return {"W1": W1, "b1": b1, "W2": W2, "b2": b2, "W3": W3, "b3": b3}


def mlp_forward(p, x):
    a1 = x @ p["W1"] + p["b1"]
    h1 = silu(a1)
    a2 = h1 @ p["W2"] + p["b2"]
    h2 = silu(a2)
    y = h2 @ p["W3"] + p["b3"]
    return y, (x, a1, h1, a2, h2)


def mlp_backward(p, cache, gy):
    x, a1, h1, a2, h2 = cache
    grads = {"W3": h2.T @ gy, "b3": gy.sum(axis=0)}
    ga2 = (gy @ p["W3"].T) * silu_grad(a2)
    grads["W2"] = h1.T @ ga2
    grads["b2"] = ga2.sum(axis=0)
    ga1 = (ga2 @ p["W2"].T) * silu_grad(a1)
    grads["W1"] = x.T @ ga1
    grads["b1"] = ga1.sum(axis=0)
    return grads, ga1 @ p["W1"].T


@dataclass
class HeadParams:
    """``adapter`` (d x d) maps frozen tokens into the trainable feature space
    shared by every head; ``psi`` and ``psi_p`` are the representation and part
    projection MLPs; ``prototypes`` holds K unit-norm rows."""

    adapter: np.ndarray
    psi: dict
    psi_p: dict
    prototypes: np.ndarray

    @classmethod
    def init(cls, dim, num_classes, rep_dim=128, part_dim=128, seed=0):
        rng = np.random.default_rng(seed)
        psi = init_mlp(rng, dim, 2 * dim, rep_dim)
        psi_p = init_mlp(rng, dim, 2 * dim, part_dim)
        protos, _ = l2_normalize(rng.standard_normal((num_classes, dim)))
        return cls(np.eye(dim), psi, psi_p, protos)

    def layout(self):
        """Ordered (name, array) pairs; the checkpoint payload follows this order."""
        items = [("adapter", self.adapter)]
        items += [(f"psi.{k}", self.psi[k]) for k in sorted(self.psi)]
        items += [(f"psi_p.{k}", self.psi_p[k]) for k in sorted(self.psi_p)]
        items.append(("prototypes", self.prototypes))
        return items

    @classmethod
    def from_layout(cls, items):
        d = dict(items)
        psi = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("psi.")}
        psi_p = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("psi_p.")}
        return cls(d["adapter"], psi, psi_p, d["prototypes"])

    def copy(self):
        return HeadParams.from_layout([(k, v.copy()) for k, v in self.layout()])

    def zeros_like(self):
        return HeadParams.from_layout([(k, np.zeros_like(v)) for k, v in self.layout()])

    @property
    def dim(self):
        return self.adapter.shape[0]

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for _, v in self.layout())


# checkpoint: b"PCKP" | u32 version | u32 n_entries | u32 meta_len | meta utf-8
#             | per entry: u16 name_len | name | u32 ndim | u32 dims...
#             | f64 payload for every entry, in table order
CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


def save_checkpoint(params, path, meta=""):
    items = params.layout()
    meta_b = meta.encode("utf-8")
    out = [struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, len(items), len(meta_b)), meta_b]
    for name, arr in items:
        nb = name.encode("ascii")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for _, arr in items:
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Return ``(HeadParams, meta_text)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CKPT_MAGIC!r}", offset=0)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    _, version, n, meta_len = struct.unpack_from("<4sIII", raw, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    pos = 16
    try:
        meta = raw[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
        table = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("ascii")
            pos += ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            table.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt layout table: {exc}", offset=pos) from None
    items = []
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated payload for {name}", offset=pos)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        items.append((name, arr.reshape(shape)))
        pos += 8 * count
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes", offset=pos)
    return HeadParams.from_layout(items), meta
