"""Binary checkpoints: named f32 parameter maps plus optimizer state and run metadata.

Layout (little-endian)::

    b"MAE3DCK1"
    u32 meta_len, meta_len bytes of UTF-8 JSON (epoch, config hash, flat config, adam scalars)
    three tensor maps: parameters, adam first moments, adam second moments
        u32 count, then per entry:
        u32 name_len, name bytes, u32 rank, rank x u64 dims, prod(dims) x f32
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .autodiff import OptimizerState

MAGIC = b"MAE3DCK1"
SUBSETS = {
    "extractor": ("extractor.",),
    "extractor+pos": ("extractor.", "pos_embed."),
}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    epoch: int = 0
    config_hash: str = ""
    config_text: str = ""
    meta: dict = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None

    def components(self):
        return sorted({name.split(".", 1)[0] for name in self.params})

    def subset(self, prefixes, strip=True):
        out = {}
        for name, arr in self.params.items():
            for pre in prefixes:
                if name.startswith(pre):
                    out[name[len(pre):] if strip else name] = arr
        return out


def _write_map(f, arrays: Dict[str, np.ndarray]):
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        arr = np.asarray(arr)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save(path, model, cfg_text="", config_hash="", epoch=0, optimizer=None, extra_meta=None):
    state: Optional[OptimizerState] = getattr(optimizer, "state", optimizer)
    meta = {"epoch": epoch, "config_hash": config_hash, "config": cfg_text,
            "components": sorted({n.split(".", 1)[0] for n, _ in model.named_parameters()})}
    if state is not None:
        meta["adam"] = {"step": state.step, "base_lr": state.base_lr, "weight_decay": state.weight_decay,
                        "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    if extra_meta:
        meta.update(extra_meta)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        _write_map(f, {n: p.data for n, p in model.named_parameters()})
        _write_map(f, state.m if state is not None else {})
        _write_map(f, state.v if state is not None else {})


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"offset {self.off}: truncated while reading {what} "
                                  f"(need {n} bytes, {len(self.buf) - self.off} left)")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def read_map(self, section):
        (count,) = self.unpack("<I", f"{section} count")
        out = {}
        for _ in range(count):
            start = self.off
            (nlen,) = self.unpack("<I", "name length")
            if nlen > 4096:
                raise CheckpointError(f"offset {start}: implausible name length {nlen}")
            try:
                name = self.take(nlen, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"offset {start + 4}: parameter name is not UTF-8") from None
            (rank,) = self.unpack("<I", f"rank of {name!r}")
            if rank > 8:
                raise CheckpointError(f"offset {self.off - 4}: implausible rank {rank} for {name!r}")
            dims = self.unpack(f"<{rank}Q", f"dims of {name!r}")
            count_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = self.take(4 * count_vals, f"values of {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def load(path, subset: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint. ``subset='extractor'`` keeps only patch-extractor weights
    (``'extractor+pos'`` also keeps the positional embedding)."""
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("offset 0: bad magic, not a MAE3D checkpoint")
    (mlen,) = r.unpack("<I", "metadata length")
    start = r.off
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"offset {start}: corrupt metadata ({exc})") from None
    params = r.read_map("parameter")
    m = r.read_map("adam m")
    v = r.read_map("adam v")
    if r.off != len(buf):
        raise CheckpointError(f"offset {r.off}: {len(buf) - r.off} trailing bytes")

    opt = None
    if "adam" in meta:
        a = meta["adam"]
        opt = OptimizerState(base_lr=a["base_lr"], weight_decay=a["weight_decay"], beta1=a["beta1"],
                             beta2=a["beta2"], eps=a["eps"], step=a["step"], m=m, v=v)
    ck = Checkpoint(params, meta.get("epoch", 0), meta.get("config_hash", ""), meta.get("config", ""), meta, opt)
    if subset is not None:
        if subset not in SUBSETS:
            raise CheckpointError(f"unknown subset {subset!r}; choose from {sorted(SUBSETS)}")
        ck.params = ck.subset(SUBSETS[subset], strip=False)
        ck.optimizer = None
    return ck


def restore(model, ck: Checkpoint, force=False):
    """Load every parameter of ``ck`` into ``model``; the config hash must match unless ``force``."""
    want = model.cfg.hash()
    if ck.config_hash and ck.config_hash != want and not force:
        raise CheckpointError(f"config hash mismatch: checkpoint {ck.config_hash}, model {want} (use --force)")
    try:
        model.load_state_dict(ck.params, strict=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None


def load_extractor(module, ck: Checkpoint, prefix="extractor."):
    """Load the ``prefix`` weights of ``ck`` into ``module`` (e.g. a downstream backbone's extractor)."""
    sub = ck.subset((prefix,))
    if not sub:
        raise CheckpointError(f"checkpoint has no {prefix.rstrip('.')} weights")
    try:
        return module.load_state_dict(sub, strict=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"incompatible checkpoint: {exc}") from None
