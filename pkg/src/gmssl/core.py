"""Shared numeric kernels: similarity, Gumbel sampling, gamma, clipping and GMT0 tensor files.

Arrays are stored as float32 (``as_tensor``) but every reduction is carried
out in float64.
"""

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GMT0"
UNIFORM_EPS = 1e-12


class NumericError(RuntimeError):
    """A non-finite value showed up in a computation."""

    def __init__(self, stage, detail=""):
        self.stage = stage
        super().__init__(f"non-finite value at stage '{stage}'" + (f": {detail}" if detail else ""))


class TensorFormatError(ValueError):
    pass


def as_tensor(x):
    """Cast to a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise ValueError(f"tensor contains a non-finite value at flat index {bad}")
    return arr


def check_finite(stage, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(stage)


def make_rng(seed, *keys):
    """PCG64 stream; extra integer keys derive an independent child stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


# --- cosine similarity -------------------------------------------------------

def cosine_sim(u, v):
    """Cosine of the angle between ``u`` and ``v``; 0.0 if either has zero norm."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_sim_grad(u, v, upstream=1.0):
    """Return (du, dv) of ``upstream * cos(u, v)``; zeros on the degenerate path."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return np.zeros_like(u), np.zeros_like(v)
    c = float(np.sum(u * v)) / (nu * nv)
    du = upstream * (v / (nu * nv) - c * u / nu**2)
    dv = upstream * (u / (nu * nv) - c * v / nv**2)
    return du, dv


def is_degenerate(u, v):
    return np.linalg.norm(np.asarray(u, np.float64)) == 0.0 or np.linalg.norm(np.asarray(v, np.float64)) == 0.0


def rowwise_cosine(U, V):
    """Cosine along the last axis of broadcast-compatible ``U`` and ``V``.

    Returns (cos, nu, nv); entries with a zero-norm operand get cos 0.
    """
    nu = np.sqrt(np.sum(U * U, axis=-1))
    nv = np.sqrt(np.sum(V * V, axis=-1))
    denom = nu * nv
    dot = np.sum(U * V, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    return c, nu, nv


def rowwise_cosine_grad(U, V, c, nu, nv, upstream):
    """Backward of ``rowwise_cosine``; ``upstream`` has the shape of ``c``."""
    ok = (nu * nv) > 0
    safe_nu = np.where(ok, nu, 1.0)[..., None]
    safe_nv = np.where(ok, nv, 1.0)[..., None]
    g = np.where(ok, upstream, 0.0)[..., None]
    cc = c[..., None]
    dU = g * (V / (safe_nu * safe_nv) - cc * U / safe_nu**2)
    dV = g * (U / (safe_nu * safe_nv) - cc * V / safe_nv**2)
    return dU, dV


# --- random sampling ---------------------------------------------------------

def sample_gumbel(rng, shape):
    u = rng.random(shape)
    u = np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


# --- special functions -------------------------------------------------------

def gamma_fn(z):
    z = float(z)
    if not z > 0.0:
        raise ValueError(f"gamma_fn is defined for z > 0, got {z}")
    return math.gamma(z)


def ggd_uncertainty(scale, shape):
    """Variance of a generalized Gaussian: scale**2 * G(3/shape) / G(1/shape)."""
    from scipy.special import gammaln

    scale = np.asarray(scale, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    return scale**2 * np.exp(gammaln(3.0 / shape) - gammaln(1.0 / shape))


# --- gradient clipping -------------------------------------------------------

def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.asarray(g, np.float64) ** 2)) for g in grads))


def clip_global_norm(grads, max_norm):
    """Scale all tensors by ``max_norm / g`` when their joint L2 norm g exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    g = global_norm(grads)
    if g <= max_norm:
        return [np.array(t, copy=True) for t in grads]
    scale = max_norm / g
    return [np.asarray(t) * np.asarray(scale, dtype=np.asarray(t).dtype) for t in grads]


# --- GMT0 tensor files -------------------------------------------------------

def encode_tensor(t):
    arr = as_tensor(t)
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape)}, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + arr.astype("<f4").tobytes()


def decode_tensor(buf):
    if len(buf) < 8:
        raise TensorFormatError(f"truncated file at offset {len(buf)}: need 8 header bytes")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r} at offset 0")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TensorFormatError(f"truncated header at offset {len(buf)}: expected {8 + hlen} bytes")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
        shape = [int(s) for s in header["shape"]]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise TensorFormatError(f"malformed JSON header at offset 8: {exc}") from None
    if dtype != "f32":
        raise TensorFormatError(f"unsupported dtype {dtype!r} at offset 8")
    if any(s < 0 for s in shape):
        raise TensorFormatError(f"negative extent in shape {shape} at offset 8")
    payload = buf[8 + hlen :]
    expected = 4 * math.prod(shape)
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload length mismatch at offset {8 + hlen}: shape {shape} needs {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise TensorFormatError(f"non-finite value at offset {8 + hlen + 4 * int(bad[0])}")
    return arr


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path, t):
    atomic_write_bytes(path, encode_tensor(t))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def save_named(directory, tensors, extra=None):
    """Write a directory of GMT0 tensors plus a manifest.json listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in tensors.items():
        fname = name.replace(".", "_") + ".gmt"
        save_tensor(directory / fname, t)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(t))})
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_named(directory):
    """Inverse of ``save_named``: returns (name -> tensor, manifest)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for e in manifest["tensors"]:
        t = load_tensor(directory / e["file"])
        if list(t.shape) != list(e["shape"]):
            raise TensorFormatError(f"{e['file']}: shape {list(t.shape)} disagrees with manifest {e['shape']}")
        tensors[e["name"]] = t
    return tensors, manifest
