"""Per-patch node embeddings: a deterministic statistical encoder, a
trainable linear projection, and a binary feature-cache format for
importing embeddings computed elsewhere.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, DataError
from .grid import PatchLayout

BUILTIN_DIM = 128
_HIST_BINS = 32
_VAR_BLOCK = 8

CACHE_MAGIC = b"UGQF"
CACHE_VERSION = 1


@dataclass
class RawFeatures:
    matrix: np.ndarray  # (N, d_raw)
    d_raw: int
    source: str  # "builtin-stat" | "imported-cache"


@dataclass
class NodeFeatures:
    matrix: np.ndarray  # (N, d)
    d: int


@dataclass
class ProjectionParams:
    weight: np.ndarray  # (d_raw, d)
    bias: np.ndarray  # (d,)


def init_projection(d_raw, d, rng):
    """Seeded uniform +-1/sqrt(d_raw) weights, zero bias."""
    bound = 1.0 / np.sqrt(d_raw)
    weight = rng.uniform(-bound, bound, size=(d_raw, d))
    return ProjectionParams(weight=weight, bias=np.zeros(d))


def _luminance(patch):
    # Rec.601 weights
    return 0.299 * patch[:, :, 0] + 0.587 * patch[:, :, 1] + 0.114 * patch[:, :, 2]


def _hist(values, lo, hi):
    counts, _ = np.histogram(values, bins=_HIST_BINS, range=(lo, hi))
    total = counts.sum()
    if total == 0:
        return np.zeros(_HIST_BINS)
    return counts / total


def encode_builtin(patch):
    """Deterministic 128-dim statistics of one P x P x 3 patch.

    Layout: per-channel mean/std (6), 32-bin luminance histogram, 32-bin
    gradient-magnitude histogram (cyclic central differences), 32-bin
    local-variance histogram over 8x8 blocks, luminance Laplacian energy,
    luminance entropy, zero padding to 128. Histograms are normalized to
    sum to one.

    Cyclic boundaries make the gradient and Laplacian statistics exactly
    invariant under wrapped translations of periodic content.
    """
    arr = np.asarray(patch)
    integer_scale = np.issubdtype(arr.dtype, np.integer)
    patch = arr.astype(np.float64)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise DataError(f"expected P x P x 3 patch, got shape {patch.shape}")
    if not np.isfinite(patch).all():
        raise DataError("invalid pixel data: non-finite values")
    if integer_scale or patch.max() > 1.0:
        patch = patch / 255.0

    vec = np.zeros(BUILTIN_DIM)
    vec[0:3] = patch.mean(axis=(0, 1))
    vec[3:6] = patch.std(axis=(0, 1))

    y = _luminance(patch)
    vec[6:38] = _hist(y, 0.0, 1.0)

    gx = (np.roll(y, -1, axis=1) - np.roll(y, 1, axis=1)) / 2.0
    gy = (np.roll(y, -1, axis=0) - np.roll(y, 1, axis=0)) / 2.0
    vec[38:70] = _hist(np.hypot(gx, gy), 0.0, 1.0)

    p = y.shape[0]
    block = min(_VAR_BLOCK, p)
    m = (p // block) * block
    blocks = y[:m, :m].reshape(m // block, block, m // block, block)
    block_var = blocks.var(axis=(1, 3)).ravel()
    vec[70:102] = _hist(block_var, 0.0, 0.25)

    lap = (
        np.roll(y, 1, axis=0)
        + np.roll(y, -1, axis=0)
        + np.roll(y, 1, axis=1)
        + np.roll(y, -1, axis=1)
        - 4.0 * y
    )
    vec[102] = np.mean(lap**2)

    lum_hist = vec[6:38]
    nz = lum_hist[lum_hist > 0]
    vec[103] = -np.sum(nz * np.log2(nz)) if nz.size else 0.0
    # vec[104:128] stays zero padding
    return vec


def encode_patches(patches):
    """Stack encode_builtin over an ordered patch list."""
    rows = np.stack([encode_builtin(p) for p in patches])
    return RawFeatures(matrix=rows, d_raw=BUILTIN_DIM, source="builtin-stat")


def project(raw, params):
    """Row-wise linear map h_i = x_i @ W + b onto the model width."""
    if raw.matrix.shape[1] != params.weight.shape[0]:
        raise DataError(
            f"projection shape mismatch: features d_raw={raw.matrix.shape[1]}, "
            f"weight expects {params.weight.shape[0]}"
        )
    out = raw.matrix @ params.weight + params.bias
    return NodeFeatures(matrix=out, d=params.weight.shape[1])


def project_backward(raw, d_out):
    """Gradients of `project` w.r.t. weight and bias given d loss / d output."""
    return raw.matrix.T @ d_out, d_out.sum(axis=0)


def save_feature_cache(features, layout, path):
    """Write the little-endian UGQF cache: magic, version, N, d_raw,
    float32 feature rows, float32 normalized centers."""
    n, d_raw = features.matrix.shape
    if layout.n_patches != n:
        raise DataError(f"layout has {layout.n_patches} centers for {n} feature rows")
    payload = bytearray()
    payload += CACHE_MAGIC
    payload += struct.pack("<III", CACHE_VERSION, n, d_raw)
    payload += features.matrix.astype("<f4").tobytes(order="C")
    payload += layout.centers_norm.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def load_feature_cache(path):
    """Read a UGQF cache back into (RawFeatures, PatchLayout).

    Only normalized centers are stored, so the returned layout has no
    pixel geometry attached.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature cache {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != CACHE_MAGIC:
        raise CacheError("bad magic", str(path))
    if len(blob) < 16:
        raise CacheError("truncated payload", "header incomplete")
    version, n, d_raw = struct.unpack("<III", blob[4:16])
    if version != CACHE_VERSION:
        raise CacheError("bad version", f"got {version}, expected {CACHE_VERSION}")
    need = 16 + 4 * n * d_raw + 4 * n * 2
    if len(blob) < need:
        raise CacheError(
            "truncated payload", f"{len(blob)} bytes, header implies {need}"
        )
    feat = np.frombuffer(blob, dtype="<f4", count=n * d_raw, offset=16)
    feat = feat.reshape(n, d_raw).astype(np.float64)
    centers = np.frombuffer(blob, dtype="<f4", count=n * 2, offset=16 + 4 * n * d_raw)
    centers = centers.reshape(n, 2).astype(np.float64)
    raw = RawFeatures(matrix=feat, d_raw=d_raw, source="imported-cache")
    return raw, PatchLayout(centers_norm=centers)
