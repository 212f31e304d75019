"""Glue between files and the numeric pipeline: image decoding, manifest
parsing, per-sample feature preparation, and graph assembly from the
current projection output.
"""

import csv
import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import encoder, graph, grid
from .errors import DataError

SPLITS = ("train", "val", "test")
CACHE_SUFFIX = ".ugqf"


@dataclass
class Sample:
    path: str
    mos: float
    split: str


@dataclass
class PreparedSample:
    """A manifest row with its features resolved and ready for the model."""

    sample: Sample
    raw: encoder.RawFeatures
    layout: grid.PatchLayout
    image: np.ndarray | None  # pixels kept only when loaded from an image file


def load_image(path):
    """Decode a PNG or binary PPM file into an H x W x 3 float array in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".png", ".ppm"):
        raise DataError(f"unsupported image format {ext!r} (PNG and PPM only): {path}")
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def read_manifest(path):
    """Parse a `path,mos,split` CSV; relative paths resolve against the
    manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
                "path",
                "mos",
                "split",
            ]:
                raise DataError(
                    f"manifest {path} must have header 'path,mos,split', "
                    f"got {reader.fieldnames}"
                )
            for lineno, row in enumerate(reader, start=2):
                p = (row["path"] or "").strip()
                if not p:
                    raise DataError(f"manifest {path} line {lineno}: empty path")
                try:
                    mos = float(row["mos"])
                except (TypeError, ValueError):
                    raise DataError(
                        f"manifest {path} line {lineno}: bad mos {row['mos']!r}"
                    ) from None
                if not math.isfinite(mos):
                    raise DataError(f"manifest {path} line {lineno}: non-finite mos")
                split = (row["split"] or "").strip()
                if split not in SPLITS:
                    raise DataError(
                        f"manifest {path} line {lineno}: split must be one of "
                        f"{SPLITS}, got {split!r}"
                    )
                if not os.path.isabs(p):
                    p = os.path.join(base, p)
                samples.append(Sample(path=p, mos=mos, split=split))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return samples


def cache_key(path, run_config):
    """Content hash naming a feature cache; any pipeline-relevant config
    change produces a different name."""
    ident = "|".join(
        [
            "ugqf-v1",
            os.path.abspath(path),
            f"grid_n={run_config.grid_n}",
            f"patch_size={run_config.patch_size}",
            f"encoder={run_config.encoder}",
        ]
    )
    return hashlib.sha256(ident.encode("utf-8")).hexdigest()[:24]


def is_cache_path(path):
    return path.lower().endswith(CACHE_SUFFIX)


def encode_image(image, run_config):
    """Canonical layout + builtin features for one decoded image."""
    h, w = image.shape[0], image.shape[1]
    dims = grid.ImageDims(width=w, height=h)
    spec = grid.select_grid(run_config.grid_n, dims, run_config.patch_size)
    layout = grid.patch_centers(spec, dims)
    patches = grid.extract_patches(image, layout, run_config.patch_size)
    raw = encoder.encode_patches(patches)
    return raw, layout


def prepare_sample(sample, run_config):
    """Resolve a manifest row into features: load a cache directly, or
    decode the image and run the builtin encoder."""
    if is_cache_path(sample.path):
        raw, layout = encoder.load_feature_cache(sample.path)
        return PreparedSample(sample=sample, raw=raw, layout=layout, image=None)
    image = load_image(sample.path)
    raw, layout = encode_image(image, run_config)
    return PreparedSample(sample=sample, raw=raw, layout=layout, image=image)


def node_graph(raw, layout, proj, run_config):
    """Project raw features with the current weights and build the hybrid
    KNN graph from the resulting node embeddings."""
    nodes = encoder.project(raw, proj)
    g = graph.build_graph(layout, nodes, run_config.graph_config())
    return nodes, g
