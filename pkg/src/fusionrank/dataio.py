"""Persistence and synthetic data.

Matrix files use the CMF1 format: ASCII magic ``CMF1``, then three
little-endian u32s (version, rows, cols), then rows*cols little-endian
float64 values in row-major order. Readers reject bad magic, unknown
versions, and size mismatches with byte-offset diagnostics; writes go
through a temp file plus rename so readers never see a torn file.

A dataset manifest is a JSON object naming the image feature file, the
text feature file, and a group-map file (one image index per caption,
one per line), plus an optional per-image split-label file. Checkpoints
are ZIP containers of named CMF1 members plus a JSON manifest recording
dims, rank, and seed; member order and timestamps are fixed so equal
params produce byte-equal files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zipfile
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeMismatchError
from .matrix import Mat, SeededRng, check_matrix
from .model import FusionBranch, ModelParams, branch_from_dict, branch_to_dict

MAGIC = b"CMF1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

SPLIT_LABELS = ("train", "val", "test")


# --- matrix files ---

def matrix_to_bytes(m: Mat) -> bytes:
    m = check_matrix(m, "matrix")
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        raise DataFormatError(f"refusing to write degenerate shape {m.shape}")
    header = _HEADER.pack(MAGIC, VERSION, rows, cols)
    payload = np.ascontiguousarray(m, dtype="<f8").tobytes()
    return header + payload


def matrix_from_bytes(data: bytes, source: str = "<bytes>") -> Mat:
    if len(data) < _HEADER.size:
        raise DataFormatError(
            f"{source}: {len(data)} bytes, need {_HEADER.size} for the header"
        )
    magic, version, rows, cols = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(
            f"{source}: bad magic {magic!r} at byte 0, expected {MAGIC!r}"
        )
    if version != VERSION:
        raise DataFormatError(
            f"{source}: unknown version {version} at byte 4"
        )
    if rows == 0 or cols == 0:
        raise DataFormatError(f"{source}: degenerate shape {rows}x{cols}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise DataFormatError(
            f"{source}: payload ends at byte {len(data)}, header promises "
            f"{expected}"
        )
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    out = flat.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise DataFormatError(f"{source}: payload contains NaN or Inf")
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                               prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_matrix(path, m: Mat) -> None:
    """Write one matrix as a CMF1 file (atomic)."""
    _atomic_write(Path(path), matrix_to_bytes(m))


def read_matrix(path) -> Mat:
    """Read one CMF1 matrix file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"matrix file not found: {path}")
    return matrix_from_bytes(path.read_bytes(), source=str(path))


# --- group maps ---

def write_group_map(path, groups) -> None:
    groups = np.asarray(groups, dtype=np.int64)
    body = "".join(f"{int(g)}\n" for g in groups)
    _atomic_write(Path(path), body.encode("ascii"))


def read_group_map(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"group map not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DataFormatError(
                f"{path}: line {lineno} is not an integer: {line!r}"
            ) from None
    if not out:
        raise DataFormatError(f"{path}: group map is empty")
    return np.asarray(out, dtype=np.int64)


# --- dataset manifest ---

@dataclass(frozen=True)
class DatasetManifest:
    image_features: str
    text_features: str
    group_map: str
    split_labels: str | None = None


def _require_str(obj: dict, field: str, manifest: str) -> str:
    if field not in obj:
        raise DataFormatError(f"{manifest}: missing field {field!r}")
    val = obj[field]
    if not isinstance(val, str) or not val:
        raise DataFormatError(
            f"{manifest}: field {field!r} must be a non-empty string, "
            f"got {val!r}"
        )
    return val


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise DataFormatError(f"{path}: manifest must be a JSON object")
    known = {"image_features", "text_features", "group_map", "split_labels"}
    for key in obj:
        if key not in known:
            raise DataFormatError(f"{path}: unknown field {key!r}")
    split = obj.get("split_labels")
    if split is not None and (not isinstance(split, str) or not split):
        raise DataFormatError(
            f"{path}: field 'split_labels' must be a non-empty string"
        )
    return DatasetManifest(
        image_features=_require_str(obj, "image_features", str(path)),
        text_features=_require_str(obj, "text_features", str(path)),
        group_map=_require_str(obj, "group_map", str(path)),
        split_labels=split,
    )


def write_manifest(path, manifest: DatasetManifest) -> None:
    obj = {
        "image_features": manifest.image_features,
        "text_features": manifest.text_features,
        "group_map": manifest.group_map,
    }
    if manifest.split_labels is not None:
        obj["split_labels"] = manifest.split_labels
    body = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(Path(path), body.encode("ascii"))


# --- paired dataset ---

@dataclass(frozen=True)
class PairedDataset:
    """Image features, text features, and the caption-to-image map."""

    images: Mat
    texts: Mat
    groups: np.ndarray

    def __post_init__(self):
        check_matrix(self.images, "images")
        check_matrix(self.texts, "texts")
        groups = np.asarray(self.groups, dtype=np.int64)
        if groups.ndim != 1 or groups.shape[0] != self.texts.shape[0]:
            raise ShapeMismatchError(
                f"group map length {groups.shape} != text count "
                f"{self.texts.shape[0]}"
            )
        if groups.min() < 0 or groups.max() >= self.images.shape[0]:
            raise ConfigError("group map references images out of range")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def n_texts(self) -> int:
        return self.texts.shape[0]


def load_dataset(manifest_path, split: str | None = None) -> PairedDataset:
    """Load a dataset from a manifest, optionally filtered to one split."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent

    def resolve(rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else base / p

    images = read_matrix(resolve(manifest.image_features))
    texts = read_matrix(resolve(manifest.text_features))
    groups = read_group_map(resolve(manifest.group_map))
    if groups.shape[0] != texts.shape[0]:
        raise DataFormatError(
            f"{manifest_path}: group map has {groups.shape[0]} lines for "
            f"{texts.shape[0]} texts"
        )
    if split is not None:
        if manifest.split_labels is None:
            raise ConfigError(
                f"split {split!r} requested but manifest has no split_labels"
            )
        labels = _read_split_labels(resolve(manifest.split_labels),
                                    images.shape[0])
        keep_imgs = np.flatnonzero(np.asarray(labels) == split)
        if keep_imgs.size == 0:
            raise ConfigError(f"no images labelled {split!r}")
        remap = {int(i): f for f, i in enumerate(keep_imgs)}
        keep_txts = np.flatnonzero(np.isin(groups, keep_imgs))
        images = images[keep_imgs]
        texts = texts[keep_txts]
        groups = np.asarray([remap[int(groups[t])] for t in keep_txts])
    return PairedDataset(images=images, texts=texts, groups=groups)


def _read_split_labels(path: Path, n_images: int) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"split labels not found: {path}")
    labels = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(labels) != n_images:
        raise DataFormatError(
            f"{path}: {len(labels)} split labels for {n_images} images"
        )
    bad = sorted(set(labels) - set(SPLIT_LABELS))
    if bad:
        raise DataFormatError(f"{path}: unknown split labels {bad}")
    return labels


# --- synthetic data ---

@dataclass(frozen=True)
class SyntheticSpec:
    """Clustered paired features: each image and its captions share one
    latent center, projected into the two feature spaces plus noise."""

    n_images: int
    captions_per_image: int = 5
    d_img: int = 32
    d_txt: int = 32
    n_clusters: int | None = None  # None -> one cluster per image
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images <= 0 or self.captions_per_image <= 0:
            raise ConfigError("counts must be positive")
        if self.d_img <= 0 or self.d_txt <= 0:
            raise ConfigError("feature dims must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_clusters is not None and (
                self.n_clusters <= 0 or self.n_clusters > self.n_images):
            raise ConfigError(
                f"n_clusters must be in 1..{self.n_images}, got {self.n_clusters}"
            )

    @property
    def clusters(self) -> int:
        return self.n_images if self.n_clusters is None else self.n_clusters


def gen_synthetic(spec: SyntheticSpec, rng: SeededRng | None = None) -> PairedDataset:
    """Generate a paired dataset per ``spec``.

    Image i takes latent cluster i mod n_clusters; its feature is that
    cluster's column of a random image projection, its captions the same
    cluster's column of a random text projection, each plus
    noise_sigma * standard normal noise. Noise draws happen even at
    sigma = 0, so the same seed yields the same base features at any
    noise level. With sigma = 0 and one cluster per image, matched pairs
    share an exact latent and the dataset is perfectly separable.
    """
    if rng is None:
        rng = SeededRng(spec.seed)
    c = spec.clusters
    proj_img = rng.uniform(spec.d_img, c, 1.0)
    proj_txt = rng.uniform(spec.d_txt, c, 1.0)
    cluster_of = np.arange(spec.n_images) % c
    n_texts = spec.n_images * spec.captions_per_image
    img_noise = rng.normal((spec.n_images, spec.d_img))
    txt_noise = rng.normal((n_texts, spec.d_txt))
    images = proj_img[:, cluster_of].T + spec.noise_sigma * img_noise
    groups = np.repeat(np.arange(spec.n_images), spec.captions_per_image)
    texts = proj_txt[:, cluster_of[groups]].T + spec.noise_sigma * txt_noise
    return PairedDataset(images=images, texts=texts, groups=groups)


# --- checkpoints ---

_CKPT_FORMAT = "fusionrank-checkpoint"
_CKPT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _branch_dims(b: FusionBranch) -> dict:
    return {"raw_a": b.raw_a, "raw_b": b.raw_b, "d_a": b.d_a, "d_b": b.d_b,
            "d_fused": b.d_fused, "rank": b.rank}


def save_checkpoint(path, params: ModelParams) -> None:
    """Write a deterministic ZIP checkpoint of both branches."""
    manifest = {
        "format": _CKPT_FORMAT,
        "version": _CKPT_VERSION,
        "seed": params.seed,
        "image_text": _branch_dims(params.image_text),
        "text_text": _branch_dims(params.text_text),
    }
    members: list[tuple[str, bytes]] = [
        ("manifest.json",
         (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("ascii"))
    ]
    for branch_name, branch in (("image_text", params.image_text),
                                ("text_text", params.text_text)):
        for key, mat in branch_to_dict(branch).items():
            members.append((f"{branch_name}/{key}.cmf", matrix_to_bytes(mat)))
    buf = BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            zf.writestr(info, data)
    _atomic_write(Path(path), buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise DataFormatError(f"{path}: not a checkpoint archive ({e})") from None
    with zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise DataFormatError(f"{path}: checkpoint lacks manifest.json")
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: bad manifest ({e})") from None
        if manifest.get("format") != _CKPT_FORMAT:
            raise DataFormatError(
                f"{path}: manifest format {manifest.get('format')!r} "
                f"unrecognized"
            )
        if manifest.get("version") != _CKPT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint version "
                f"{manifest.get('version')!r}"
            )
        branches = {}
        for branch_name in ("image_text", "text_text"):
            prefix = branch_name + "/"
            mats = {
                n[len(prefix):-len(".cmf")]: matrix_from_bytes(
                    zf.read(n), source=f"{path}:{n}")
                for n in sorted(names)
                if n.startswith(prefix) and n.endswith(".cmf")
            }
            if not mats:
                raise DataFormatError(
                    f"{path}: checkpoint lacks {branch_name} weights"
                )
            try:
                branches[branch_name] = branch_from_dict(mats)
            except (KeyError, ConfigError, ShapeMismatchError) as e:
                raise DataFormatError(
                    f"{path}: {branch_name} weights incomplete or "
                    f"inconsistent ({e})"
                ) from None
        expect = {b: _branch_dims(branches[b]) for b in branches}
        for b in branches:
            if manifest.get(b) != expect[b]:
                raise DataFormatError(
                    f"{path}: manifest dims {manifest.get(b)} do not match "
                    f"stored {b} weights {expect[b]}"
                )
    return ModelParams(image_text=branches["image_text"],
                       text_text=branches["text_text"],
                       seed=int(manifest.get("seed", 0)))


# --- rank list files ---

def write_rank_lists(path, lists) -> None:
    """One query per line: space-separated gallery indices."""
    body = "".join(" ".join(str(int(i)) for i in row) + "\n" for row in lists)
    _atomic_write(Path(path), body.encode("ascii"))


def read_rank_lists(path) -> list[np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rank list file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(np.asarray([int(x) for x in line.split()], dtype=np.int64))
        except ValueError:
            raise DataFormatError(
                f"{path}: line {lineno} is not a list of integers"
            ) from None
    if not out:
        raise DataFormatError(f"{path}: no rank lists found")
    return out
