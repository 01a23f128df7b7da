"""Activation dumps, hateful-memes JSONL files and experiment configuration.

An activation dump is a ``manifest.json`` next to raw little-endian float32
files. Each manifest entry names a ``(sample_id, segment, layer)`` tensor
stored row-major at ``offset`` bytes into ``file``::

    {"version": 1, "model": "llava", "dataset": "vqav2", "dtype": "f32le",
     "layout": "row-major",
     "entries": [{"sample_id": "q1", "segment": "query", "layer": 40,
                  "shape": [7, 5120], "file": "acts.bin", "offset": 0}]}
"""

from __future__ import annotations

import configparser
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .abt import Meme
from .client import ClientConfig
from .errors import ConfigurationError, CorruptionError, InputError, ShapeError, ValidationError

log = logging.getLogger(__name__)

DUMP_VERSION = 1
DUMP_SEGMENTS = ("instruction", "example", "query", "answer", "prediction")
_F32 = np.dtype("<f4")

PathLike = Union[str, Path]


def write_dump(
    directory: PathLike,
    tensors: Mapping[tuple, np.ndarray],
    model: str = "toy",
    dataset: str = "synthetic",
    bin_name: str = "activations.bin",
) -> Path:
    """Write ``{(sample_id, segment, layer): 2-D array}`` as a dump; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / bin_name, "wb") as fh:
        for (sample_id, segment, layer), arr in tensors.items():
            arr = np.asarray(arr)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise ShapeError(f"tensor {(sample_id, segment, layer)} must be 1-D or 2-D")
            raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
            fh.write(raw)
            entries.append({
                "sample_id": str(sample_id), "segment": segment, "layer": int(layer),
                "shape": [int(arr.shape[0]), int(arr.shape[1])], "file": bin_name, "offset": offset,
            })
            offset += len(raw)
    manifest = {
        "version": DUMP_VERSION, "model": model, "dataset": dataset,
        "dtype": "f32le", "layout": "row-major", "entries": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


@dataclass
class ActivationStore:
    """Validated, lazily read view over one dump."""

    root: Path
    model: str
    dataset: str
    entries: dict

    def get(self, sample_id: str, segment: str, layer: int) -> np.ndarray:
        e = self.entries[(sample_id, segment, layer)]
        rows, cols = e["shape"]
        data = np.fromfile(self.root / e["file"], dtype=_F32, count=rows * cols, offset=e["offset"])
        return data.reshape(rows, cols)

    @property
    def layers(self) -> list[int]:
        return sorted({k[2] for k in self.entries})

    def resolve_layer(self, layer: int) -> int:
        """Negative layers count back from the deepest stored layer."""
        layers = self.layers
        return layers[layer] if layer < 0 else layer

    def samples(self, segment: str, layer: int) -> list[str]:
        return sorted(k[0] for k in self.entries if k[1] == segment and k[2] == layer)

    def __contains__(self, key) -> bool:
        return key in self.entries


def load_dumps(manifest_path: PathLike) -> ActivationStore:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise CorruptionError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != DUMP_VERSION:
        raise CorruptionError(f"unsupported dump version {manifest.get('version')!r}")
    if manifest.get("dtype") != "f32le" or manifest.get("layout") != "row-major":
        raise CorruptionError("dump must be f32le row-major")
    root = manifest_path.parent
    sizes: dict[str, int] = {}
    entries = {}
    for i, e in enumerate(manifest.get("entries", [])):
        try:
            key = (str(e["sample_id"]), e["segment"], int(e["layer"]))
            rows, cols = (int(x) for x in e["shape"])
            fname, offset = e["file"], int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError(f"entry {i}: malformed ({exc})") from exc
        name = f"entry {i} {key}"
        if key[1] not in DUMP_SEGMENTS:
            raise CorruptionError(f"{name}: unknown segment {key[1]!r}")
        if key in entries:
            raise CorruptionError(f"{name}: duplicate (sample_id, segment, layer)")
        if fname not in sizes:
            path = root / fname
            if not path.is_file():
                raise CorruptionError(f"{name}: missing file {fname}")
            sizes[fname] = path.stat().st_size
        if rows < 0 or cols < 0 or offset < 0 or offset + rows * cols * 4 > sizes[fname]:
            raise CorruptionError(f"{name}: window [{offset}, +{rows * cols * 4}) overruns {fname}")
        entries[key] = {"shape": [rows, cols], "file": fname, "offset": offset}
    return ActivationStore(root, str(manifest.get("model", "")), str(manifest.get("dataset", "")), entries)


@dataclass
class DistanceRecord:
    sample_ids: list
    values: np.ndarray
    metric: str
    per_dimension: bool
    skipped: int = 0


def pool(tensor: np.ndarray, how: str = "mean") -> np.ndarray:
    t = np.asarray(tensor, dtype=float)
    if how == "mean":
        return t.mean(axis=0)
    if how == "last":
        return t[-1]
    raise ValidationError(f"unknown pooling {how!r}")


def vector_distance(a: np.ndarray, b: np.ndarray, metric: str = "cosine", per_dimension: bool = False) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if per_dimension:
        return np.abs(a - b)
    if metric == "cosine":
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        return np.array([1.0 - (a @ b) / denom if denom > 0 else 1.0])
    if metric == "euclidean":
        return np.array([np.linalg.norm(a - b)])
    raise ValidationError(f"unknown metric {metric!r}")


def distances(
    store: ActivationStore,
    pair_spec: tuple[str, str, int],
    metric: str = "cosine",
    per_dimension: bool = False,
    pooling: str = "mean",
) -> DistanceRecord:
    """Distance between two segments' pooled representations, per sample.

    Samples lacking either segment at the layer are skipped and counted.
    """
    seg_a, seg_b, layer = pair_spec
    layer = store.resolve_layer(layer)
    have_a = set(store.samples(seg_a, layer))
    have_b = set(store.samples(seg_b, layer))
    ids = sorted(have_a & have_b)
    skipped = len(have_a ^ have_b)
    if not ids:
        raise InputError(f"no sample has both {seg_a!r} and {seg_b!r} at layer {layer}")
    if skipped:
        log.warning("skipped %d samples missing %s or %s at layer %d", skipped, seg_a, seg_b, layer)
    rows = [
        vector_distance(pool(store.get(s, seg_a, layer), pooling), pool(store.get(s, seg_b, layer), pooling),
                        metric, per_dimension)
        for s in ids
    ]
    return DistanceRecord(ids, np.stack(rows), metric, per_dimension, skipped)


def load_memes(path: PathLike) -> list[Meme]:
    """Hateful-memes JSONL (``id``, ``img``, ``text``, optional ``label``)."""
    path = Path(path)
    memes, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                meme = Meme(id=str(rec["id"]), image_ref=rec["img"], text=rec["text"],
                            label=None if rec.get("label") is None else int(rec["label"]))
            except (ValueError, KeyError) as exc:
                raise InputError(f"{path}:{lineno}: bad record ({exc})") from exc
            if meme.id in seen:
                raise InputError(f"{path}:{lineno}: duplicate id {meme.id}")
            seen.add(meme.id)
            memes.append(meme)
    return memes


def dump_json(obj, path: Optional[PathLike] = None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def write_jsonl(rows: Iterable[dict], path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


@dataclass
class ExperimentConfig:
    seed: int = 1987
    distance_metric: str = "cosine"
    kernel: str = "identity"
    bootstrap_n: int = 1000
    holdout_fraction: float = 0.2
    base_url: str = "http://127.0.0.1:8000/v1"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_ms: int = 60000
    max_retries: int = 3
    max_concurrency: int = 4
    model: str = "llava-llama-2-13b"
    data: str = ""
    train: str = ""
    dump: str = ""
    out: str = ""

    def __post_init__(self):
        if not 0 < self.holdout_fraction < 1:
            raise ConfigurationError("holdout_fraction must be in (0, 1)")

    def client_config(self) -> ClientConfig:
        return ClientConfig(base_url=self.base_url, api_key_env=self.api_key_env, timeout_ms=self.timeout_ms,
                            max_retries=self.max_retries, max_concurrency=self.max_concurrency, model=self.model)


def load_config(path: Optional[PathLike] = None, overrides: Optional[Mapping] = None) -> ExperimentConfig:
    """Read a flat INI file (keys in ``[experiment]`` or at top level); overrides win."""
    values: dict = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_string("[experiment]\n" + fh.read() if not _has_section(path) else fh.read())
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if parser.has_section("experiment"):
            values.update(parser.items("experiment"))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    casts = {"int": int, "float": float, "str": str}
    try:
        kwargs = {k: casts[known[k]](v) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc
    return ExperimentConfig(**kwargs)


def _has_section(path: PathLike) -> bool:
    with open(path) as fh:
        return any(line.lstrip().startswith("[") for line in fh)
