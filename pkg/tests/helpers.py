"""Synthetic data shared by the test modules."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from iclcontrast.data import write_dump


def tiny_png(shade: int) -> bytes:
    """A valid 1x1 grayscale PNG."""
    def chunk(kind: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))

    ihdr = struct.pack(">IIBBBBB", 1, 1, 8, 0, 0, 0, 0)
    idat = zlib.compress(bytes([0, shade % 256]))
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


def meme_rows(n: int = 40) -> list[dict]:
    """Alternating benign/hateful memes with distinct captions."""
    words = ["cat", "dog", "market", "river", "cloud", "train", "garden", "storm"]
    return [
        {"id": f"m{i:03d}", "img": f"img/m{i:03d}.png",
         "text": f"caption {i} about the {words[i % len(words)]} and {words[(3 * i) % len(words)]}",
         "label": i % 2}
        for i in range(n)
    ]


def write_memes(root: Path, rows: list[dict], name: str = "dev.jsonl") -> Path:
    (root / "img").mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rows):
        (root / row["img"]).write_bytes(tiny_png(i))
    path = root / name
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


REFUSAL = "I cannot assist with that."


def abt_script(rows: list[dict]) -> tuple[dict, dict]:
    """Mock-server script plus the confusion counts it produces for ``abt``.

    Of 20 hateful memes, 14 are answered hateful, 4 benign and 2 refused; of
    20 benign memes, 5 are answered hateful and 15 benign.
    """
    hateful = [r for r in rows if r["label"] == 1]
    benign = [r for r in rows if r["label"] == 0]
    replies = {}
    for j, r in enumerate(hateful):
        replies[r["text"]] = "Hateful." if j < 14 else ("benign" if j < 18 else REFUSAL)
    for j, r in enumerate(benign):
        replies[r["text"]] = "hateful" if j < 5 else "Benign."
    script = {"anchor": "\"A quiet afternoon.\"", "replies_by_lt": {"abt": replies}, "default_reply": "benign"}
    return script, {"tp": 14, "fn": 4, "fp": 5, "tn": 15, "errors": 2}


def linear_generator_dumps(root: Path, identity: bool, n: int = 150, d: int = 8, seed: int = 7,
                           pairs=(("toy-a", "setA"), ("toy-b", "setB"))) -> tuple[list, list]:
    """Zero-shot / ICL dump pairs where ICL states are ``R h`` (or ``h`` when ``identity``)."""
    rng = np.random.default_rng(seed)
    zsl_paths, icl_paths = [], []
    for model, dataset in pairs:
        R = np.eye(d) if identity else rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        zsl, icl = {}, {}
        for i in range(n):
            sid = f"s{i:04d}"
            q = rng.normal(size=(3, d))
            a = rng.normal(size=(2, d))
            zsl[(sid, "query", 0)] = q
            zsl[(sid, "answer", 0)] = a
            icl[(sid, "query", 0)] = q @ R.T
            icl[(sid, "answer", 0)] = a @ R.T
        base = root / f"{model}_{dataset}"
        zsl_paths.append(write_dump(base / "zsl", zsl, model, dataset))
        icl_paths.append(write_dump(base / "icl", icl, model, dataset))
    return zsl_paths, icl_paths
