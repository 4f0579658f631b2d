"""Dataset manifests, image loading, and the bundled synthetic generator.

A manifest is a line-delimited JSON file: the first line is a header record
(``{"kind": "manifest", "n": ..., "split": ...}``), each following line one
image record (``{"image_path": ..., "keypoints": [...]}``) with paths
relative to the manifest's directory. Images are decoded, bilinearly resized
to n x n and scaled to [0, 1]; keypoint pixel coordinates are rescaled by the
same factors. Iteration order is the manifest order.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError
from .evaluation import KeypointAnnotation

logger = logging.getLogger(__name__)

DEFAULT_PART_NAMES = tuple(f"part_{k:02d}" for k in range(15))


@dataclass
class ManifestRecord:
    image_path: str
    keypoints: list[dict] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    n: int
    split: str = "train"


def write_manifest(path, records: list[ManifestRecord], n: int, split: str = "train") -> None:
    path = Path(path)
    with open(path, "w") as f:
        f.write(json.dumps({"kind": "manifest", "n": n, "split": split}) + "\n")
        for rec in records:
            f.write(json.dumps({"image_path": rec.image_path, "keypoints": rec.keypoints}) + "\n")


def load_manifest(path, n: int | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest {path} does not exist")
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DatasetError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "manifest":
        raise DatasetError(f"manifest {path} is missing its header record")
    records = []
    for line in lines[1:]:
        rec = json.loads(line)
        records.append(ManifestRecord(rec["image_path"], rec.get("keypoints", [])))
    manifest = DatasetManifest(
        root=path.parent,
        records=records,
        n=int(n if n is not None else header["n"]),
        split=header.get("split", "train"),
    )
    missing = [r.image_path for r in manifest.records
               if not (manifest.root / r.image_path).exists()]
    if missing:
        raise DatasetError(
            f"manifest {path} references {len(missing)} missing file(s), e.g. {missing[0]!r}"
        )
    return manifest


def load_dataset(
    manifest: DatasetManifest,
) -> list[tuple[torch.Tensor, list[KeypointAnnotation]]]:
    """Decode every manifest record into an (image, annotations) pair.

    Unreadable items are logged with their path and dropped; if nothing
    loads, that is a dataset error.
    """
    n = manifest.n
    items = []
    for rec in manifest.records:
        full = manifest.root / rec.image_path
        try:
            with Image.open(full) as img:
                src_w, src_h = img.size
                rgb = img.convert("RGB").resize((n, n), Image.BILINEAR)
        except OSError as exc:
            logger.warning("skipping unreadable image %s: %s", full, exc)
            continue
        tensor = torch.from_numpy(np.asarray(rgb, dtype=np.float32) / 255.0)
        anns = [
            KeypointAnnotation(
                image_id=rec.image_path,
                part=kp["part"],
                i=int(round(kp["i"] * n / src_h)),
                j=int(round(kp["j"] * n / src_w)),
                visible=bool(kp.get("visible", True)),
            )
            for kp in rec.keypoints
        ]
        items.append((tensor, anns))
    if not items:
        raise DatasetError(f"no readable images in manifest under {manifest.root}")
    return items


def synthesize_dataset(
    out_dir,
    count: int,
    n: int = 64,
    seed: int = 0,
    part_names: tuple[str, ...] = DEFAULT_PART_NAMES,
) -> Path:
    """Generate a reproducible dataset of smooth random backgrounds with one
    bright square each; the square's center is annotated as a keypoint whose
    part name cycles through ``part_names``. Returns the manifest path."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for k in range(count):
        low = rng.uniform(0.05, 0.6, size=(4, 4, 3))
        base = Image.fromarray((low * 255).round().astype(np.uint8)).resize((n, n), Image.BILINEAR)
        image = np.asarray(base, dtype=np.float64) / 255.0
        image = np.clip(image + rng.uniform(-0.03, 0.03, size=image.shape), 0.0, 1.0)
        side = int(rng.choice(np.arange(n // 8, n // 4 + 1, 2)))
        top = int(rng.integers(0, n - side + 1))
        left = int(rng.integers(0, n - side + 1))
        image[top : top + side, left : left + side, :] = rng.uniform(0.85, 1.0, size=3)
        name = f"img_{k:05d}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_dir / name, format="PNG")
        records.append(
            ManifestRecord(
                image_path=name,
                keypoints=[{
                    "part": part_names[k % len(part_names)],
                    "i": top + side // 2,
                    "j": left + side // 2,
                    "visible": True,
                }],
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records, n=n, split="synthetic")
    return manifest_path
