"""Cohort persistence: a directory with a JSON manifest plus per-shape files.

Meshes are stored as ASCII PLY, point clouds as ``.xyz``.  A corrupted cohort
records its ``source_cohort`` so evaluation can reach the clean ground-truth
meshes.  Normalization params live both in the manifest and in a standalone
sidecar (``normalization.json``) usable for single-shape inference.
"""

from __future__ import annotations

import json
from pathlib import Path

from .geometry import (
    Cohort,
    CohortShape,
    NormalizationParams,
    load_mesh,
    read_point_file,
    save_mesh_ply,
    write_point_file,
)

MANIFEST_NAME = "manifest.json"
SIDECAR_NAME = "normalization.json"
FORMAT_VERSION = 1


def save_cohort(
    cohort: Cohort,
    directory: str | Path,
    source_cohort: str | None = None,
    normalized: bool = False,
) -> Path:
    """Write manifest + shape files; returns the directory path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for shape in cohort.shapes:
        entry: dict = {"id": shape.id, "split": shape.split}
        if shape.mesh is not None:
            (directory / "meshes").mkdir(exist_ok=True)
            rel = f"meshes/{shape.id}.ply"
            save_mesh_ply(shape.mesh, directory / rel)
            entry["mesh"] = rel
        if shape.cloud is not None:
            (directory / "clouds").mkdir(exist_ok=True)
            rel = f"clouds/{shape.id}.xyz"
            write_point_file(shape.cloud, directory / rel)
            entry["cloud"] = rel
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "normalized": normalized,
        "normalization": None,
        "source_cohort": source_cohort,
        "shapes": entries,
    }
    if cohort.normalization is not None:
        manifest["normalization"] = {
            "center": cohort.normalization.center.tolist(),
            "scale": cohort.normalization.scale,
        }
        cohort.normalization.to_json(directory / SIDECAR_NAME)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return directory


def load_cohort(directory: str | Path) -> Cohort:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no cohort manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported cohort manifest version")
    normalized = bool(manifest.get("normalized", False))
    shapes = []
    for entry in manifest["shapes"]:
        mesh = load_mesh(directory / entry["mesh"]) if entry.get("mesh") else None
        cloud = (
            read_point_file(directory / entry["cloud"], normalized=normalized)
            if entry.get("cloud")
            else None
        )
        shapes.append(
            CohortShape(id=entry["id"], mesh=mesh, cloud=cloud, split=entry.get("split"))
        )
    normalization = None
    if manifest.get("normalization"):
        normalization = NormalizationParams(
            manifest["normalization"]["center"], manifest["normalization"]["scale"]
        )
    return Cohort(shapes, normalization=normalization)


def source_cohort_dir(directory: str | Path) -> Path | None:
    """The clean cohort a corrupted one was derived from, if recorded."""
    manifest = json.loads((Path(directory) / MANIFEST_NAME).read_text())
    src = manifest.get("source_cohort")
    return Path(src) if src else None
