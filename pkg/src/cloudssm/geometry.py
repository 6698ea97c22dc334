"""Shape containers, mesh/point-cloud I/O, rigid alignment and sampling.

Everything downstream (corruption, training, evaluation, statistics) goes
through the types defined here.  Coordinates are millimetres unless a cloud
is flagged as normalized, in which case they live in [-1, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class MeshFormatError(ValueError):
    """Raised when a PLY/OBJ file cannot be parsed; message names the line."""


class IllConditionedError(ValueError):
    """Raised when a geometric solve is degenerate (e.g. collinear points)."""


_NORM_SLACK = 1e-9  # tolerance on the [-1, 1] bound of normalized clouds


@dataclass
class PointCloud:
    """Unordered set of 3D points.

    ``normalized`` marks clouds that have been mapped into [-1, 1] by
    :func:`normalize_cohort`; all other clouds are in mm.
    """

    points: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.normalized and np.abs(pts).max() > 1.0 + _NORM_SLACK:
            raise ValueError("normalized cloud has coordinates outside [-1, 1]")
        self.points = pts

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass
class TriangleMesh:
    """Triangle mesh in mm; faces are 0-based vertex index triples."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be (v, 3), got {verts.shape}")
        if not np.isfinite(verts).all():
            raise ValueError("mesh contains non-finite vertex coordinates")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (f, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= verts.shape[0]:
                raise ValueError("face index out of range")
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degenerate.any():
                raise ValueError(
                    f"degenerate face at row {int(np.flatnonzero(degenerate)[0])}"
                )
        self.vertices = verts
        self.faces = faces


@dataclass
class RigidTransform:
    """Rotation (proper orthonormal) plus translation, both in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        self.rotation = r
        self.translation = t

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass
class NormalizationParams:
    """Affine map into [-1, 1]: normalized = (x - center) * scale."""

    center: np.ndarray
    scale: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"center": self.center.tolist(), "scale": self.scale})
        )

    @staticmethod
    def from_json(path: str | Path) -> "NormalizationParams":
        data = json.loads(Path(path).read_text())
        return NormalizationParams(np.asarray(data["center"]), float(data["scale"]))


SPLITS = ("train", "val", "test")


@dataclass
class CohortShape:
    """One shape in a cohort: a mesh and/or a point cloud plus a split label."""

    id: str
    mesh: TriangleMesh | None = None
    cloud: PointCloud | None = None
    split: str | None = None

    def full_cloud(self) -> PointCloud:
        """The complete point set: the stored cloud, else the mesh vertices."""
        if self.cloud is not None:
            return self.cloud
        if self.mesh is not None:
            return mesh_vertices_as_cloud(self.mesh)
        raise ValueError(f"shape {self.id!r} has neither mesh nor cloud")


@dataclass
class Cohort:
    """Ordered collection of shapes with split labels and normalization params."""

    shapes: list[CohortShape] = field(default_factory=list)
    normalization: NormalizationParams | None = None

    def __len__(self) -> int:
        return len(self.shapes)

    def split_shapes(self, split: str) -> list[CohortShape]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.shapes if s.split == split]

    def shape_by_id(self, shape_id: str) -> CohortShape:
        for s in self.shapes:
            if s.id == shape_id:
                return s
        raise KeyError(shape_id)


# ---------------------------------------------------------------------------
# Mesh and point file I/O


def _fail(path: Path, lineno: int, msg: str) -> MeshFormatError:
    return MeshFormatError(f"{path}:{lineno}: {msg}")


def _load_ply(path: Path) -> TriangleMesh:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise _fail(path, 1, "missing 'ply' magic")
    n_verts = n_faces = 0
    vert_props: list[str] = []
    current_element = None
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise _fail(path, i, "only ascii PLY is supported")
        elif tok[0] == "element":
            current_element = tok[1]
            if tok[1] == "vertex":
                n_verts = int(tok[2])
            elif tok[1] == "face":
                n_faces = int(tok[2])
        elif tok[0] == "property" and current_element == "vertex":
            vert_props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i
            break
    if body_start is None:
        raise _fail(path, len(lines), "missing end_header")
    try:
        ix, iy, iz = (vert_props.index(a) for a in ("x", "y", "z"))
    except ValueError:
        raise _fail(path, body_start, "vertex element lacks x/y/z properties")

    body = lines[body_start:]
    if len(body) < n_verts + n_faces:
        raise _fail(path, len(lines), "truncated file body")
    verts = np.empty((n_verts, 3))
    for j in range(n_verts):
        tok = body[j].split()
        try:
            verts[j] = [float(tok[ix]), float(tok[iy]), float(tok[iz])]
        except (ValueError, IndexError):
            raise _fail(path, body_start + 1 + j, "bad vertex line")
    faces = []
    for j in range(n_faces):
        lineno = body_start + 1 + n_verts + j
        tok = body[n_verts + j].split()
        try:
            cnt = int(tok[0])
            idx = [int(t) for t in tok[1 : 1 + cnt]]
        except (ValueError, IndexError):
            raise _fail(path, lineno, "bad face line")
        if cnt < 3:
            raise _fail(path, lineno, "face with fewer than 3 vertices")
        for a in range(1, cnt - 1):  # fan-triangulate polygons
            faces.append((idx[0], idx[a], idx[a + 1]))
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _load_obj(path: Path) -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise _fail(path, lineno, "bad vertex line")
        elif tok[0] == "f":
            try:
                # indices may carry /vt/vn suffixes; negatives are relative
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise _fail(path, lineno, "bad face line")
            if len(idx) < 3:
                raise _fail(path, lineno, "face with fewer than 3 vertices")
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for a in range(1, len(idx) - 1):
                faces.append((idx[0], idx[a], idx[a + 1]))
    if not verts:
        raise _fail(path, 1, "no vertices found")
    return TriangleMesh(
        np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    )


def load_mesh(path: str | Path) -> TriangleMesh:
    """Load an ASCII PLY or OBJ mesh; raises MeshFormatError / ValueError."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return _load_ply(path)
    if suffix == ".obj":
        return _load_obj(path)
    raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r}")


def save_mesh_ply(mesh: TriangleMesh, path: str | Path) -> None:
    out = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}"]
    out += [f"property float {a}" for a in "xyz"]
    out += [
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out += [f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in mesh.vertices]
    out += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n")


def read_point_file(path: str | Path, normalized: bool = False) -> PointCloud:
    """Read a ``.xyz`` / ``.particles`` file: one ``x y z`` triple per line."""
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok:
            continue
        if len(tok) < 3:
            raise MeshFormatError(f"{path}:{lineno}: expected 'x y z'")
        rows.append([float(t) for t in tok[:3]])
    if not rows:
        raise MeshFormatError(f"{path}: empty point file")
    return PointCloud(np.asarray(rows), normalized=normalized)


def write_point_file(points: np.ndarray | PointCloud, path: str | Path) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    lines = [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_vertices_as_cloud(mesh: TriangleMesh) -> PointCloud:
    """Vertices as a point cloud; duplicates retained, order as stored."""
    return PointCloud(mesh.vertices.copy())


# ---------------------------------------------------------------------------
# Rigid alignment


def _solve_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    # Closed-form least-squares rigid fit between matched point lists (SVD).
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, ct - rot @ cs)


def icp_rigid_align(
    source: PointCloud,
    target: PointCloud,
    max_iters: int = 50,
    tol: float = 1e-10,
) -> RigidTransform:
    """Rigidly align ``source`` onto ``target`` by iterative closest points.

    Each iteration matches every source point to its nearest target point and
    re-solves the rigid transform in closed form.  Stops when the mean squared
    matched distance improves by less than ``tol`` or after ``max_iters``.
    """
    if source.normalized or target.normalized:
        raise ValueError("ICP operates on mm-frame clouds, not normalized ones")
    src = source.points
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise IllConditionedError("source points are collinear or coincident")

    tree = cKDTree(target.points)
    # start from centroid alignment
    transform = RigidTransform(np.eye(3), target.points.mean(0) - src.mean(0))
    prev_mse = np.inf
    for _ in range(max_iters):
        moved = transform.apply(src)
        _, nn = tree.query(moved)
        matched = target.points[nn]
        transform = _solve_rigid(src, matched)
        mse = float(np.mean(np.sum((transform.apply(src) - matched) ** 2, axis=1)))
        if prev_mse - mse < tol:
            break
        prev_mse = mse
    return transform


# ---------------------------------------------------------------------------
# Normalization


def normalize_cohort(cohort: Cohort) -> tuple[Cohort, NormalizationParams]:
    """Map the whole cohort into [-1, 1] with one shared center and scale.

    A single affine map keeps per-shape relative size, which the shape
    statistics must capture.  Params are returned for exact inversion.
    """
    if not cohort.shapes:
        raise ValueError("cannot normalize an empty cohort")
    all_pts = np.concatenate([s.full_cloud().points for s in cohort.shapes])
    lo, hi = all_pts.min(axis=0), all_pts.max(axis=0)
    center = (lo + hi) / 2.0
    amax = float(np.abs(all_pts - center).max())
    scale = 1.0 / amax if amax > 0 else 1.0
    params = NormalizationParams(center, scale)

    shapes = []
    for s in cohort.shapes:
        mesh = None
        cloud = None
        if s.mesh is not None:
            mesh = TriangleMesh((s.mesh.vertices - center) * scale, s.mesh.faces)
        if s.cloud is not None:
            cloud = PointCloud((s.cloud.points - center) * scale, normalized=True)
        shapes.append(replace(s, mesh=mesh, cloud=cloud))
    return Cohort(shapes, normalization=params), params


def normalize_points(points: np.ndarray, params: NormalizationParams) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - params.center) * params.scale


def denormalize(points: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Exact inverse of :func:`normalize_points` (back to mm)."""
    return np.asarray(points, dtype=np.float64) / params.scale + params.center


# ---------------------------------------------------------------------------
# Sampling and neighbor queries


def random_subsample(
    cloud: PointCloud, n: int, rng: np.random.Generator
) -> PointCloud:
    """Draw ``n`` points uniformly without replacement."""
    if not 1 <= n <= cloud.count:
        raise ValueError(f"cannot draw {n} of {cloud.count} points")
    idx = rng.choice(cloud.count, size=n, replace=False)
    return PointCloud(cloud.points[idx], normalized=cloud.normalized)


def farthest_point_sample(
    cloud: PointCloud, m: int, start_index: int = 0
) -> tuple[PointCloud, np.ndarray]:
    """Greedy max-min subsampling; ties broken by lowest index.

    Deterministic given ``start_index``; every selected point maximizes its
    minimum distance to the already-selected set.
    """
    n = cloud.count
    if not 1 <= m <= n:
        raise ValueError(f"cannot select {m} of {n} points")
    if not 0 <= start_index < n:
        raise ValueError("start_index out of range")
    pts = cloud.points
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    min_d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the lowest tied index
        selected[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return PointCloud(pts[selected], normalized=cloud.normalized), selected


def knn_indices(
    query: PointCloud,
    reference: PointCloud,
    k: int,
    exclude_self: bool = False,
) -> np.ndarray:
    """Indices of the k nearest reference points per query point.

    Rows are sorted by ascending distance with ties broken by lowest index.
    ``exclude_self`` is only meaningful when query and reference are the same
    set (matched row/column indices are masked out).
    """
    n_ref = reference.count
    limit = n_ref - 1 if exclude_self else n_ref
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range for {n_ref} reference points")
    d2 = np.sum(
        (query.points[:, None, :] - reference.points[None, :, :]) ** 2, axis=2
    )
    if exclude_self:
        if query.count != n_ref:
            raise ValueError("exclude_self requires query == reference")
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")  # stable = lowest index on ties
    return order[:, :k].astype(np.int64)
