"""Triangle mesh loading, validation, and midpoint subdivision.

Meshes are plain vertex/face arrays in millimeters. PLY (ascii and
binary-little-endian) and OBJ files are supported; only geometry is read,
texture and normal records are ignored.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed or violates mesh invariants."""


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh: vertices in mm, faces as vertex-index triples.

    Counter-clockwise winding is assumed for outward normals but never
    enforced; the rasterizer does not cull back faces.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshFormatError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise MeshFormatError(
                f"face index out of range: max {faces.max() if faces.size else 0} "
                f"for {len(verts)} vertices"
            )
        degen = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 2] == faces[:, 0])
        )
        if degen.any():
            raise MeshFormatError(
                f"{int(degen.sum())} faces repeat a vertex index (topologically degenerate)"
            )
        verts.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (lo, hi) index pairs, lexicographic order."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def boundary_edge_count(self) -> int:
        """Number of edges used by exactly one face (0 for a watertight mesh)."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int((counts == 1).sum())

    def fingerprint(self) -> bytes:
        """SHA-256 over the raw float64 vertex buffer (32 bytes)."""
        return hashlib.sha256(self.vertices.tobytes()).digest()


# ---------------------------------------------------------------------------
# Loading

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriangleMesh:
    """Load a triangle mesh from a PLY or OBJ file.

    Args:
        path: Path to a .ply (ascii or binary_little_endian) or .obj file.
            Polygonal faces are fan-triangulated; vertex order is preserved.

    Returns:
        A validated TriangleMesh.

    Raises:
        MeshFormatError: On unreadable files, unsupported PLY formats or
            element layouts, or out-of-range face indices.
        FileNotFoundError: If the file does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    head = path.open("rb").read(4)
    if head[:3] == b"ply":
        return _load_ply(path)
    return _load_obj(path)


def _load_obj(path: Path) -> TriangleMesh:
    verts = []
    faces = []
    with path.open("r", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: short vertex record")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    # "v", "v/vt", "v//vn", "v/vt/vn" -> keep the vertex index
                    raw = int(tok.split("/")[0])
                    idx.append(raw - 1 if raw > 0 else len(verts) + raw)
                if len(idx) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face with <3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise MeshFormatError(f"{path}: no geometry found")
    return TriangleMesh(np.array(verts), np.array(faces))


def _load_ply(path: Path) -> TriangleMesh:
    raw = path.read_bytes()
    try:
        header_end = raw.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise MeshFormatError(f"{path}: missing end_header") from None
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(prop_kind, ...)]) in declaration order
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")

    body = raw[header_end:]
    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        reader = _AsciiTokens(tokens)
    else:
        reader = _BinaryCursor(body)

    verts = None
    faces = None
    for name, count, props in elements:
        if name == "vertex":
            verts = _read_ply_vertices(reader, count, props, path)
        elif name == "face":
            faces = _read_ply_faces(reader, count, props, path)
        else:
            if verts is not None and faces is not None:
                break  # trailing elements are ignorable
            _skip_ply_element(reader, count, props, path, name)
    if verts is None or faces is None:
        raise MeshFormatError(f"{path}: PLY lacks vertex or face element")
    return TriangleMesh(verts, np.array(faces))


class _AsciiTokens:
    binary = False

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def take(self):
        if self.pos >= len(self.tokens):
            raise MeshFormatError("unexpected end of PLY data")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok


class _BinaryCursor:
    binary = True

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, dtype_code):
        dt = np.dtype("<" + dtype_code)
        end = self.pos + dt.itemsize
        if end > len(self.buf):
            raise MeshFormatError("unexpected end of PLY data")
        val = np.frombuffer(self.buf, dtype=dt, count=1, offset=self.pos)[0]
        self.pos = end
        return val


def _read_ply_vertices(reader, count, props, path):
    for p in props:
        if p[0] == "list":
            raise MeshFormatError(f"{path}: list property in vertex element unsupported")
    names = [p[2] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MeshFormatError(f"{path}: vertex element lacks {axis}")
    if reader.binary:
        dt = np.dtype([(p[2], "<" + _ply_code(p[1], path)) for p in props])
        end = reader.pos + dt.itemsize * count
        if end > len(reader.buf):
            raise MeshFormatError(f"{path}: truncated vertex data")
        rec = np.frombuffer(reader.buf, dtype=dt, count=count, offset=reader.pos)
        reader.pos = end
        return np.stack(
            [rec["x"].astype(np.float64), rec["y"].astype(np.float64),
             rec["z"].astype(np.float64)], axis=1)
    out = np.empty((count, 3), dtype=np.float64)
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    width = len(props)
    for i in range(count):
        row = [reader.take() for _ in range(width)]
        out[i] = (float(row[ix]), float(row[iy]), float(row[iz]))
    return out


def _read_ply_faces(reader, count, props, path):
    if len(props) < 1 or props[0][0] != "list":
        raise MeshFormatError(f"{path}: face element must start with a list property")
    _, count_t, index_t, _ = props[0]

    def take_scalar(type_name):
        return reader.take(_ply_code(type_name, path)) if reader.binary else reader.take()

    faces = []
    for _ in range(count):
        n = int(take_scalar(count_t))
        idx = [int(take_scalar(index_t)) for _ in range(n)]
        if n < 3:
            raise MeshFormatError(f"{path}: face with {n} vertices")
        for k in range(1, n - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
        for p in props[1:]:  # trailing per-face properties are skipped
            if p[0] == "list":
                m = int(take_scalar(p[1]))
                for _ in range(m):
                    take_scalar(p[2])
            else:
                take_scalar(p[1])
    return faces


def _skip_ply_element(reader, count, props, path, name):
    if reader.binary and any(p[0] == "list" for p in props):
        raise MeshFormatError(f"{path}: cannot skip binary list element {name!r}")
    for _ in range(count):
        for p in props:
            if p[0] == "scalar":
                if reader.binary:
                    reader.take(_ply_code(p[1], path))
                else:
                    reader.take()
            else:
                n = int(reader.take())
                for _ in range(n):
                    reader.take()


def _ply_code(type_name, path):
    try:
        return _PLY_SCALARS[type_name]
    except KeyError:
        raise MeshFormatError(f"{path}: unsupported PLY type {type_name!r}") from None


# ---------------------------------------------------------------------------
# Subdivision

def subdivide_midpoint(mesh: TriangleMesh) -> TriangleMesh:
    """Split every face into 4 using edge midpoints.

    Shared edges contribute exactly one new vertex. Original vertices keep
    their indices; new vertices are appended in lexicographic order of the
    (lo, hi) index pair of their parent edge, which makes the operation
    deterministic for a given input ordering.
    """
    verts = mesh.vertices
    faces = mesh.faces
    edges = mesh.edges()  # already sorted lexicographically
    n_old = len(verts)

    midpoints = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    new_verts = np.concatenate([verts, midpoints])

    # edge (lo, hi) -> new vertex index, via searchsorted on the packed pair
    packed = edges[:, 0] * np.int64(n_old) + edges[:, 1]

    def midpoint_index(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        key = lo * np.int64(n_old) + hi
        return n_old + np.searchsorted(packed, key)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab = midpoint_index(a, b)
    mbc = midpoint_index(b, c)
    mca = midpoint_index(c, a)

    new_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
    new_faces[0::4] = np.stack([a, mab, mca], axis=1)
    new_faces[1::4] = np.stack([b, mbc, mab], axis=1)
    new_faces[2::4] = np.stack([c, mca, mbc], axis=1)
    new_faces[3::4] = np.stack([mab, mbc, mca], axis=1)
    return TriangleMesh(new_verts, new_faces)


def upsample_until(mesh: TriangleMesh, min_vertices: int) -> TriangleMesh:
    """Subdivide repeatedly until the vertex count strictly exceeds min_vertices."""
    if min_vertices < 1:
        raise ValueError("min_vertices must be >= 1")
    while mesh.n_vertices <= min_vertices:
        mesh = subdivide_midpoint(mesh)
    return mesh


def make_icosahedron(radius: float = 1.0) -> TriangleMesh:
    """Regular icosahedron centered at the origin, circumradius `radius`."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts = raw * (radius / np.linalg.norm(raw[0]))
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return TriangleMesh(verts, faces)
