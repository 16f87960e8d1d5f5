"""Coarse-to-fine surface code construction.

A mesh's vertices are split into balanced groups over `digits` iterations;
stacking the per-iteration group labels gives each vertex a fixed-length
code in the chosen radix. The leaf groups of the final iteration define a
bijective lookup table from codes to 3D group centroids, which is what
turns per-pixel code predictions back into model-space points.

Splits are seeded per tree node (a hash of the seed and the node's
position), so a codebook is bit-reproducible and, for power-of-two radices,
the leaf partition is identical to the binary one regardless of the radix
used to label it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .cluster import SplitRandom, _balanced_split
from .mesh import TriangleMesh

_MAX_CODE_BITS = 62  # packed integer keys must fit a signed 64-bit value


class UnknownCodeError(KeyError):
    """A code names an empty leaf group: no 3D point corresponds to it."""


def _is_power_of_two(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def _bits_per_digit(radix: int) -> int:
    return int(radix - 1).bit_length() if radix > 1 else 1


@dataclass(frozen=True)
class EncodingParams:
    """Code shape: `digits` grouping iterations with `radix` groups per split."""

    radix: int = 2
    digits: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.radix < 2:
            raise ValueError("radix must be >= 2")
        if self.digits < 1:
            raise ValueError("digits must be >= 1")
        if self.digits * np.log2(self.radix) > _MAX_CODE_BITS:
            raise ValueError("code space exceeds 62 bits")

    @property
    def n_classes(self) -> int:
        return self.radix**self.digits


@dataclass(frozen=True)
class GroupingHierarchy:
    """Per-vertex group labels for every splitting iteration.

    `assignments[i, j]` is the label (0..radix-1) vertex i received in
    iteration j+1; the first j columns identify the vertex's group after
    j iterations.
    """

    radix: int
    seed: int
    assignments: np.ndarray  # (V, digits) uint16

    @property
    def digits(self) -> int:
        return self.assignments.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.assignments.shape[0]

    def group_keys(self, level: int) -> np.ndarray:
        """Packed prefix key per vertex identifying its group at `level`."""
        if not 0 <= level <= self.digits:
            raise ValueError(f"level must be in [0, {self.digits}]")
        return pack_keys(self.assignments[:, :level], self.radix)

    def groups(self, level: int) -> list[np.ndarray]:
        """Vertex index sets of the groups at `level`, in code order."""
        keys = self.group_keys(level)
        order = np.argsort(keys, kind="stable")
        _, starts = np.unique(keys[order], return_index=True)
        return [np.sort(chunk) for chunk in np.split(order, starts[1:])]


def pack_keys(digits: np.ndarray, radix: int) -> np.ndarray:
    """Pack digit rows into integer keys (big-endian digit significance)."""
    digits = np.asarray(digits)
    if digits.ndim == 1:
        digits = digits[None, :]
    n, d = digits.shape
    if d == 0:
        return np.zeros(n, dtype=np.int64)
    powers = radix ** np.arange(d - 1, -1, -1, dtype=np.int64)
    return digits.astype(np.int64) @ powers


def _build_assignments(vertices: np.ndarray, radix: int, levels: int, seed: int) -> np.ndarray:
    """Split vertices into `radix` balanced children, `levels` times.

    Groups are addressed by heap-style node ids (child = parent * radix +
    label + 1) which key the per-split draw stream. Single-member groups are
    carried through with label 0 for all remaining levels; groups smaller
    than the radix split into one singleton child per member.
    """
    n = len(vertices)
    out = np.zeros((n, levels), dtype=np.uint16)
    groups = [(0, np.arange(n))]
    for level in range(levels):
        next_groups = []
        for node, idx in groups:
            if len(idx) == 1:
                next_groups.append((node * radix + 1, idx))
                continue
            k = min(radix, len(idx))
            labels = _balanced_split(vertices[idx], k, SplitRandom(seed, node))
            out[idx, level] = labels
            for child in range(k):
                next_groups.append((node * radix + child + 1, idx[labels == child]))
        groups = next_groups
    return out


def build_hierarchy(mesh, params: EncodingParams) -> GroupingHierarchy:
    """Run the full coarse-to-fine grouping for a mesh (or raw vertex array).

    For power-of-two radices every iteration is realized as log2(radix)
    nested two-way splits, so the leaf partition depends only on the total
    bit depth and the seed, not on the radix labeling.
    """
    vertices = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    n = len(vertices)
    if params.n_classes > n:
        raise ValueError(
            f"radix^digits = {params.n_classes} exceeds vertex count {n}; upsample first"
        )
    if _is_power_of_two(params.radix):
        bpd = _bits_per_digit(params.radix)
        bits = _build_assignments(vertices, 2, params.digits * bpd, params.seed)
        merged = _merge_binary_digits(bits, params.radix)
        return GroupingHierarchy(params.radix, params.seed, merged)
    assignments = _build_assignments(vertices, params.radix, params.digits, params.seed)
    return GroupingHierarchy(params.radix, params.seed, assignments)


def _merge_binary_digits(bits: np.ndarray, radix: int) -> np.ndarray:
    bpd = _bits_per_digit(radix)
    n, total = bits.shape
    grouped = bits.reshape(n, total // bpd, bpd).astype(np.int64)
    weights = 2 ** np.arange(bpd - 1, -1, -1, dtype=np.int64)
    return (grouped @ weights).astype(np.uint16)


def _split_digits_to_binary(digits: np.ndarray, radix: int) -> np.ndarray:
    bpd = _bits_per_digit(radix)
    n, d = digits.shape
    shifts = np.arange(bpd - 1, -1, -1, dtype=np.int64)
    bits = (digits.astype(np.int64)[:, :, None] >> shifts) & 1
    return bits.reshape(n, d * bpd).astype(np.uint16)


@dataclass(frozen=True)
class Codebook:
    """Bijective map between full vertex codes and leaf-group centroids.

    Fields mirror what the binary codebook file stores: the per-vertex code
    array, and the sorted (code, centroid) table with member counts. The
    fingerprint ties the codebook to the exact vertex buffer it encodes.
    """

    radix: int
    digits: int
    seed: int
    mesh_fingerprint: bytes
    vertex_codes: np.ndarray  # (V, digits) uint16
    table_codes: np.ndarray  # (L, digits) uint16, sorted by packed key
    centroids: np.ndarray  # (L, 3) float64
    counts: np.ndarray  # (L,) int64
    _keys: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        keys = pack_keys(self.table_codes, self.radix)
        if np.any(np.diff(keys) <= 0):
            raise ValueError("table codes must be strictly sorted")
        object.__setattr__(self, "_keys", keys)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_codes)

    @property
    def n_leaves(self) -> int:
        return len(self.table_codes)

    def code_of(self, vertex_index: int) -> np.ndarray:
        return self.vertex_codes[vertex_index]

    def decode(self, code) -> np.ndarray:
        """Centroid for one code. Raises UnknownCodeError for empty leaves."""
        code = np.asarray(code, dtype=np.int64)
        if code.shape != (self.digits,):
            raise ValueError(f"code must have {self.digits} digits, got {code.shape}")
        if code.min() < 0 or code.max() >= self.radix:
            raise ValueError("digit out of range for radix")
        key = pack_keys(code[None, :], self.radix)[0]
        pos = np.searchsorted(self._keys, key)
        if pos == len(self._keys) or self._keys[pos] != key:
            raise UnknownCodeError(f"code {code.tolist()} has no leaf group")
        return self.centroids[pos]

    def decode_many(self, codes: np.ndarray):
        """Vectorized lookup.

        Returns:
            (points, known): points is (N, 3) with rows valid where `known`
            is True; unknown codes yield zero rows and known=False.
        """
        codes = np.asarray(codes)
        keys = pack_keys(codes.reshape(-1, codes.shape[-1]), self.radix)
        pos = np.searchsorted(self._keys, keys)
        pos_clipped = np.minimum(pos, len(self._keys) - 1)
        known = self._keys[pos_clipped] == keys
        points = np.zeros((len(keys), 3))
        points[known] = self.centroids[pos_clipped[known]]
        return points, known

    def leaf_sizes(self) -> np.ndarray:
        return self.counts

    def max_leaf_diameter(self, vertices: np.ndarray) -> float:
        """Largest within-leaf pairwise vertex distance (exact, small leaves)."""
        keys = pack_keys(self.vertex_codes, self.radix)
        order = np.argsort(keys, kind="stable")
        _, starts = np.unique(keys[order], return_index=True)
        worst = 0.0
        for chunk in np.split(order, starts[1:]):
            pts = vertices[chunk]
            if len(pts) < 2:
                continue
            diff = pts[:, None, :] - pts[None, :, :]
            worst = max(worst, float(np.sqrt((diff**2).sum(-1)).max()))
        return worst


def build_codebook(mesh, hierarchy: GroupingHierarchy) -> Codebook:
    """Aggregate leaf groups into the code -> centroid lookup table."""
    vertices = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    if len(vertices) != hierarchy.n_vertices:
        raise ValueError("mesh and hierarchy disagree on vertex count")
    codes = hierarchy.assignments
    keys = pack_keys(codes, hierarchy.radix)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
    sums = np.add.reduceat(vertices[order], starts, axis=0)
    centroids = sums / counts[:, None]
    table_codes = codes[order[starts]]
    fingerprint = (
        mesh.fingerprint()
        if isinstance(mesh, TriangleMesh)
        else hashlib.sha256(np.ascontiguousarray(vertices).tobytes()).digest()
    )
    return Codebook(
        radix=hierarchy.radix,
        digits=hierarchy.digits,
        seed=hierarchy.seed,
        mesh_fingerprint=fingerprint,
        vertex_codes=codes.copy(),
        table_codes=table_codes,
        centroids=centroids,
        counts=counts.astype(np.int64),
    )


def decode(codebook: Codebook, code) -> np.ndarray:
    """Lookup-table read: the centroid stored for `code`."""
    return codebook.decode(code)


def radix_convert(code, target_radix: int, source_radix: int = 2) -> np.ndarray:
    """Regroup a code's bits into digits of another power-of-two radix.

    Consecutive bits are merged most-significant-first, so the binary code
    11111110 11111111 becomes (254, 255) in radix 256. The conversion is a
    pure relabeling and is exactly invertible by converting back.

    Accepts a single code (1D) or a batch (2D, one code per row).
    """
    for r in (source_radix, target_radix):
        if not _is_power_of_two(r):
            raise ValueError(f"radix {r} is not a power of two")
    code = np.asarray(code)
    single = code.ndim == 1
    digits = code[None, :] if single else code
    if digits.min(initial=0) < 0 or digits.max(initial=0) >= source_radix:
        raise ValueError("digit out of range for source radix")
    bits = _split_digits_to_binary(digits.astype(np.uint16), source_radix)
    bpd = _bits_per_digit(target_radix)
    if bits.shape[1] % bpd != 0:
        raise ValueError(
            f"{bits.shape[1]} bits not divisible by log2({target_radix}) = {bpd}"
        )
    out = _merge_binary_digits(bits, target_radix)
    return out[0] if single else out


def convert_codebook(codebook: Codebook, target_radix: int) -> Codebook:
    """Relabel an entire codebook in another power-of-two radix.

    Centroids, leaf membership, and fingerprint are unchanged; only the
    digit grouping of every code differs.
    """
    new_vertex = radix_convert(codebook.vertex_codes, target_radix, codebook.radix)
    new_table = radix_convert(codebook.table_codes, target_radix, codebook.radix)
    return Codebook(
        radix=target_radix,
        digits=new_table.shape[1],
        seed=codebook.seed,
        mesh_fingerprint=codebook.mesh_fingerprint,
        vertex_codes=new_vertex,
        table_codes=new_table,
        centroids=codebook.centroids.copy(),
        counts=codebook.counts.copy(),
    )


def truncate_lookup(codebook: Codebook, keep_digits: int) -> Codebook:
    """Coarsen the table to code prefixes of length `keep_digits`.

    Each prefix maps to the member-count-weighted mean of its leaf
    centroids, i.e. the centroid of the corresponding coarser group.
    """
    if not 1 <= keep_digits <= codebook.digits:
        raise ValueError(f"keep_digits must be in [1, {codebook.digits}]")
    if keep_digits == codebook.digits:
        return codebook
    prefix = codebook.table_codes[:, :keep_digits]
    # table codes are sorted by full key, so prefix keys are sorted too
    keys = pack_keys(prefix, codebook.radix)
    uniq, first_rows, inverse = np.unique(keys, return_index=True, return_inverse=True)
    weighted = codebook.centroids * codebook.counts[:, None]
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, weighted)
    member_counts = np.zeros(len(uniq), dtype=np.int64)
    np.add.at(member_counts, inverse, codebook.counts)
    centroids = sums / member_counts[:, None]
    table_codes = prefix[first_rows]
    return Codebook(
        radix=codebook.radix,
        digits=keep_digits,
        seed=codebook.seed,
        mesh_fingerprint=codebook.mesh_fingerprint,
        vertex_codes=codebook.vertex_codes[:, :keep_digits].copy(),
        table_codes=table_codes,
        centroids=centroids,
        counts=member_counts,
    )


def verify_hierarchy(hierarchy: GroupingHierarchy) -> None:
    """Assert the structural invariants of a grouping hierarchy.

    Checks, for every iteration: children partition their parent group and
    any two sibling sizes differ by at most one (singleton carry-through
    excepted). Raises AssertionError with a description on violation.
    """
    assignments = hierarchy.assignments
    n = hierarchy.n_vertices
    parent_keys = np.zeros(n, dtype=np.int64)
    for level in range(hierarchy.digits):
        child_keys = parent_keys * hierarchy.radix + assignments[:, level]
        uniq_children, child_sizes = np.unique(child_keys, return_counts=True)
        parent_of_child = uniq_children // hierarchy.radix
        _, seg_starts = np.unique(parent_of_child, return_index=True)
        # sibling sizes within each parent may differ by at most one
        seg_max = np.maximum.reduceat(child_sizes, seg_starts)
        seg_min = np.minimum.reduceat(child_sizes, seg_starts)
        bad = np.flatnonzero(seg_max - seg_min > 1)
        if bad.size:
            raise AssertionError(
                f"unbalanced split at level {level + 1}: sibling sizes differ by "
                f"{int((seg_max - seg_min)[bad[0]])}"
            )
        parent_keys = child_keys


class SurfaceCodeEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade over hierarchy and codebook construction.

    fit(X) learns the balanced grouping of the (V, 3) vertex array X;
    transform(X) returns the code of the nearest fitted vertex for each
    query point; inverse_transform(codes) returns table centroids.

    Parameters
    ----------
    radix : int, default=2
        Groups per splitting iteration.
    digits : int, default=16
        Number of splitting iterations (code length).
    random_state : int, default=0
        Seed for all splits.

    Attributes
    ----------
    codes_ : ndarray of shape (V, digits)
        Code of each training vertex.
    codebook_ : Codebook
        The code -> centroid lookup table.
    """

    def __init__(self, radix=2, digits=16, random_state=0):
        self.radix = radix
        self.digits = digits
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError("expected (V, 3) vertex array")
        params = EncodingParams(self.radix, self.digits, self.random_state)
        hierarchy = build_hierarchy(X, params)
        self.codebook_ = build_codebook(X, hierarchy)
        self.codes_ = self.codebook_.vertex_codes
        self._tree = cKDTree(X)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        _, nearest = self._tree.query(X)
        return self.codes_[nearest]

    def inverse_transform(self, codes):
        points, known = self.codebook_.decode_many(np.asarray(codes))
        if not known.all():
            raise UnknownCodeError(f"{int((~known).sum())} codes have no leaf group")
        return points
