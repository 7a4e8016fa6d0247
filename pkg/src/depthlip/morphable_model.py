"""Linear PCA face model: mean shape plus identity and expression bases.

A mesh is reconstructed as ``S = mean + U_id @ alpha + U_exp @ beta`` where
the coordinate vector is laid out ``[x0, y0, z0, x1, y1, z1, ...]``.  In
full-scale mode the bases carry 80 identity and 64 expression components; toy
bases may use any internally consistent dimensions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

FULL_ID_DIM = 80
FULL_EXP_DIM = 64

BASIS_MAGIC = b"DLB1\n"


def _as_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    return arr


@dataclass
class BasisSet:
    """Mean shape and PCA bases defining the face space.

    mean_shape: (3N,) object-space coordinates.
    id_basis:   (3N, D_id) identity components.
    exp_basis:  (3N, D_exp) expression components.
    triangles:  (T, 3) vertex-index triples, shared by every mesh.
    """

    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        self.id_basis = np.asarray(self.id_basis, dtype=np.float64)
        self.exp_basis = np.asarray(self.exp_basis, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.mean_shape.ndim != 1 or self.mean_shape.size % 3 != 0:
            raise ValueError("mean_shape must be a flat vector of length 3*N")
        n3 = self.mean_shape.size
        for name, basis in (("id_basis", self.id_basis), ("exp_basis", self.exp_basis)):
            if basis.ndim != 2 or basis.shape[0] != n3:
                raise ValueError(f"{name} must have shape (3*N, D), got {basis.shape}")
        if not (np.isfinite(self.mean_shape).all()
                and np.isfinite(self.id_basis).all()
                and np.isfinite(self.exp_basis).all()):
            raise ValueError("basis contains non-finite values")
        n = self.vertex_count
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError(f"triangle indices must lie in [0, {n})")

    @property
    def vertex_count(self):
        return self.mean_shape.size // 3

    @property
    def id_dim(self):
        return self.id_basis.shape[1]

    @property
    def exp_dim(self):
        return self.exp_basis.shape[1]


@dataclass
class IdentityCoeffs:
    """PCA weights controlling who the face is."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_vector(self.values, "identity coefficients")


@dataclass
class ExpressionCoeffs:
    """PCA weights controlling the articulatory pose of the face."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_vector(self.values, "expression coefficients")


@dataclass
class FaceMesh:
    """Reconstructed vertices (N, 3) plus the shared triangle topology."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices contain non-finite values")


@dataclass
class ExpressionTrack:
    """Per-frame expression coefficient sequence, e.g. from an audio2motion model."""

    frames: list = field(default_factory=list)
    frame_rate: float = 25.0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        dims = {f.values.size for f in self.frames}
        if len(dims) > 1:
            raise ValueError(f"expression frames have inconsistent dimensions: {sorted(dims)}")

    def __len__(self):
        return len(self.frames)


def reconstruct_shape(basis: BasisSet, alpha: IdentityCoeffs, beta: ExpressionCoeffs) -> FaceMesh:
    """Evaluate the linear face model at the given coefficients.

    Returns a mesh whose vertices are
    ``reshape(mean + U_id @ alpha + U_exp @ beta, (N, 3))``.
    """
    a = alpha.values
    b = beta.values
    if a.size != basis.id_dim:
        raise ValueError(f"identity coefficients have length {a.size}, basis expects {basis.id_dim}")
    if b.size != basis.exp_dim:
        raise ValueError(f"expression coefficients have length {b.size}, basis expects {basis.exp_dim}")
    flat = basis.mean_shape + basis.id_basis @ a + basis.exp_basis @ b
    return FaceMesh(vertices=flat.reshape(-1, 3), triangles=basis.triangles)


def swap_expression(basis: BasisSet, alpha: IdentityCoeffs, beta_new: ExpressionCoeffs) -> FaceMesh:
    """Rebuild the mesh with identity held fixed and a replacement expression.

    Inference-time entry point: identity coefficients stay those fitted to the
    subject while the expression sequence comes from an external model.
    """
    return reconstruct_shape(basis, alpha, beta_new)


# ---------------------------------------------------------------------------
# basis file I/O
#
# Layout: magic "DLB1\n", ASCII header "N D_id D_exp\n", little-endian f32
# payload (mean 3N, id basis 3N*D_id column-major, exp basis 3N*D_exp
# column-major), ASCII triangle-count line, then T uint32 triples.
# ---------------------------------------------------------------------------


def _read_ascii_line(f, what):
    chars = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise FormatError(f"unexpected end of file while reading {what}")
        if c == b"\n":
            break
        chars.extend(c)
        if len(chars) > 256:
            raise FormatError(f"{what} line is implausibly long")
    return chars.decode("ascii", errors="replace")


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file: expected {count} bytes of {what}, got {len(data)}")
    return data


def write_basis(path, basis: BasisSet):
    """Serialize a BasisSet to the binary basis format."""
    n3 = basis.mean_shape.size
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(f"{basis.vertex_count} {basis.id_dim} {basis.exp_dim}\n".encode("ascii"))
        f.write(basis.mean_shape.astype("<f4").tobytes())
        f.write(basis.id_basis.astype("<f4").flatten(order="F").tobytes())
        f.write(basis.exp_basis.astype("<f4").flatten(order="F").tobytes())
        f.write(f"{basis.triangles.shape[0]}\n".encode("ascii"))
        f.write(basis.triangles.astype("<u4").tobytes())


def load_basis(path, full_scale=False) -> BasisSet:
    """Load a BasisSet written by :func:`write_basis`.

    With ``full_scale`` the identity/expression dimensions must be exactly
    80/64; toy bases of any consistent size load otherwise.
    """
    with open(path, "rb") as f:
        magic = f.read(len(BASIS_MAGIC))
        if magic != BASIS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {BASIS_MAGIC!r}")
        header = _read_ascii_line(f, "basis header")
        parts = header.split()
        if len(parts) != 3:
            raise FormatError(f"header must be 'N D_id D_exp', got {header!r}")
        try:
            n, d_id, d_exp = (int(p) for p in parts)
        except ValueError:
            raise FormatError(f"non-integer basis header fields: {header!r}") from None
        if n <= 0 or d_id < 0 or d_exp < 0:
            raise FormatError(f"invalid basis dimensions N={n} D_id={d_id} D_exp={d_exp}")
        if full_scale and (d_id, d_exp) != (FULL_ID_DIM, FULL_EXP_DIM):
            raise FormatError(
                f"full-scale mode requires D_id={FULL_ID_DIM}, D_exp={FULL_EXP_DIM}; "
                f"file has {d_id}/{d_exp}")
        n3 = 3 * n
        mean = np.frombuffer(_read_exact(f, 4 * n3, "mean shape"), dtype="<f4")
        id_raw = np.frombuffer(_read_exact(f, 4 * n3 * d_id, "identity basis"), dtype="<f4")
        exp_raw = np.frombuffer(_read_exact(f, 4 * n3 * d_exp, "expression basis"), dtype="<f4")
        tri_line = _read_ascii_line(f, "triangle count")
        try:
            t = int(tri_line)
        except ValueError:
            raise FormatError(f"non-integer triangle count: {tri_line!r}") from None
        if t < 0:
            raise FormatError(f"negative triangle count {t}")
        tris = np.frombuffer(_read_exact(f, 12 * t, "triangles"), dtype="<u4").reshape(t, 3)
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after triangle payload")
    if not (np.isfinite(mean).all() and np.isfinite(id_raw).all() and np.isfinite(exp_raw).all()):
        raise FormatError("basis payload contains non-finite values")
    if tris.size and tris.max() >= n:
        raise FormatError(f"triangle index {tris.max()} out of range for N={n}")
    return BasisSet(
        mean_shape=mean.astype(np.float64),
        id_basis=id_raw.reshape((n3, d_id), order="F").astype(np.float64),
        exp_basis=exp_raw.reshape((n3, d_exp), order="F").astype(np.float64),
        triangles=tris.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# coefficient CSV I/O: one row per frame; the identity file carries a single
# row (80 values in full-scale mode), the expression file one row per frame.
# ---------------------------------------------------------------------------


def _read_csv_rows(path):
    rows = []
    with open(path, "r", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row if c.strip() != ""]
            if not cells:
                continue
            try:
                rows.append(np.array([float(c) for c in cells], dtype=np.float64))
            except ValueError:
                raise FormatError(f"{path}: non-numeric value on line {lineno}") from None
    if not rows:
        raise FormatError(f"{path}: no coefficient rows")
    widths = {r.size for r in rows}
    if len(widths) > 1:
        raise FormatError(f"{path}: inconsistent row widths {sorted(widths)}")
    return rows


def load_identity_csv(path, expected_dim=None) -> IdentityCoeffs:
    """Load the single-row identity coefficient file."""
    rows = _read_csv_rows(path)
    if len(rows) != 1:
        raise FormatError(f"{path}: identity file must contain exactly one row, has {len(rows)}")
    if expected_dim is not None and rows[0].size != expected_dim:
        raise FormatError(f"{path}: expected {expected_dim} identity values, got {rows[0].size}")
    return IdentityCoeffs(rows[0])


def load_expression_track(path, frame_rate=25.0, expected_dim=None) -> ExpressionTrack:
    """Load a per-frame expression coefficient sequence."""
    rows = _read_csv_rows(path)
    if expected_dim is not None and rows[0].size != expected_dim:
        raise FormatError(f"{path}: expected {expected_dim} expression values, got {rows[0].size}")
    return ExpressionTrack(frames=[ExpressionCoeffs(r) for r in rows], frame_rate=frame_rate)


def write_coeff_csv(path, rows):
    """Write coefficient rows (any iterable of vectors) as plain CSV."""
    arr = [np.asarray(r, dtype=np.float64).ravel() for r in rows]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for r in arr:
            writer.writerow([repr(float(v)) for v in r])
