"""2-bit packed ternary matrices and a multiply-free matmul over them.

Layout: the row-major flattening of the sign matrix is cut into groups of
four; element ``i`` sits in bits ``2*(i % 4)`` .. ``2*(i % 4) + 1`` of byte
``i // 4`` (least-significant pair first). Codes: 00 -> 0, 01 -> +1,
10 -> -1; 11 is invalid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError

CODE_ZERO, CODE_POS, CODE_NEG, CODE_INVALID = 0, 1, 2, 3
_HEADER = struct.Struct("<IIf")
# upper bound on gathered elements per chunk in packed_matmul
_GATHER_BUDGET = 1 << 22


class PackingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PackedTernaryMatrix:
    rows: int
    cols: int
    alpha: float
    codes: bytes
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        expected = -(-self.rows * self.cols // 4)
        if len(self.codes) != expected:
            raise PackingError(
                f"{self.rows}x{self.cols} needs {expected} code bytes, got {len(self.codes)}")

    @property
    def nbytes(self) -> int:
        return len(self.codes)

    def signs(self) -> np.ndarray:
        return unpack(self)[0]

    def dense(self, dtype=np.float32) -> np.ndarray:
        return (np.float32(self.alpha) * self.signs().astype(np.float32)).astype(dtype)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.rows, self.cols, self.alpha) + self.codes

    @classmethod
    def from_bytes(cls, buf: bytes) -> PackedTernaryMatrix:
        if len(buf) < _HEADER.size:
            raise PackingError("packed matrix truncated before header end")
        rows, cols, alpha = _HEADER.unpack_from(buf, 0)
        codes = bytes(buf[_HEADER.size:])
        out = cls(rows, cols, alpha, codes)
        unpack(out)  # rejects code 11
        return out

    def _row_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        # Cached (pos_rows, pos_cols, neg_rows, neg_cols), row-sorted.
        if "csr" not in self._index:
            s = self.signs()
            pr, pc = np.nonzero(s == 1)
            nr, nc = np.nonzero(s == -1)
            self._index["csr"] = (pr, pc, nr, nc)
        return self._index["csr"]


def pack(signs, alpha: float) -> PackedTernaryMatrix:
    s = np.asarray(signs)
    if s.ndim != 2:
        raise PackingError(f"expected a 2-D sign matrix, got shape {s.shape}")
    bad = ~np.isin(s, (-1, 0, 1))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise PackingError(f"non-ternary entry {s[r, c]!r} at ({r}, {c})")
    flat = s.reshape(-1).astype(np.int8)
    codes = np.zeros(-(-flat.size // 4) * 4, dtype=np.uint8)
    codes[: flat.size][flat == 1] = CODE_POS
    codes[: flat.size][flat == -1] = CODE_NEG
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return PackedTernaryMatrix(s.shape[0], s.shape[1], float(np.float32(alpha)),
                               packed.astype(np.uint8).tobytes())


def unpack(p: PackedTernaryMatrix) -> tuple[np.ndarray, float]:
    """Recover (signs as int8, alpha); raises on the reserved code 11."""
    raw = np.frombuffer(p.codes, dtype=np.uint8)
    codes = np.stack([(raw >> shift) & 3 for shift in (0, 2, 4, 6)], axis=1).reshape(-1)
    n = p.rows * p.cols
    codes = codes[:n]
    if (codes == CODE_INVALID).any():
        i = int(np.argmax(codes == CODE_INVALID))
        raise PackingError(f"corrupt code 11 at element {i} (row {i // p.cols}, col {i % p.cols})")
    signs = np.zeros(n, dtype=np.int8)
    signs[codes == CODE_POS] = 1
    signs[codes == CODE_NEG] = -1
    return signs.reshape(p.rows, p.cols), p.alpha


def _row_sums(rows: np.ndarray, cols: np.ndarray, x: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, x.shape[1]), dtype=np.float64)
    if cols.size == 0:
        return out
    counts = np.bincount(rows, minlength=n_rows)
    ends = np.cumsum(counts)
    starts = ends - counts
    step = max(1, _GATHER_BUDGET // max(1, x.shape[1]))
    r0 = 0
    while r0 < n_rows:
        # grow the chunk of output rows until the gathered slice hits the budget
        r1 = r0 + 1
        while r1 < n_rows and ends[r1] - starts[r0] <= step:
            r1 += 1
        lo, hi = starts[r0], ends[r1 - 1]
        if hi > lo:
            block = x[cols[lo:hi]]
            nonempty = np.nonzero(counts[r0:r1])[0]
            out[r0 + nonempty] = np.add.reduceat(block, starts[r0 + nonempty] - lo, axis=0)
        r0 = r1
    return out


def packed_matmul(p: PackedTernaryMatrix, x) -> np.ndarray:
    """(out x in) packed matrix times (in x b) matrix.

    Each output accumulates +x_j for code 01 and -x_j for code 10 (in float64)
    and is scaled by alpha once at the end.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != p.cols:
        raise ShapeError(f"packed_matmul dimension mismatch: {p.rows}x{p.cols} @ {x.shape}")
    pr, pc, nr, nc = p._row_index()
    xf = x.astype(np.float64, copy=False)
    acc = _row_sums(pr, pc, xf, p.rows)
    acc -= _row_sums(nr, nc, xf, p.rows)
    acc *= p.alpha
    return acc.astype(x.dtype, copy=False)


def packed_linear(x: Tensor, p: PackedTernaryMatrix) -> Tensor:
    """Inference-only linear map over a packed weight; the result has no graph."""
    if x.shape[-1] != p.cols:
        raise ShapeError(f"packed linear dimension mismatch: {x.shape} with {p.rows}x{p.cols}")
    lead = x.shape[:-1]
    y = packed_matmul(p, x.data.reshape(-1, p.cols).T).T
    return Tensor._result(np.ascontiguousarray(y).reshape(*lead, p.rows), (), "packed_linear", None)
