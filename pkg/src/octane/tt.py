"""Tensor-train format for small dense tensors.

Cores follow the usual convention: core ``k`` has shape ``(r_{k-1}, n_k, r_k)``
with boundary ranks ``r_0 = r_d = 1``. All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

RankCap = Union[int, Sequence[int], None]


@dataclass(frozen=True)
class TtTensor:
    """Immutable tensor train. Use the module functions to build and combine them."""

    cores: tuple

    def __post_init__(self):
        cores = tuple(np.array(c, dtype=np.float64) for c in self.cores)
        if len(cores) < 2:
            raise ValueError("a tensor train needs at least two cores")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise ValueError(f"core {k} must be 3-way, got shape {c.shape}")
            if k > 0 and c.shape[0] != cores[k - 1].shape[2]:
                raise ValueError(f"rank mismatch between cores {k - 1} and {k}")
            c.setflags(write=False)
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        object.__setattr__(self, "cores", cores)

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        """Full rank vector ``(1, r_1, ..., r_{d-1}, 1)``."""
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def ndim(self) -> int:
        return len(self.cores)


def tt_rank(a: TtTensor) -> tuple:
    """Interior ranks ``(r_1, ..., r_{d-1})``."""
    return a.ranks[1:-1]


def _caps(max_rank: RankCap, d: int) -> list:
    if max_rank is None:
        return [np.iinfo(np.int64).max] * (d - 1)
    if np.isscalar(max_rank):
        caps = [int(max_rank)] * (d - 1)
    else:
        caps = [int(r) for r in max_rank]
        if len(caps) != d - 1:
            raise ValueError(f"expected {d - 1} rank caps, got {len(caps)}")
    if min(caps) < 1:
        raise ValueError("rank caps must be >= 1")
    return caps


def _check_tol(tol: float) -> float:
    tol = float(tol)
    if not tol >= 0:
        raise ValueError(f"tolerance must be nonnegative, got {tol}")
    return tol


def _svd(mat: np.ndarray):
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    # largest-magnitude entry of each left vector is made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, s, vt * signs[:, None]


def _chop(s: np.ndarray, delta: float, cap: int) -> int:
    """Smallest rank whose discarded tail has Frobenius norm <= delta, capped."""
    if np.isinf(delta):
        r = 1
    else:
        tail = np.concatenate([np.cumsum((s**2)[::-1])[::-1], [0.0]])
        r = int(np.argmax(tail <= delta**2))
    return max(1, min(r, cap, s.size))


def _zeros(dims) -> TtTensor:
    return TtTensor(tuple(np.zeros((1, n, 1)) for n in dims))


def tt_from_dense(t: np.ndarray, tol: float = 0.0, max_rank: RankCap = None) -> TtTensor:
    """TT-SVD of a dense array.

    The relative tolerance is split evenly over the ``d - 1`` unfoldings so
    that ``||t - dense(result)||_F <= tol * ||t||_F`` whenever the rank cap
    does not bind.
    """
    t = np.asarray(t, dtype=np.float64)
    tol = _check_tol(tol)
    if t.ndim < 2 or min(t.shape) < 1:
        raise ValueError(f"need a tensor with positive dims, got shape {t.shape}")
    d = t.ndim
    caps = _caps(max_rank, d)
    norm = np.linalg.norm(t)
    if norm == 0.0:
        return _zeros(t.shape)
    delta = tol / np.sqrt(d - 1) * norm
    cores = []
    r_prev = 1
    c = t
    for k in range(d - 1):
        c = c.reshape(r_prev * t.shape[k], -1)
        u, s, vt = _svd(c)
        r = _chop(s, delta, caps[k])
        cores.append(u[:, :r].reshape(r_prev, t.shape[k], r))
        c = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(c.reshape(r_prev, t.shape[-1], 1))
    return TtTensor(tuple(cores))


def tt_to_dense(a: TtTensor) -> np.ndarray:
    out = a.cores[0].reshape(a.dims[0], -1)
    for c in a.cores[1:]:
        out = out @ c.reshape(c.shape[0], -1)
        out = out.reshape(-1, c.shape[2])
    return out.reshape(a.dims)


def _orthogonalize_right(cores: list) -> list:
    """Make cores 1..d-1 right-orthonormal, pushing the weight into core 0."""
    cores = list(cores)
    for k in range(len(cores) - 1, 0, -1):
        c = cores[k]
        r0, n, r1 = c.shape
        q, rr = np.linalg.qr(c.reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(-1, n, r1)
        cores[k - 1] = np.einsum("anb,cb->anc", cores[k - 1], rr)
    return cores


def tt_round(a: TtTensor, tol: float = 0.0, max_rank: RankCap = None) -> TtTensor:
    """Recompress ``a`` to relative accuracy ``tol`` and interior ranks ``<= max_rank``.

    ``tol = inf`` is allowed and truncates to rank one (used for zero right-hand sides).
    """
    tol = _check_tol(tol)
    d = a.ndim
    caps = _caps(max_rank, d)
    cores = _orthogonalize_right(a.cores)
    norm = np.linalg.norm(cores[0])
    delta = tol / np.sqrt(d - 1) * norm if np.isfinite(tol) else np.inf
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = _svd(cores[k].reshape(r0 * n, r1))
        r = _chop(s, delta, caps[k])
        cores[k] = u[:, :r].reshape(r0, n, r)
        cores[k + 1] = np.einsum("ab,bnc->anc", s[:r, None] * vt[:r], cores[k + 1])
    return TtTensor(tuple(cores))


def _check_same_dims(a: TtTensor, b: TtTensor):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


def tt_add(a: TtTensor, b: TtTensor) -> TtTensor:
    """Exact sum; interior ranks add."""
    _check_same_dims(a, b)
    d = a.ndim
    cores = []
    for k, (x, y) in enumerate(zip(a.cores, b.cores)):
        if k == 0:
            cores.append(np.concatenate([x, y], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([x, y], axis=0))
        else:
            z = np.zeros((x.shape[0] + y.shape[0], x.shape[1], x.shape[2] + y.shape[2]))
            z[: x.shape[0], :, : x.shape[2]] = x
            z[x.shape[0] :, :, x.shape[2] :] = y
            cores.append(z)
    return TtTensor(tuple(cores))


def tt_scale(a: TtTensor, c: float) -> TtTensor:
    return TtTensor((a.cores[0] * float(c),) + a.cores[1:])


def tt_mode1_matmul(k: np.ndarray, a: TtTensor) -> TtTensor:
    """Apply ``k`` to the first mode: ``out[i, ...] = sum_p k[i, p] * a[p, ...]``."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[1] != a.dims[0]:
        raise ValueError(f"matrix of shape {k.shape} cannot act on mode of size {a.dims[0]}")
    return TtTensor((np.einsum("ij,ajb->aib", k, a.cores[0]),) + a.cores[1:])


def tt_ones(dims) -> TtTensor:
    return TtTensor(tuple(np.ones((1, n, 1)) for n in dims))


def tt_add_scalar(a: TtTensor, b: float) -> TtTensor:
    return tt_add(a, tt_scale(tt_ones(a.dims), b))


def tt_inner(a: TtTensor, b: TtTensor) -> float:
    _check_same_dims(a, b)
    v = np.ones((1, 1))
    for x, y in zip(a.cores, b.cores):
        v = np.einsum("ab,anc,bnd->cd", v, x, y)
    return float(v[0, 0])


def tt_norm(a: TtTensor) -> float:
    """Frobenius norm via orthogonalization (no squaring cancellation)."""
    return float(np.linalg.norm(_orthogonalize_right(a.cores)[0]))


def tt_storage_bytes(a: TtTensor, bytes_per_element: int = 8) -> int:
    if bytes_per_element < 1:
        raise ValueError("bytes_per_element must be >= 1")
    return int(sum(c.size for c in a.cores)) * int(bytes_per_element)
