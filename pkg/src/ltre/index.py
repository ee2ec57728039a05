"""Retrieval indexes: exact flat inner-product search and PQ/OPQ compression.

The flat index holds a reference to the float64 document matrix and scores
queries exactly. The product-quantization index splits the (optionally
rotated) space into m subspaces, stores one codebook of 2^bits centroids per
subspace, and scores documents asymmetrically through per-subspace lookup
tables summed in float64. There is no coarse quantizer: search is a single
exhaustive list.

Both search paths share one scoring primitive and one tie-break (score
descending, ordinal ascending), so the exhaustive oracle and the batch
search agree bit-for-bit.

Binary formats (little-endian):
  embeddings: b"LTRE" | version u32=1 | count u64 | dim u32 | rows f32
  pq index:   b"LTRQ" | version u32=1 | count u64 | dim u32 | m u32 | bits u32
              | rotation f32 (dim*dim) | centroids f32 (m * 2^bits * dim/m)
              | codes u8 (count * m)
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._ranking import topn_indices
from .encoder import DocEmbeddingMatrix

log = logging.getLogger(__name__)

_EMB_MAGIC = b"LTRE"
_PQ_MAGIC = b"LTRQ"
_FORMAT_VERSION = 1

# Queries are always processed in fixed-size chunks so that results do not
# depend on the thread count.
_QUERY_CHUNK = 64


@dataclass
class SearchResult:
    """One query's ranked hits: scores non-increasing, ties by ascending ordinal."""

    ordinals: np.ndarray  # (h,) int64
    scores: np.ndarray  # (h,) float64

    def __len__(self) -> int:
        return len(self.ordinals)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(o), float(s)) for o, s in zip(self.ordinals, self.scores)]


@dataclass
class FlatIndex:
    """Exact inner-product index: just a view onto the document matrix."""

    embeddings: DocEmbeddingMatrix

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    @property
    def num_docs(self) -> int:
        return self.embeddings.num_docs


def _score_one(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Single-query GEMV in float64; every caller goes through this so scores
    # are reproducible across the oracle, the flat index, and the trainer.
    return rows @ q


def _as_rows(embeddings: DocEmbeddingMatrix | np.ndarray) -> np.ndarray:
    if isinstance(embeddings, DocEmbeddingMatrix):
        return embeddings.rows
    return np.asarray(embeddings, dtype=np.float64)


def brute_force_topn(
    embeddings: DocEmbeddingMatrix | np.ndarray, q: np.ndarray, n: int
) -> SearchResult:
    """Exhaustive exact top-n by inner product."""
    rows = _as_rows(embeddings)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (rows.shape[1],):
        raise ValueError(f"query dim {q.shape} does not match corpus dim {rows.shape[1]}")
    scores = _score_one(rows, q)
    top = topn_indices(scores, n)
    return SearchResult(ordinals=top, scores=scores[top])


def flat_search(
    index: FlatIndex, queries: np.ndarray, n: int, threads: int = 1
) -> list[SearchResult]:
    """Batch exact search; per query identical to ``brute_force_topn``."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != index.dim:
        raise ValueError(f"query dim {Q.shape[1]} does not match index dim {index.dim}")
    rows = index.embeddings.rows

    def run_chunk(chunk: np.ndarray) -> list[SearchResult]:
        out = []
        for q in chunk:
            scores = _score_one(rows, q)
            top = topn_indices(scores, n)
            out.append(SearchResult(ordinals=top, scores=scores[top]))
        return out

    return _run_chunked(run_chunk, Q, threads)


def _run_chunked(run_chunk, Q: np.ndarray, threads: int) -> list[SearchResult]:
    chunks = [Q[i : i + _QUERY_CHUNK] for i in range(0, len(Q), _QUERY_CHUNK)]
    if threads <= 1 or len(chunks) <= 1:
        results: list[SearchResult] = []
        for c in chunks:
            results.extend(run_chunk(c))
        return results
    with ThreadPoolExecutor(max_workers=threads) as pool:
        out = list(pool.map(run_chunk, chunks))
    return [r for part in out for r in part]


# ---------------------------------------------------------------------------
# Product quantization
# ---------------------------------------------------------------------------


@dataclass
class PQCodebooks:
    """Per-subspace centroids plus an orthonormal rotation (identity if unused)."""

    m: int
    bits: int
    centroids: np.ndarray  # (m, 2^bits, dim/m) float32
    rotation: np.ndarray  # (dim, dim) float32

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        self.rotation = np.asarray(self.rotation, dtype=np.float32)
        if self.centroids.shape[0] != self.m or self.centroids.shape[1] != 2**self.bits:
            raise ValueError(
                f"centroids shape {self.centroids.shape} inconsistent with "
                f"m={self.m}, bits={self.bits}"
            )
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite entries")
        R = self.rotation.astype(np.float64)
        if not np.allclose(R.T @ R, np.eye(R.shape[0]), atol=1e-4):
            raise ValueError("rotation is not orthonormal within 1e-4")

    @property
    def dim(self) -> int:
        return self.m * self.centroids.shape[2]

    @property
    def subdim(self) -> int:
        return self.centroids.shape[2]


@dataclass
class PQIndex:
    codebooks: PQCodebooks
    codes: np.ndarray  # (num_docs, m) uint8

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        if self.codes.ndim != 2 or self.codes.shape[1] != self.codebooks.m:
            raise ValueError(f"codes shape {self.codes.shape} inconsistent with m")
        if self.codes.size and int(self.codes.max()) >= 2**self.codebooks.bits:
            raise ValueError("code value out of range for bits")
        self.codes.flags.writeable = False

    @property
    def num_docs(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codebooks.dim


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = data[first]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = data[idx]
        d2 = np.minimum(d2, ((data - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _assign(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin of squared distance; the -2*x.c + c^2 form avoids the constant
    # x^2 term. Ties resolve to the lowest centroid id via argmin.
    d = -2.0 * (data @ centroids.T) + (centroids**2).sum(axis=1)
    return np.argmin(d, axis=1)


def _lloyd(
    data: np.ndarray, centroids: np.ndarray, iters: int, rng: np.random.Generator
) -> np.ndarray:
    k = centroids.shape[0]
    for _ in range(iters):
        labels = _assign(data, centroids)
        new = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        np.add.at(new, labels, data)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            # Reseed each empty cluster to the point farthest from its
            # currently assigned centroid (deterministic argmax).
            dist = ((data - new[labels]) ** 2).sum(axis=1)
            for j in np.nonzero(~nonempty)[0]:
                far = int(np.argmax(dist))
                new[j] = data[far]
                dist[far] = -1.0
        centroids = new
    return centroids


def train_pq(
    embeddings: DocEmbeddingMatrix | np.ndarray,
    m: int,
    bits: int = 8,
    opq_iters: int = 0,
    kmeans_iters: int = 25,
    seed: int = 0,
) -> PQCodebooks:
    """Learn PQ codebooks, optionally with an orthonormal rotation.

    With ``opq_iters == 0`` the rotation is exactly the identity and each
    subspace is quantized independently with k-means (k-means++ init, Lloyd
    iterations, empty clusters reseeded to the farthest point). With
    ``opq_iters > 0`` the procedure alternates (a) per-subspace k-means on the
    rotated data (warm-started after the first round) and (b) a rotation
    update by orthogonal Procrustes from the SVD of the cross-covariance of
    reconstructions and data, finishing with one more codebook fit so the
    codebooks match the final rotation.
    """
    X = _as_rows(embeddings)
    n, dim = X.shape
    if m < 1 or dim % m != 0:
        raise ValueError(f"m={m} must divide the embedding dim {dim}")
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    k = 2**bits
    if k > n:
        log.warning("2^bits = %d exceeds the corpus size %d; clusters will repeat", k, n)
    rng = np.random.default_rng(seed)
    sub = dim // m
    R = np.eye(dim)

    def fit_codebooks(Y: np.ndarray, warm: np.ndarray | None) -> np.ndarray:
        cents = np.empty((m, k, sub), dtype=np.float64)
        for s in range(m):
            block = Y[:, s * sub : (s + 1) * sub]
            init = warm[s] if warm is not None else _kmeans_pp_init(block, k, rng)
            cents[s] = _lloyd(block, init, kmeans_iters, rng)
        return cents

    def reconstruct(Y: np.ndarray, cents: np.ndarray) -> np.ndarray:
        out = np.empty_like(Y)
        for s in range(m):
            block = Y[:, s * sub : (s + 1) * sub]
            codes = _assign(block, cents[s])
            out[:, s * sub : (s + 1) * sub] = cents[s][codes]
        return out

    centroids = fit_codebooks(X @ R.T, None)
    for _ in range(opq_iters):
        Y = X @ R.T
        recon = reconstruct(Y, centroids)
        # Procrustes: maximize trace(R^T recon^T X) subject to R orthonormal.
        U, _, Vt = np.linalg.svd(recon.T @ X)
        R = U @ Vt
        centroids = fit_codebooks(X @ R.T, centroids)

    return PQCodebooks(
        m=m,
        bits=bits,
        centroids=centroids.astype(np.float32),
        rotation=R.astype(np.float32),
    )


def pq_encode(codebooks: PQCodebooks, embeddings: DocEmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Assign each vector to its nearest centroid per subspace (ties: lowest id)."""
    X = _as_rows(embeddings)
    if X.shape[1] != codebooks.dim:
        raise ValueError(f"vector dim {X.shape[1]} != codebook dim {codebooks.dim}")
    R = codebooks.rotation.astype(np.float64)
    Y = X @ R.T
    sub = codebooks.subdim
    codes = np.empty((X.shape[0], codebooks.m), dtype=np.uint8)
    for s in range(codebooks.m):
        block = Y[:, s * sub : (s + 1) * sub]
        codes[:, s] = _assign(block, codebooks.centroids[s].astype(np.float64))
    return codes


def pq_reconstruct(codebooks: PQCodebooks, codes: np.ndarray) -> np.ndarray:
    """Decode codes back to vectors in the original (unrotated) space."""
    sub = codebooks.subdim
    n = codes.shape[0]
    Y = np.empty((n, codebooks.dim), dtype=np.float64)
    for s in range(codebooks.m):
        Y[:, s * sub : (s + 1) * sub] = codebooks.centroids[s].astype(np.float64)[codes[:, s]]
    R = codebooks.rotation.astype(np.float64)
    return Y @ R


def build_pq_index(
    codebooks: PQCodebooks, embeddings: DocEmbeddingMatrix | np.ndarray
) -> PQIndex:
    return PQIndex(codebooks=codebooks, codes=pq_encode(codebooks, embeddings))


def pq_search(
    index: PQIndex, queries: np.ndarray, n: int, threads: int = 1
) -> list[SearchResult]:
    """Asymmetric PQ search over the single exhaustive list.

    The query is rotated once; each subspace contributes a 2^bits lookup table
    of inner products, and a document's score is the float64 sum of its m
    table entries. Equivalent (to float rounding) to the inner product against
    the reconstructed document vectors.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != index.dim:
        raise ValueError(f"query dim {Q.shape[1]} does not match index dim {index.dim}")
    cb = index.codebooks
    R = cb.rotation.astype(np.float64)
    cents = cb.centroids.astype(np.float64)
    sub = cb.subdim
    codes = index.codes

    def run_chunk(chunk: np.ndarray) -> list[SearchResult]:
        out = []
        for q in chunk:
            y = R @ q
            scores = np.zeros(index.num_docs)
            for s in range(cb.m):
                table = cents[s] @ y[s * sub : (s + 1) * sub]
                scores += table[codes[:, s]]
            top = topn_indices(scores, n)
            out.append(SearchResult(ordinals=top, scores=scores[top]))
        return out

    return _run_chunked(run_chunk, Q, threads)


def search(index: FlatIndex | PQIndex, queries: np.ndarray, n: int, threads: int = 1):
    """Dispatch to the right search for the index type."""
    if isinstance(index, FlatIndex):
        return flat_search(index, queries, n, threads)
    if isinstance(index, PQIndex):
        return pq_search(index, queries, n, threads)
    raise TypeError(f"unsupported index type {type(index).__name__}")


# ---------------------------------------------------------------------------
# Binary formats
# ---------------------------------------------------------------------------


def save_embeddings(matrix: DocEmbeddingMatrix, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(
            struct.pack("<4sIQI", _EMB_MAGIC, _FORMAT_VERSION, matrix.num_docs, matrix.dim)
        )
        f.write(np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, doc_ids: list[str] | None = None) -> DocEmbeddingMatrix:
    """Load an embedding file; doc_ids default to the row ordinals as strings."""
    data = Path(path).read_bytes()
    header = struct.calcsize("<4sIQI")
    if len(data) < header:
        raise ValueError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, count, dim = struct.unpack_from("<4sIQI", data)
    if magic != _EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_EMB_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = header + 4 * count * dim
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    rows = np.frombuffer(data, dtype="<f4", offset=header).reshape(count, dim)
    if doc_ids is None:
        doc_ids = [str(i) for i in range(count)]
    return DocEmbeddingMatrix(rows=rows.astype(np.float64), doc_ids=doc_ids)


def save_pq_index(index: PQIndex, path: str | Path) -> None:
    cb = index.codebooks
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                "<4sIQIII",
                _PQ_MAGIC,
                _FORMAT_VERSION,
                index.num_docs,
                cb.dim,
                cb.m,
                cb.bits,
            )
        )
        f.write(np.ascontiguousarray(cb.rotation, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())


def load_pq_index(path: str | Path) -> PQIndex:
    data = Path(path).read_bytes()
    header = struct.calcsize("<4sIQIII")
    if len(data) < header:
        raise ValueError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, count, dim, m, bits = struct.unpack_from("<4sIQIII", data)
    if magic != _PQ_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_PQ_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    sub = dim // m
    rot_n = dim * dim
    cent_n = m * (2**bits) * sub
    expected = header + 4 * (rot_n + cent_n) + count * m
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    off = header
    rotation = np.frombuffer(data, dtype="<f4", count=rot_n, offset=off).reshape(dim, dim)
    off += 4 * rot_n
    centroids = np.frombuffer(data, dtype="<f4", count=cent_n, offset=off).reshape(
        m, 2**bits, sub
    )
    off += 4 * cent_n
    codes = np.frombuffer(data, dtype=np.uint8, count=count * m, offset=off).reshape(count, m)
    cb = PQCodebooks(m=m, bits=bits, centroids=centroids.copy(), rotation=rotation.copy())
    return PQIndex(codebooks=cb, codes=codes.copy())
