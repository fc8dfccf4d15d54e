"""Similarity graph, cluster-count estimation and spectral clustering.

Blocks are nodes; edge weights come from a Gaussian kernel on the estimated
quantization step vectors.  The number of clusters is read off the eigengap
of the normalized symmetric Laplacian (with an override hook standing in for
an externally trained count estimator), and the preliminary tampering map is
produced by k-means in the spectral embedding, with the largest cluster
labelled as background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from PIL import Image
from scipy.linalg import eigh
from scipy.spatial import cKDTree

from .estimation import Q1Tensor

K_MAX = 4
SIGMA_K2 = 0.6
SIGMA_K34 = 0.15
DENSE_LIMIT = 4096
KNN = 64
EIGEN_COUNT = 8

# label 0 black, donor labels saturated hues
MAP_PALETTE = [(0, 0, 0), (230, 40, 40), (40, 200, 60), (60, 90, 235)]


class EigensolverError(RuntimeError):
    """Eigensolver failed to converge within its iteration budget."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


@dataclass
class SimilarityGraph:
    n: int
    weights: object  # dense ndarray or scipy.sparse matrix
    sigma: float
    node_index: np.ndarray  # n x 2 block coordinates
    features: np.ndarray  # n x nc step vectors entering the kernel
    map_shape: tuple[int, int]
    dense: bool


@dataclass
class EigengapReport:
    eigenvalues: list[float]
    gaps: list[float]
    k_hat: int


@dataclass
class ClusterMap:
    """Block-resolution label field; 0 is the background cluster."""

    labels: np.ndarray
    k: int
    provenance: str = "preliminary"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)


def build_graph(t: Q1Tensor, sigma: float, subsample: int = 1,
                dense_limit: int = DENSE_LIMIT, knn: int = KNN,
                feature_scaling: bool = False) -> SimilarityGraph:
    """Gaussian-kernel similarity graph over the (optionally strided) blocks.

    Dense weights up to dense_limit nodes, symmetrized k-nearest-neighbour
    sparsification beyond.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if subsample < 1:
        raise ValueError(f"subsample stride must be >= 1, got {subsample}")
    grid = t.rounded().astype(np.float64)[::subsample, ::subsample]
    rows, cols = grid.shape[:2]
    feats = grid.reshape(rows * cols, t.nc)
    if feature_scaling:
        scale = feats.std(axis=0)
        scale[scale == 0] = 1.0
        feats = feats / scale
    ii, jj = np.meshgrid(
        np.arange(0, t.r_prime, subsample),
        np.arange(0, t.c_prime, subsample),
        indexing="ij",
    )
    node_index = np.stack([ii.ravel(), jj.ravel()], axis=1)
    n = feats.shape[0]

    if n <= dense_limit:
        gram = feats @ feats.T
        gram = (gram + gram.T) / 2.0
        sq = np.diag(gram)
        d2 = np.clip(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0, None)
        weights = np.exp(-d2 / (2.0 * sigma * sigma))
        np.fill_diagonal(weights, 1.0)
        dense = True
    else:
        tree = cKDTree(feats)
        dist, idx = tree.query(feats, k=min(knn + 1, n))
        w = np.exp(-(dist**2) / (2.0 * sigma * sigma))
        rows_ix = np.repeat(np.arange(n), idx.shape[1])
        weights = sp.csr_matrix((w.ravel(), (rows_ix, idx.ravel())), shape=(n, n))
        weights = weights.maximum(weights.T)
        weights.setdiag(1.0)
        dense = False

    return SimilarityGraph(
        n=n,
        weights=weights,
        sigma=float(sigma),
        node_index=node_index,
        features=feats,
        map_shape=(t.r_prime, t.c_prime),
        dense=dense,
    )


def _laplacian_spectrum(g: SimilarityGraph, count: int):
    """Smallest eigenpairs of the normalized symmetric Laplacian, ascending."""
    count = min(count, g.n)
    if g.dense:
        s = g.weights
        d = s.sum(axis=1)
        inv_sqrt = 1.0 / np.sqrt(d)
        lap = -(s * inv_sqrt[:, None]) * inv_sqrt[None, :]
        np.fill_diagonal(lap, lap.diagonal() + 1.0)
        lap = (lap + lap.T) / 2.0
        vals, vecs = eigh(lap, subset_by_index=[0, count - 1])
        return vals, vecs
    s = g.weights.tocsr()
    d = np.asarray(s.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    m = inv_sqrt @ s @ inv_sqrt
    # largest eigenvalues of D^-1/2 S D^-1/2 are the smallest of L = I - M;
    # Lanczos converges far better on the large end of the spectrum
    try:
        vals, vecs = spla.eigsh(m, k=count, which="LA")
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError(
            f"Lanczos did not converge for {g.n} nodes: {exc}",
            iterations=g.n * 10,
        ) from exc
    order = np.argsort(-vals)
    return 1.0 - vals[order], vecs[:, order]


def estimate_k(g: SimilarityGraph, k_max: int = K_MAX,
               override: int | None = None) -> tuple[int, EigengapReport]:
    """Cluster count from the largest Laplacian eigengap, or the override.

    The override is the hook for an externally trained count estimator; when
    present it is returned as-is with an empty report.
    """
    if k_max not in (2, 3, 4):
        raise ValueError(f"k_max must be 2, 3 or 4, got {k_max}")
    if override is not None:
        if not 1 <= override <= k_max:
            raise ValueError(f"override must lie in 1..{k_max}, got {override}")
        return override, EigengapReport(eigenvalues=[], gaps=[], k_hat=override)
    vals, _ = _laplacian_spectrum(g, EIGEN_COUNT)
    gaps = np.diff(vals)
    upto = min(k_max, len(gaps))
    k_hat = int(np.argmax(gaps[:upto])) + 1
    return k_hat, EigengapReport(
        eigenvalues=[float(v) for v in vals],
        gaps=[float(v) for v in gaps],
        k_hat=k_hat,
    )


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centers[i] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> np.ndarray:
    """Seeded k-means++ with restarts; returns labels of the best inertia run."""
    n = x.shape[0]
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = d2.argmin(axis=1)
            new_centers = np.empty_like(centers)
            for c in range(k):
                members = labels == c
                if members.any():
                    new_centers[c] = x[members].mean(axis=0)
                else:
                    # re-seed an empty cluster on the worst-fitted point
                    new_centers[c] = x[int(np.argmax(d2.min(axis=1)))]
            shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
            centers = new_centers
            if shift <= tol:
                break
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        inertia = d2[np.arange(n), labels].sum()
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def _canonical_labels(labels: np.ndarray, features: np.ndarray, k: int) -> np.ndarray:
    """Relabel so sizes are non-increasing; ties go to the lower mean DC step."""
    sizes = np.bincount(labels, minlength=k)
    mean_dc = np.full(k, np.inf)
    for c in range(k):
        members = labels == c
        if members.any():
            mean_dc[c] = features[members, 0].mean()
    order = sorted(range(k), key=lambda c: (-sizes[c], mean_dc[c], c))
    remap = np.empty(k, dtype=np.int64)
    for new, old in enumerate(order):
        remap[old] = new
    return remap[labels]


def spectral_cluster(g: SimilarityGraph, k: int, seed: int = 0) -> ClusterMap:
    """Cluster nodes in the spectral embedding and paint the block map.

    Rows of the k smallest eigenvectors are normalized to unit length, k-means
    groups them, labels are canonicalized by cluster size, and subsampled
    blocks inherit the label of their nearest retained node.
    """
    if not 1 <= k <= K_MAX:
        raise ValueError(f"k must lie in 1..{K_MAX}, got {k}")
    if k == 1:
        return ClusterMap(labels=np.zeros(g.map_shape, dtype=np.int64), k=1)
    if k > g.n:
        raise ValueError(f"k={k} exceeds node count {g.n}")
    _, vecs = _laplacian_spectrum(g, k)
    emb = vecs[:, :k].copy()
    norms = np.linalg.norm(emb, axis=1)
    nz = norms > 0
    emb[nz] /= norms[nz, None]
    rng = np.random.default_rng(seed)
    labels = kmeans(emb, k, rng)
    labels = _canonical_labels(labels, g.features, k)
    return ClusterMap(labels=_paint_map(g, labels), k=int(labels.max()) + 1)


def kmeans_cluster(g: SimilarityGraph, k: int, seed: int = 0) -> ClusterMap:
    """Ablation baseline: k-means directly on the step vectors."""
    if not 1 <= k <= K_MAX:
        raise ValueError(f"k must lie in 1..{K_MAX}, got {k}")
    if k == 1:
        return ClusterMap(labels=np.zeros(g.map_shape, dtype=np.int64), k=1)
    rng = np.random.default_rng(seed)
    labels = kmeans(g.features, k, rng)
    labels = _canonical_labels(labels, g.features, k)
    return ClusterMap(labels=_paint_map(g, labels), k=int(labels.max()) + 1)


def _paint_map(g: SimilarityGraph, labels: np.ndarray) -> np.ndarray:
    """Write node labels to the full block grid, filling skipped blocks."""
    out = np.zeros(g.map_shape, dtype=np.int64)
    out[g.node_index[:, 0], g.node_index[:, 1]] = labels
    if g.n < g.map_shape[0] * g.map_shape[1]:
        tree = cKDTree(g.node_index.astype(np.float64))
        ii, jj = np.meshgrid(
            np.arange(g.map_shape[0]), np.arange(g.map_shape[1]), indexing="ij"
        )
        all_blocks = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
        _, nearest = tree.query(all_blocks, k=1)
        out = labels[nearest].reshape(g.map_shape)
    return out


def save_map(m: ClusterMap, path) -> None:
    """Indexed-palette PNG at block resolution."""
    if m.labels.max(initial=0) >= len(MAP_PALETTE):
        raise ValueError(f"map has more labels than the palette: {m.labels.max()}")
    im = Image.fromarray(m.labels.astype(np.uint8), mode="P")
    palette = []
    for rgb in MAP_PALETTE:
        palette.extend(rgb)
    im.putpalette(palette)
    im.save(path, format="PNG")


def load_map(path, provenance: str = "preliminary") -> ClusterMap:
    with Image.open(path) as im:
        labels = np.asarray(im.convert("P" if im.mode == "P" else im.mode))
    labels = labels.astype(np.int64)
    return ClusterMap(labels=labels, k=len(np.unique(labels)), provenance=provenance)


