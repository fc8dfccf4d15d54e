"""Morphological reconstruction of the preliminary tampering map.

Each non-background cluster is eroded to a seed, then grown back by
conditional dilation: first inside its own original mask, then over any
remaining non-background pixels, with same-round contention resolved by a
seeded coin flip.  Clusters whose seeds vanish are deleted, so the refined
cluster count can only drop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterMap


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "disk"
    radius: int = 1

    def __post_init__(self):
        if self.shape != "disk":
            raise ValueError(f"only disk elements are supported, got {self.shape!r}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        r = self.radius
        return tuple(
            (dr, dc)
            for dr in range(-r, r + 1)
            for dc in range(-r, r + 1)
            if dr * dr + dc * dc <= r * r
        )


@dataclass
class RefineConfig:
    erosion_iters: int = 2
    element: StructuringElement = field(default_factory=StructuringElement)
    rng_seed: int = 0
    max_dilation_iters: int | None = None  # defaults to the block count

    def __post_init__(self):
        if self.erosion_iters < 0:
            raise ValueError("erosion_iters must be >= 0")


def _erode(mask: np.ndarray, offsets, radius: int) -> np.ndarray:
    rows, cols = mask.shape
    padded = np.zeros((rows + 2 * radius, cols + 2 * radius), dtype=bool)
    padded[radius:-radius, radius:-radius] = mask
    out = np.ones_like(mask)
    for dr, dc in offsets:
        out &= padded[radius + dr : radius + dr + rows, radius + dc : radius + dc + cols]
    return out


def _dilate(mask: np.ndarray, offsets, radius: int) -> np.ndarray:
    rows, cols = mask.shape
    padded = np.zeros((rows + 2 * radius, cols + 2 * radius), dtype=bool)
    padded[radius:-radius, radius:-radius] = mask
    out = np.zeros_like(mask)
    for dr, dc in offsets:
        out |= padded[radius + dr : radius + dr + rows, radius + dc : radius + dc + cols]
    return out


def count_labels(m: ClusterMap) -> int:
    """Number of distinct labels present, background included."""
    return int(len(np.unique(m.labels)))


def _canonicalize(labels: np.ndarray) -> np.ndarray:
    """Contiguous labels 0..k-1: background stays 0, clusters by size desc."""
    ids = [c for c in np.unique(labels) if c != 0]
    sizes = {c: int(np.sum(labels == c)) for c in ids}
    order = sorted(ids, key=lambda c: (-sizes[c], c))
    out = np.zeros_like(labels)
    for new, old in enumerate(order, start=1):
        out[labels == old] = new
    return out


def refine(m: ClusterMap, cfg: RefineConfig | None = None) -> tuple[ClusterMap, int]:
    """Erode every cluster to a seed, conditionally re-dilate, recount.

    Returns the refined map (canonical contiguous labels) and the surviving
    cluster count k_r; k_r == 1 means the map carries no foreground and the
    image should be treated as pristine.
    """
    if m.provenance != "preliminary":
        raise ValueError(f"refine expects a preliminary map, got {m.provenance!r}")
    cfg = cfg or RefineConfig()
    labels = m.labels
    offsets = cfg.element.offsets
    radius = cfg.element.radius
    cap = cfg.max_dilation_iters or labels.size
    rng = np.random.default_rng(cfg.rng_seed)

    cluster_ids = [int(c) for c in np.unique(labels) if c != 0]
    seeds = {}
    for c in cluster_ids:
        seed = labels == c
        for _ in range(cfg.erosion_iters):
            seed = _erode(seed, offsets, radius)
        seeds[c] = seed
    alive = [c for c in cluster_ids if seeds[c].any()]
    deleted = [c for c in cluster_ids if not seeds[c].any()]

    # -1 marks not-yet-assigned foreground territory
    assigned = np.where(labels == 0, 0, -1)
    regions = {}
    for c in alive:
        assigned[seeds[c]] = c
        regions[c] = seeds[c].copy()

    rounds = 0
    # phase (i): grow each seed inside its own original cluster mask; the
    # masks are disjoint so no contention can arise here
    growing = True
    while growing and rounds < cap:
        growing = False
        rounds += 1
        for c in alive:
            grow = _dilate(regions[c], offsets, radius) & (labels == c) & (assigned == -1)
            if grow.any():
                assigned[grow] = c
                regions[c] |= grow
                growing = True

    # phase (ii): keep growing over any unassigned non-background pixel;
    # phase (iii): same-round contention goes to a random claimant
    while rounds < cap:
        rounds += 1
        unassigned = assigned == -1
        if not unassigned.any():
            break
        claims = {}
        claim_count = np.zeros(labels.shape, dtype=np.int32)
        for c in alive:
            claim = _dilate(regions[c], offsets, radius) & unassigned
            claims[c] = claim
            claim_count += claim
        if not claim_count.any():
            break
        for c in alive:
            won = claims[c] & (claim_count == 1)
            if won.any():
                assigned[won] = c
                regions[c] |= won
        contested = np.argwhere(claim_count >= 2)
        for rr, cc in contested:
            claimants = [c for c in alive if claims[c][rr, cc]]
            winner = claimants[rng.integers(len(claimants))]
            assigned[rr, cc] = winner
            regions[winner][rr, cc] = True

    # unreachable non-background residue becomes background
    assigned[assigned == -1] = 0
    refined = _canonicalize(assigned)
    k_r = int(len(np.unique(refined)))
    out = ClusterMap(labels=refined, k=k_r, provenance="refined")
    out.deleted_clusters = sorted(deleted)
    out.rounds = rounds
    return out, k_r
