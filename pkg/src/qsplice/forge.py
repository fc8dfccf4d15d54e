"""Synthesis of ground-truthed double-JPEG tamper fixtures.

A sample is built by compressing a source once (the background), pasting in
regions cropped from independently compressed donors, and compressing the
composite a second time.  Every sample carries its full recipe, a
block-resolution ground-truth map, and the oracle step tensor that feeds the
oracle estimator backend.
"""

from __future__ import annotations

import csv
import json
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .jpeg import (
    GridShift,
    LumaImage,
    QuantMatrix,
    compress_once,
    quality_to_matrix,
    save_luma,
    load_luma,
)
from .estimation import DEFAULT_NC, Q1Tensor, write_tensor
from .metrics import GroundTruth
from .clustering import ClusterMap, save_map, load_map

QF_SET = (60, 65, 70, 75, 80, 85, 95, 98)
BACKGROUND_QF_SET = (75, 85, 95, 98)
BOX_SIZES = (64, 96, 128, 156)
DJPEG_VS_DJPEG = "djpeg_vs_djpeg"
DJPEG_VS_SJPEG = "djpeg_vs_sjpeg"

# zero-indexed offset of the block an estimation window reports to
CENTER_BLOCK = 3

SJPEG_MATRIX = QuantMatrix(steps=np.ones((8, 8), dtype=np.int64), label="SJPEG")


@dataclass
class Box:
    top: int
    left: int
    h: int
    w: int
    crop_top: int | None = None  # crop origin within the donor; defaults to the box
    crop_left: int | None = None

    @property
    def crop(self) -> tuple[int, int]:
        ct = self.top if self.crop_top is None else self.crop_top
        cl = self.left if self.crop_left is None else self.crop_left
        return ct, cl

    def overlaps(self, other: "Box") -> bool:
        return not (
            self.top + self.h <= other.top
            or other.top + other.h <= self.top
            or self.left + self.w <= other.left
            or other.left + other.w <= self.left
        )


@dataclass
class ForgeRecipe:
    k: int
    type: str  # "I" aligned background, "II" misaligned background
    qf_background: object  # quality factor or explicit QuantMatrix
    qf_donors: list = field(default_factory=list)
    qf2: object = 90
    boxes: list = field(default_factory=list)
    shift_background: GridShift = field(default_factory=GridShift)
    shift_donors: list = field(default_factory=list)
    seed: int = 0
    mode: str = DJPEG_VS_DJPEG

    def to_json(self) -> dict:
        def enc_qf(v):
            return v.to_json() if isinstance(v, QuantMatrix) else int(v)

        return {
            "k": self.k,
            "type": self.type,
            "qf_background": enc_qf(self.qf_background),
            "qf_donors": [enc_qf(v) for v in self.qf_donors],
            "qf2": enc_qf(self.qf2),
            "boxes": [asdict(b) for b in self.boxes],
            "shift_background": [self.shift_background.r, self.shift_background.c],
            "shift_donors": [[s.r, s.c] for s in self.shift_donors],
            "seed": self.seed,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForgeRecipe":
        def dec_qf(v):
            return QuantMatrix.from_json(v) if isinstance(v, dict) else int(v)

        return cls(
            k=obj["k"],
            type=obj["type"],
            qf_background=dec_qf(obj["qf_background"]),
            qf_donors=[dec_qf(v) for v in obj.get("qf_donors", [])],
            qf2=dec_qf(obj.get("qf2", 90)),
            boxes=[Box(**b) for b in obj.get("boxes", [])],
            shift_background=GridShift(*obj.get("shift_background", (0, 0))),
            shift_donors=[GridShift(r, c) for r, c in obj.get("shift_donors", [])],
            seed=obj.get("seed", 0),
            mode=obj.get("mode", DJPEG_VS_DJPEG),
        )


@dataclass
class ForgedSample:
    image: LumaImage
    gt: GroundTruth
    recipe: ForgeRecipe
    oracle_tensor: Q1Tensor


def _as_matrix(v) -> QuantMatrix:
    return v if isinstance(v, QuantMatrix) else quality_to_matrix(int(v))


def resolve_matrices(recipe: ForgeRecipe) -> tuple[QuantMatrix, list[QuantMatrix], QuantMatrix]:
    """First-compression matrices (background, donors) and the final matrix.

    In djpeg_vs_sjpeg mode the donors skip their first compression; their
    effective primary matrix is the all-ones (single-compression) table.
    """
    q_bg = _as_matrix(recipe.qf_background)
    if recipe.mode == DJPEG_VS_SJPEG:
        q_donors = [SJPEG_MATRIX] * (recipe.k - 1)
    else:
        q_donors = [_as_matrix(v) for v in recipe.qf_donors]
    return q_bg, q_donors, _as_matrix(recipe.qf2)


def validate_recipe(recipe: ForgeRecipe, image_shape: tuple[int, int]) -> None:
    if not 1 <= recipe.k <= 4:
        raise ValueError(f"k must lie in 1..4, got {recipe.k}")
    if recipe.type not in ("I", "II"):
        raise ValueError(f"compression type must be 'I' or 'II', got {recipe.type!r}")
    if recipe.mode not in (DJPEG_VS_DJPEG, DJPEG_VS_SJPEG):
        raise ValueError(f"unknown mode {recipe.mode!r}")
    n_fg = recipe.k - 1
    if len(recipe.qf_donors) != n_fg or len(recipe.boxes) != n_fg or len(recipe.shift_donors) != n_fg:
        raise ValueError(
            f"k={recipe.k} needs {n_fg} donors/boxes/shifts, got "
            f"{len(recipe.qf_donors)}/{len(recipe.boxes)}/{len(recipe.shift_donors)}"
        )
    if recipe.type == "I":
        if not recipe.shift_background.aligned:
            raise ValueError("Type I requires an aligned background shift")
        for i, s in enumerate(recipe.shift_donors):
            if s.aligned and recipe.mode == DJPEG_VS_DJPEG:
                raise ValueError(f"Type I requires a misaligned shift for region {i + 1}")
    else:
        if recipe.shift_background.aligned:
            raise ValueError("Type II requires a misaligned background shift")
    q_bg, q_donors, _ = resolve_matrices(recipe)
    vectors = [q_bg.zigzag().tobytes()] + [q.zigzag().tobytes() for q in q_donors]
    if len(set(vectors)) != len(vectors):
        raise ValueError("first-compression matrices must be pairwise distinct")
    rows, cols = image_shape
    for i, box in enumerate(recipe.boxes):
        if box.h <= 0 or box.w <= 0:
            raise ValueError(f"region {i + 1}: empty box")
        if box.top < 0 or box.left < 0 or box.top + box.h > rows or box.left + box.w > cols:
            raise ValueError(f"region {i + 1}: box exceeds the {rows}x{cols} image")
    for i, a in enumerate(recipe.boxes):
        for j, b in enumerate(recipe.boxes[i + 1 :], start=i + 1):
            if a.overlaps(b):
                raise ValueError(f"regions {i + 1} and {j + 1}: boxes overlap")


def _gt_labels(image_shape: tuple[int, int], boxes: list[Box]) -> np.ndarray:
    """Block labels over the interior grid, by block-center membership."""
    r_prime = image_shape[0] // 8 - 7
    c_prime = image_shape[1] // 8 - 7
    gi = np.arange(r_prime) + CENTER_BLOCK
    gj = np.arange(c_prime) + CENTER_BLOCK
    cy = gi * 8 + 3.5
    cx = gj * 8 + 3.5
    labels = np.zeros((r_prime, c_prime), dtype=np.int64)
    for idx, box in enumerate(boxes, start=1):
        in_rows = (cy >= box.top) & (cy < box.top + box.h)
        in_cols = (cx >= box.left) & (cx < box.left + box.w)
        labels[np.ix_(in_rows, in_cols)] = idx
    return labels


def forge(src: LumaImage, donors: list[LumaImage], recipe: ForgeRecipe,
          nc: int = DEFAULT_NC) -> ForgedSample:
    """Compose one tampered (or pristine, k=1) double-compressed sample."""
    validate_recipe(recipe, src.shape)
    if len(donors) != recipe.k - 1:
        raise ValueError(f"k={recipe.k} needs {recipe.k - 1} donor images, got {len(donors)}")
    q_bg, q_donors, q2 = resolve_matrices(recipe)

    composite = compress_once(src, q_bg, recipe.shift_background).pixels.copy()
    for i, box in enumerate(recipe.boxes):
        donor = donors[i]
        ct, cl = box.crop
        if ct + box.h > donor.shape[0] or cl + box.w > donor.shape[1]:
            raise ValueError(f"region {i + 1}: crop exceeds the donor image")
        if recipe.mode == DJPEG_VS_SJPEG:
            region = donor.pixels
        else:
            region = compress_once(donor, q_donors[i], recipe.shift_donors[i]).pixels
        composite[box.top : box.top + box.h, box.left : box.left + box.w] = region[
            ct : ct + box.h, cl : cl + box.w
        ]
    final = compress_once(LumaImage(composite), q2, GridShift(0, 0))

    labels = _gt_labels(src.shape, recipe.boxes)
    gt = GroundTruth(labels=labels, k=recipe.k, region_q1=[q_bg] + q_donors)
    prefixes = np.stack([q.prefix(nc).astype(np.float64) for q in gt.region_q1])
    tensor = Q1Tensor(data=prefixes[labels], source="oracle")
    return ForgedSample(image=final, gt=gt, recipe=recipe, oracle_tensor=tensor)


def sample_recipe(rng_seed: int, k: int, type: str, image_size: tuple[int, int] = (512, 512),
                  qf2: int = 90, mode: str = DJPEG_VS_DJPEG,
                  box_sizes: tuple[int, ...] = BOX_SIZES, margin: int = 0) -> ForgeRecipe:
    """Draw quality factors, boxes and shifts per the dataset protocol.

    `margin` keeps boxes away from the image border; the estimation window
    cannot report on the outermost blocks, so border-hugging boxes lose part
    of their footprint in the ground truth.
    """
    if not 1 <= k <= 4:
        raise ValueError(f"k must lie in 1..4, got {k}")
    rng = np.random.default_rng(rng_seed)
    if k == 1:
        qf_bg = int(rng.choice(QF_SET))
        donors = []
    else:
        qf_bg = int(rng.choice(BACKGROUND_QF_SET))
        pool = [q for q in QF_SET if q != qf_bg]
        donors = [int(q) for q in rng.choice(pool, size=k - 1, replace=False)]

    rows, cols = image_size
    fitting = [s for s in box_sizes if s <= min(rows, cols) - 2 * margin - 16]
    if k > 1 and not fitting:
        raise ValueError(f"no box size fits a {rows}x{cols} image")
    boxes: list[Box] = []
    for restart in range(500):
        boxes = []
        for _ in range(k - 1):
            for attempt in range(50):
                h = int(rng.choice(fitting))
                w = int(rng.choice(fitting))
                top = int(rng.integers(margin, rows - h - margin + 1))
                left = int(rng.integers(margin, cols - w - margin + 1))
                candidate = Box(top=top, left=left, h=h, w=w)
                if not any(candidate.overlaps(b) for b in boxes):
                    boxes.append(candidate)
                    break
            else:
                break  # an earlier box blocks everything: replace the whole set
        if len(boxes) == k - 1:
            break
    else:
        raise RuntimeError("could not place disjoint boxes")

    def misaligned() -> GridShift:
        while True:
            r, c = int(rng.integers(0, 8)), int(rng.integers(0, 8))
            if (r, c) != (0, 0):
                return GridShift(r, c)

    shift_bg = GridShift(0, 0) if type == "I" else misaligned()
    shift_donors = [misaligned() for _ in range(k - 1)]
    return ForgeRecipe(
        k=k,
        type=type,
        qf_background=qf_bg,
        qf_donors=donors,
        qf2=qf2,
        boxes=boxes,
        shift_background=shift_bg,
        shift_donors=shift_donors,
        seed=rng_seed,
        mode=mode,
    )


def make_texture(seed: int, shape: tuple[int, int] = (512, 512)) -> LumaImage:
    """Synthetic photographic stand-in: smooth field, fine detail, hard edges
    and a few gratings so every DCT band carries energy."""
    rng = np.random.default_rng(seed)
    smooth = ndimage.gaussian_filter(rng.normal(0, 55, shape), 5.0)
    detail = ndimage.gaussian_filter(rng.normal(0, 30, shape), 0.8)
    canvas = smooth + detail
    for _ in range(max(8, shape[0] * shape[1] // 1500)):
        h = int(rng.integers(4, 48))
        w = int(rng.integers(4, 48))
        top = int(rng.integers(0, shape[0] - h))
        left = int(rng.integers(0, shape[1] - w))
        canvas[top : top + h, left : left + w] += rng.uniform(-55, 55)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    for _ in range(3):
        fx, fy = rng.uniform(0.2, 1.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        canvas += rng.uniform(4, 12) * np.sin(fx * xx + fy * yy + phase)
    return LumaImage(np.clip(np.rint(canvas), -110, 110))


def save_sample(sample: ForgedSample, out_dir, stem: str) -> dict:
    """Write image, gt map, recipe and oracle tensor; returns the index row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = out_dir / f"{stem}.png"
    gt_path = out_dir / f"{stem}.gt.png"
    recipe_path = out_dir / f"{stem}.recipe.json"
    tensor_path = out_dir / f"{stem}.q1t"
    save_luma(sample.image, image_path)
    save_map(ClusterMap(labels=sample.gt.labels, k=sample.gt.k), gt_path)
    recipe_path.write_text(json.dumps(sample.recipe.to_json(), indent=1, sort_keys=True))
    write_tensor(sample.oracle_tensor, tensor_path)
    return {
        "id": stem,
        "status": "ok",
        "error": "",
        "k": sample.gt.k,
        "type": sample.recipe.type,
        "mode": sample.recipe.mode,
        "seed": sample.recipe.seed,
        "image": image_path.name,
        "gt": gt_path.name,
        "recipe": recipe_path.name,
        "tensor": tensor_path.name,
    }


def load_ground_truth(gt_path, recipe_path) -> GroundTruth:
    """Rebuild the GroundTruth of a saved sample from its gt map and recipe."""
    recipe = ForgeRecipe.from_json(json.loads(Path(recipe_path).read_text()))
    labels = load_map(gt_path).labels
    q_bg, q_donors, _ = resolve_matrices(recipe)
    return GroundTruth(labels=labels, k=recipe.k, region_q1=[q_bg] + q_donors)


INDEX_FIELDS = ["id", "status", "error", "k", "type", "mode", "seed",
                "image", "gt", "recipe", "tensor"]


def _forge_entry(entry: dict, out_dir: str) -> dict:
    stem = entry["id"]
    try:
        src = load_luma(entry["source"])
        recipe = ForgeRecipe.from_json(entry["recipe"])
        donor_paths = entry.get("donors") or [entry["source"]] * (recipe.k - 1)
        donors = [load_luma(p) for p in donor_paths]
        sample = forge(src, donors, recipe)
        return save_sample(sample, out_dir, stem)
    except Exception as exc:  # per-sample failures must not kill the batch
        return {"id": stem, "status": "error", "error": str(exc),
                **{k: "" for k in INDEX_FIELDS if k not in ("id", "status", "error")}}


def forge_batch(manifest_path, out_dir, jobs: int = 1) -> list[dict]:
    """Forge every manifest entry; write artifacts plus an index CSV.

    Manifest: JSON list of {id?, source, donors?, recipe | rule}.  A rule is
    {seed, k, type, ...} handed to sample_recipe.  Unreadable or invalid
    entries are recorded in the index and the batch continues.
    """
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = json.loads(manifest_path.read_text())
    jobs_list = []
    for i, raw in enumerate(entries):
        entry = dict(raw)
        entry.setdefault("id", f"sample_{i:05d}")
        if "recipe" not in entry:
            rule = dict(entry.get("rule", {}))
            rule.setdefault("rng_seed", rule.pop("seed", i))
            entry["recipe"] = sample_recipe(**rule).to_json()
        jobs_list.append(entry)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_forge_entry, jobs_list, [str(out_dir)] * len(jobs_list)))
    else:
        rows = [_forge_entry(e, str(out_dir)) for e in jobs_list]

    rows.sort(key=lambda r: r["id"])
    with open(out_dir / "index.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
