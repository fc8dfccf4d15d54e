"""Command-line surface: analyze, forge, score and bench.

The analyze pipeline follows the detection architecture: estimate the step
tensor, estimate the cluster count from the eigengap (sigma 0.6), and only
when more than one cluster is found rebuild the graph at the count-appropriate
scale, cluster, refine, and decide from the refined count.  Exit codes encode
the forensic decision: 0 pristine, 1 tampered, 2 generic error, 3 backend
resolution failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import forge as forge_mod
from .clustering import (
    SIGMA_K2,
    SIGMA_K34,
    build_graph,
    estimate_k,
    kmeans_cluster,
    save_map,
    spectral_cluster,
)
from .estimation import ClassicalBackend, ExternalBackend, OracleBackend, estimate_tensor
from .jpeg import LumaImage, load_luma, load_quant_matrix, quality_to_matrix
from .metrics import PRISTINE, TAMPERED, GroundTruth, aggregate, detect, mcc, nmi
from .refine import RefineConfig, StructuringElement, refine

EXIT_PRISTINE = 0
EXIT_TAMPERED = 1
EXIT_ERROR = 2
EXIT_BACKEND = 3


class BackendResolutionError(RuntimeError):
    """The requested estimator backend cannot be constructed."""


@dataclass
class PipelineOptions:
    sigma2: float = SIGMA_K2
    # None = auto: 0.15 on raw step vectors, sigma2 when feature scaling is on
    # (scaled feature space has unit-scale geometry at every k)
    sigma34: float | None = None
    k_override: int | None = None
    erosion_iters: int = 2
    element_radius: int = 1
    seed: int = 0
    subsample: int = 1
    clusterer: str = "spectral"  # or "kmeans" (ablation baseline)
    refine_enabled: bool = True
    # None = auto: on for the classical backend, whose estimates deviate by
    # whole steps, off for oracle/external tensors
    feature_scaling: bool | None = None


@dataclass
class AnalysisReport:
    decision: str
    k_hat: int
    k_r: int
    map_path: str | None
    metrics: dict | None
    timing: dict
    cluster: dict = field(default_factory=dict)
    refinement: dict | None = None

    def to_json(self) -> dict:
        return {
            "decision": self.decision,
            "k_hat": self.k_hat,
            "k_r": self.k_r,
            "map_path": self.map_path,
            "metrics": self.metrics,
            "timing": self.timing,
            "cluster": self.cluster,
            "refinement": self.refinement,
        }


def run_pipeline(img: LumaImage, backend, opts: PipelineOptions | None = None):
    """Full detection/localization/attribution pass over one image.

    Returns (AnalysisReport, refined ClusterMap or None).  No clustering work
    happens when the estimated count is one; those stage timings stay at zero.
    """
    opts = opts or PipelineOptions()
    scaling = opts.feature_scaling
    if scaling is None:
        scaling = isinstance(backend, ClassicalBackend)
    sigma34 = opts.sigma34
    if sigma34 is None:
        sigma34 = opts.sigma2 if scaling else SIGMA_K34
    timing = {"estimate": 0.0, "count": 0.0, "cluster": 0.0, "refine": 0.0}

    t0 = time.perf_counter()
    tensor = estimate_tensor(img, backend)
    timing["estimate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    graph = build_graph(tensor, sigma=opts.sigma2, subsample=opts.subsample,
                        feature_scaling=scaling)
    k_hat, gap_report = estimate_k(graph, override=opts.k_override)
    timing["count"] = time.perf_counter() - t0

    cluster_info = {
        "k_hat": k_hat,
        "eigenvalues": gap_report.eigenvalues,
        "gaps": gap_report.gaps,
        "sigma": opts.sigma2,
        "seed": opts.seed,
    }

    if k_hat == 1:
        report = AnalysisReport(
            decision=PRISTINE, k_hat=1, k_r=1, map_path=None, metrics=None,
            timing=timing, cluster=cluster_info,
        )
        return report, None

    t0 = time.perf_counter()
    sigma = opts.sigma2 if k_hat == 2 else sigma34
    if sigma != opts.sigma2:
        graph = build_graph(tensor, sigma=sigma, subsample=opts.subsample,
                            feature_scaling=scaling)
    cluster_info["sigma"] = sigma
    if opts.clusterer == "kmeans":
        prelim = kmeans_cluster(graph, k_hat, seed=opts.seed)
    else:
        prelim = spectral_cluster(graph, k_hat, seed=opts.seed)
    timing["cluster"] = time.perf_counter() - t0

    if opts.refine_enabled:
        t0 = time.perf_counter()
        cfg = RefineConfig(
            erosion_iters=opts.erosion_iters,
            element=StructuringElement(radius=opts.element_radius),
            rng_seed=opts.seed + 1,
        )
        refined, k_r = refine(prelim, cfg)
        timing["refine"] = time.perf_counter() - t0
        refinement = {
            "k_r": k_r,
            "deleted_clusters": refined.deleted_clusters,
            "rounds": refined.rounds,
            "provenance": refined.provenance,
        }
    else:
        refined, k_r = prelim, int(len(np.unique(prelim.labels)))
        refinement = None

    decision = detect(k_r)
    report = AnalysisReport(
        decision=decision, k_hat=k_hat, k_r=k_r, map_path=None, metrics=None,
        timing=timing, cluster=cluster_info, refinement=refinement,
    )
    return report, (refined if decision == TAMPERED else None)


def _resolve_backend(args, image_path: Path):
    if args.backend == "oracle":
        stem = image_path.with_suffix("")
        gt_path = Path(args.gt) if args.gt else Path(str(stem) + ".gt.png")
        recipe_path = Path(args.recipe) if args.recipe else Path(str(stem) + ".recipe.json")
        if not gt_path.exists() or not recipe_path.exists():
            raise BackendResolutionError(
                f"oracle backend needs {gt_path} and {recipe_path}"
            )
        return OracleBackend(gt=forge_mod.load_ground_truth(gt_path, recipe_path))
    if args.backend == "classical":
        if args.q2_matrix:
            q2 = load_quant_matrix(args.q2_matrix)
        elif args.qf2 is not None:
            q2 = quality_to_matrix(args.qf2)
        else:
            raise BackendResolutionError(
                "classical backend needs --qf2 or --q2-matrix"
            )
        return ClassicalBackend(q2=q2, qmax=args.qmax)
    if args.backend == "external":
        if not args.tensor:
            raise BackendResolutionError("external backend needs --tensor <path>")
        if not Path(args.tensor).exists():
            raise BackendResolutionError(f"tensor file not found: {args.tensor}")
        return ExternalBackend(path=args.tensor)
    raise BackendResolutionError(f"unknown backend {args.backend!r}")


def _load_gt_if_any(image_path: Path, args) -> GroundTruth | None:
    stem = image_path.with_suffix("")
    gt_path = Path(args.gt) if args.gt else Path(str(stem) + ".gt.png")
    recipe_path = Path(args.recipe) if args.recipe else Path(str(stem) + ".recipe.json")
    if gt_path.exists() and recipe_path.exists():
        return forge_mod.load_ground_truth(gt_path, recipe_path)
    return None


def _options_from_args(args) -> PipelineOptions:
    return PipelineOptions(
        sigma2=args.sigma2,
        sigma34=args.sigma34,
        k_override=args.k_override,
        erosion_iters=args.erosion_iters,
        seed=args.seed,
        subsample=args.subsample,
        clusterer=args.clusterer,
        feature_scaling=args.feature_scaling,
    )


def analyze_image(image_path, args, out_dir: Path) -> tuple[AnalysisReport, int]:
    """Analyze one image; writes report JSON and, when tampered, the map PNG."""
    image_path = Path(image_path)
    img = load_luma(image_path)
    backend = _resolve_backend(args, image_path)
    report, refined = run_pipeline(img, backend, _options_from_args(args))

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    if refined is not None:
        map_path = out_dir / f"{stem}.map.png"
        save_map(refined, map_path)
        report.map_path = map_path.name
        map_meta = dict(report.cluster)
        map_meta.update(report.refinement or {})
        (out_dir / f"{stem}.map.json").write_text(
            json.dumps(map_meta, indent=1, sort_keys=True)
        )

    gt = _load_gt_if_any(image_path, args)
    if gt is not None:
        pred = refined.labels if refined is not None else np.zeros_like(gt.labels)
        report.metrics = {
            "mcc": mcc(gt, pred),
            "nmi": nmi(gt, pred),
            "k_true": gt.k,
            "k_hat": report.k_hat,
            "k_r": report.k_r,
            "decision": report.decision,
        }

    report_path = out_dir / f"{stem}.report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    code = EXIT_TAMPERED if report.decision == TAMPERED else EXIT_PRISTINE
    return report, code


def _analyze_job(payload):
    image_path, args, out = payload
    try:
        report, code = analyze_image(image_path, args, Path(out))
        line = f"{image_path}: {report.decision} (k_hat={report.k_hat}, k_r={report.k_r})"
        return code, line, None
    except BackendResolutionError as exc:
        return EXIT_BACKEND, None, f"{image_path}: backend resolution failed: {exc}"
    except Exception as exc:
        return EXIT_ERROR, None, f"{image_path}: {type(exc).__name__}: {exc}"


def cmd_analyze(args) -> int:
    payloads = [(p, args, args.out) for p in args.images]
    if args.jobs > 1 and len(payloads) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_analyze_job, payloads))
    else:
        results = [_analyze_job(p) for p in payloads]
    worst = EXIT_PRISTINE
    for code, line, error in results:
        if error is not None:
            print(error, file=sys.stderr)
            return code
        print(line)
        worst = max(worst, code)
    return worst


def cmd_forge(args) -> int:
    rows = forge_mod.forge_batch(args.manifest, args.out, jobs=args.jobs)
    errors = [r for r in rows if r["status"] != "ok"]
    print(f"forged {len(rows) - len(errors)}/{len(rows)} samples into {args.out}")
    for r in errors:
        print(f"  {r['id']}: {r['error']}", file=sys.stderr)
    return EXIT_PRISTINE if not errors else EXIT_ERROR


def cmd_score(args) -> int:
    results_dir = Path(args.results)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for report_path in sorted(results_dir.glob("*.report.json")):
        payload = json.loads(report_path.read_text())
        m = payload.get("metrics") or {}
        rows.append({
            "id": report_path.name[: -len(".report.json")],
            "k_true": m.get("k_true", ""),
            "k_hat": payload["k_hat"],
            "k_r": payload["k_r"],
            "decision": payload["decision"],
            "mcc": m.get("mcc", ""),
            "nmi": m.get("nmi", ""),
        })
    if not rows:
        print(f"no reports found in {results_dir}", file=sys.stderr)
        return EXIT_ERROR
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    scored = [r for r in rows if r["k_true"] != ""]
    summary: dict = {"images": len(rows), "with_ground_truth": len(scored)}
    if scored:
        summary.update(aggregate((r["k_true"], r["decision"]) for r in scored))
        tp = [r for r in scored if r["k_true"] > 1 and r["decision"] == TAMPERED]
        pool = scored if args.mcc_all else tp
        loc = [r for r in pool if r["k_true"] > 1]
        if loc:
            summary["mean_mcc"] = float(np.mean([r["mcc"] for r in loc]))
            summary["mean_nmi"] = float(np.mean([r["nmi"] for r in loc]))
        summary["mcc_convention"] = "all" if args.mcc_all else "tp_only"
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_PRISTINE


def _bench_analyze(sample: forge_mod.ForgedSample, backend_name: str, opts: PipelineOptions,
                   qf2: int):
    if backend_name == "oracle":
        backend = OracleBackend(gt=sample.gt)
    elif backend_name == "classical":
        backend = ClassicalBackend(q2=quality_to_matrix(qf2))
    else:
        raise ValueError(f"bench supports oracle and classical backends, not {backend_name}")
    report, refined = run_pipeline(sample.image, backend, opts)
    pred = refined.labels if refined is not None else np.zeros_like(sample.gt.labels)
    return report, refined, mcc(sample.gt, pred), nmi(sample.gt, pred)


def _bench_cell(args, k: int, type_: str, qf_bg, qf_donors, seeds, opts,
                out_dir: Path | None = None, tag: str = "") -> dict:
    """Forge and analyze `len(seeds)` samples of one table cell."""
    size = (args.image_size, args.image_size)
    # multi-donor cells need room for k-1 disjoint boxes
    cap = args.image_size - 64 if k <= 2 else args.image_size // 2 - 8
    fitting = tuple(s for s in forge_mod.BOX_SIZES if s <= cap) or (64,)
    records = []
    for seed in seeds:
        recipe = forge_mod.sample_recipe(
            seed, k=k, type=type_, image_size=size, qf2=args.qf2, box_sizes=fitting
        )
        if qf_bg is not None:
            recipe.qf_background = qf_bg
        if qf_donors is not None:
            recipe.qf_donors = list(qf_donors)
        src = forge_mod.make_texture(seed * 7 + 1, size)
        donors = [forge_mod.make_texture(seed * 7 + 2 + i, size) for i in range(k - 1)]
        sample = forge_mod.forge(src, donors, recipe)
        report, refined, sample_mcc, sample_nmi = _bench_analyze(
            sample, args.backend, opts, args.qf2
        )
        if out_dir is not None and refined is not None:
            maps_dir = out_dir / "maps"
            maps_dir.mkdir(exist_ok=True)
            save_map(refined, maps_dir / f"{tag}_{seed}.map.png")
        records.append({
            "k": k, "k_hat": report.k_hat, "k_r": report.k_r,
            "decision": report.decision, "mcc": sample_mcc, "nmi": sample_nmi,
        })
    tp = [r for r in records if r["decision"] == TAMPERED] if k > 1 else []
    return {
        "records": records,
        "tp": len(tp),
        "mcc": float(np.mean([r["mcc"] for r in tp])) if tp else float("nan"),
        "nmi": float(np.mean([r["nmi"] for r in tp])) if tp else float("nan"),
    }


def _write_matrix_csv(path, row_name, col_name, row_vals, col_vals, cells) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{row_name}\\{col_name}"] + [str(c) for c in col_vals])
        for r in row_vals:
            writer.writerow([str(r)] + [cells.get((r, c), "") for c in col_vals])


def cmd_bench(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.qf2 is None:
        args.qf2 = 90
    opts = PipelineOptions(seed=args.seed, sigma2=args.sigma2, sigma34=args.sigma34,
                           erosion_iters=args.erosion_iters)
    n = args.samples
    base = args.seed * 1_000_003

    if args.suite == "kconf":
        counts = np.zeros((4, 4), dtype=int)
        for k in (1, 2, 3, 4):
            for i in range(n):
                type_ = "I" if (i % 2 == 0) else "II"
                cell = _bench_cell(args, k, type_, None, None, [base + k * 1000 + i],
                                   opts, out_dir, f"kconf_k{k}")
                k_r = min(cell["records"][0]["k_r"], 4)
                counts[k - 1, k_r - 1] += 1
        cells = {
            (k, kr): f"{counts[k - 1, kr - 1] / n:.2f}"
            for k in (1, 2, 3, 4) for kr in (1, 2, 3, 4)
        }
        _write_matrix_csv(out_dir / "kconf.csv", "k", "k_r", [1, 2, 3, 4], [1, 2, 3, 4], cells)

    elif args.suite in ("loc_k2", "loc_k3", "loc_k4"):
        donors_pool = [65, 75, 85, 95, 98]
        if args.suite == "loc_k2":
            rows, cols = [75, 85, 95, 98], donors_pool
            mcc_cells, nmi_cells = {}, {}
            for qf1 in rows:
                for qf12 in cols:
                    if qf12 == qf1:
                        continue
                    cell = _bench_cell(
                        args, 2, args.type, qf1, [qf12],
                        [base + qf1 * 17 + qf12 * 3 + i for i in range(n)], opts,
                        out_dir, f"k2_{qf1}_{qf12}",
                    )
                    mcc_cells[(qf1, qf12)] = f"{cell['mcc']:.3f}({cell['tp']})"
                    nmi_cells[(qf1, qf12)] = f"{cell['nmi']:.3f}({cell['tp']})"
            _write_matrix_csv(out_dir / "loc_k2_mcc.csv", "QF1", "QF12", rows, cols, mcc_cells)
            _write_matrix_csv(out_dir / "loc_k2_nmi.csv", "QF1", "QF12", rows, cols, nmi_cells)
        else:
            k = 3 if args.suite == "loc_k3" else 4
            qf1 = 85
            pool = [q for q in donors_pool if q != qf1]
            mcc_cells, nmi_cells = {}, {}
            for qa in pool:
                for qb in pool:
                    if qb == qa:
                        continue
                    donors = [qa, qb] if k == 3 else [60, qa, qb]
                    if len(set(donors + [qf1])) != len(donors) + 1:
                        continue
                    cell = _bench_cell(
                        args, k, args.type, qf1, donors,
                        [base + qa * 31 + qb * 7 + i for i in range(n)], opts,
                        out_dir, f"k{k}_{qa}_{qb}",
                    )
                    mcc_cells[(qa, qb)] = f"{cell['mcc']:.3f}({cell['tp']})"
                    nmi_cells[(qa, qb)] = f"{cell['nmi']:.3f}({cell['tp']})"
            _write_matrix_csv(out_dir / f"{args.suite}_mcc.csv", "QFa", "QFb", pool, pool, mcc_cells)
            _write_matrix_csv(out_dir / f"{args.suite}_nmi.csv", "QFa", "QFb", pool, pool, nmi_cells)

    elif args.suite == "ablation":
        variants = [
            ("kmeans", PipelineOptions(seed=args.seed, clusterer="kmeans", refine_enabled=False)),
            ("sc", PipelineOptions(seed=args.seed, refine_enabled=False)),
            ("sc_refine", PipelineOptions(seed=args.seed)),
        ]
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "type", "mcc", "nmi", "tp", "n"])
            for name, vopts in variants:
                for type_ in ("I", "II"):
                    mccs, nmis, tp = [], [], 0
                    for i in range(n):
                        k = 2 + (i % 3)
                        cell = _bench_cell(args, k, type_, None, None,
                                           [base + i + (7000 if type_ == "II" else 0)],
                                           vopts, out_dir, f"abl_{name}_{type_}")
                        rec = cell["records"][0]
                        if rec["decision"] == TAMPERED:
                            tp += 1
                            mccs.append(rec["mcc"])
                            nmis.append(rec["nmi"])
                    writer.writerow([
                        name, type_,
                        f"{np.mean(mccs):.3f}" if mccs else "nan",
                        f"{np.mean(nmis):.3f}" if nmis else "nan",
                        tp, n,
                    ])
    else:
        print(f"unknown suite {args.suite!r}", file=sys.stderr)
        return EXIT_ERROR
    print(f"bench suite {args.suite} written to {out_dir}")
    return EXIT_PRISTINE


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["oracle", "classical", "external"],
                   default="oracle")
    p.add_argument("--tensor", help="tensor file for the external backend")
    p.add_argument("--qf2", type=int, help="final-compression quality for the classical backend")
    p.add_argument("--q2-matrix", help="JSON file with the final quantization matrix")
    p.add_argument("--qmax", type=int, default=20, help="largest candidate step")
    p.add_argument("--gt", help="ground-truth map PNG (defaults to <image>.gt.png)")
    p.add_argument("--recipe", help="recipe JSON (defaults to <image>.recipe.json)")
    p.add_argument("--sigma2", type=float, default=SIGMA_K2,
                   help="kernel scale for counting and k=2 clustering")
    p.add_argument("--sigma34", type=float, default=None,
                   help="kernel scale for k=3,4 clustering (default 0.15, or "
                        "--sigma2 when feature scaling is on)")
    p.add_argument("--k-override", type=int, default=None,
                   help="externally supplied cluster count (skips the eigengap)")
    p.add_argument("--erosion-iters", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--subsample", type=int, default=1)
    p.add_argument("--clusterer", choices=["spectral", "kmeans"], default="spectral")
    p.add_argument("--feature-scaling", action=argparse.BooleanOptionalAction, default=None,
                   help="scale each frequency by its std before the kernel "
                        "(default: on for the classical backend)")
    p.add_argument("--out", default="qsplice-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsplice",
                                     description="double-JPEG splicing forensics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="detect, localize and attribute splicing")
    p.add_argument("images", nargs="+")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("forge", help="synthesize ground-truthed fixtures")
    p.add_argument("manifest")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("score", help="aggregate metrics over analyze reports")
    p.add_argument("results")
    p.add_argument("--mcc-all", action="store_true",
                   help="average MCC over all tampered images, not only true positives")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="desk-scale evaluation tables")
    p.add_argument("suite", choices=["kconf", "loc_k2", "loc_k3", "loc_k4", "ablation"])
    p.add_argument("--samples", type=int, default=4, help="samples per table cell")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--type", choices=["I", "II"], default="II",
                   help="compression type for the localization suites")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
