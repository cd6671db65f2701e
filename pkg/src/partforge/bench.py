"""Benchmark harness: functional, geometric, and style compatibility of
retrieved components plus placement error, with a random baseline.

Queries are built from test-split shapes whose raw components are grouped
by part label into semantic parts (majority label per raw component, by
surface area); shapes whose labeled parts cover less than 80% of the total
surface are skipped. One part is held out per query ("all_except_one"), or
the query is a single part ("single", used by the style metric).

Backends see geometry only: a query cloud and the pool of part clouds.
Labels never cross the backend interface; the harness scores privately.

Metric definitions (documented here because the choice matters):
- AP@5 is the mean of precision-at-rank over the ranks of correct hits,
  0 when nothing correct is retrieved. mAP averages AP over queries.
- Geometric compatibility uses the symmetric Hausdorff distance
  (max of both directions) between centered clouds, in the unit-radius
  frame.
- Style relevance is any overlap between the fine-grained label sets of
  the retrieved part's source shape and the query's source shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataset import Dataset, DatasetError, RawShape, stable_seed
from .geometry import (
    Frame,
    PointCloud,
    TriMesh,
    directional_hausdorff,
    normalize_shape,
    recenter,
    sample_surface,
)
from .losses import placement_error
from .networks import NetConfig, embed_batch, mixture_batch, place_batch
from .retrieval import _mode_responsibilities
from .trainer import TripletSampler, build_assembly_cloud


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# benchmark dataset: label-grouped semantic parts


@dataclass(eq=False)
class BenchPart:
    shape_id: str
    category: str
    label: str
    style_labels: frozenset[str]
    cloud_centered: np.ndarray  # (N, 3)
    centroid: np.ndarray  # (3,)
    surface_area: float


@dataclass(eq=False)
class BenchmarkQuery:
    category: str
    shape_id: str
    kind: str  # all_except_one | single
    x_parts: list[int]  # indices into the pool (this query's own parts)
    held_out: int | None  # pool index, None for kind=single queries
    query_part: int | None  # pool index of the single visible part
    x_cloud: np.ndarray  # (N, 3) object frame


@dataclass(eq=False)
class BenchmarkSet:
    category: str
    parts: list[BenchPart]  # the pool (all parts of all admitted test shapes)
    queries: list[BenchmarkQuery]
    skipped: dict[str, str]

    def allowed_pool(self, q: BenchmarkQuery) -> list[int]:
        """Pool indices a backend may retrieve: everything except X's parts."""
        banned = set(q.x_parts)
        if q.query_part is not None:
            banned.add(q.query_part)
        return [i for i in range(len(self.parts)) if i not in banned]


def group_semantic_parts(shape: RawShape, n_points: int, seed: int, min_coverage: float = 0.8):
    """Group raw components by part label into semantic parts.

    Returns (parts, coverage); parts is None when coverage < min_coverage
    or fewer than two labeled groups exist.
    """
    labeled: dict[str, list] = {}
    total_area = 0.0
    labeled_area = 0.0
    for comp in shape.components:
        area = comp.mesh.area()
        total_area += area
        if comp.part_label is not None:
            labeled_area += area
            labeled.setdefault(comp.part_label, []).append(comp.mesh)
    coverage = labeled_area / total_area if total_area > 0 else 0.0
    if coverage < min_coverage or len(labeled) < 2:
        return None, coverage
    norm = normalize_shape([PointCloud(c.mesh.vertices) for c in shape.components])
    parts = []
    for label in sorted(labeled):
        union = TriMesh.union([m.transformed(norm.center, norm.radius) for m in labeled[label]])
        cloud = sample_surface(union, n_points, stable_seed(seed, shape.shape_id, label, "bench"))
        centered, centroid = recenter(cloud)
        parts.append(
            BenchPart(
                shape_id=shape.shape_id,
                category=shape.category,
                label=label,
                style_labels=shape.fine_grained_labels,
                cloud_centered=centered.points,
                centroid=centroid,
                surface_area=union.area(),
            )
        )
    return parts, coverage


def build_benchmark(
    raw_shapes: list[RawShape],
    dataset: Dataset,
    category: str,
    kind: str = "all_except_one",
    split: str = "test",
    seed: int = 0,
    n_points: int | None = None,
) -> BenchmarkSet:
    """Queries + pool for one category's split."""
    if kind not in ("all_except_one", "single"):
        raise BenchError(f"unknown query kind {kind!r}")
    n_points = n_points or dataset.config.n_points
    wanted = set(dataset.split_ids(split, category))
    by_id = {s.shape_id: s for s in raw_shapes}
    missing = sorted(wanted - set(by_id))
    if missing:
        raise BenchError(f"raw corpus is missing shapes: {missing[:3]}...")
    pool: list[BenchPart] = []
    shape_parts: dict[str, list[int]] = {}
    skipped: dict[str, str] = {}
    for sid in sorted(wanted):
        parts, coverage = group_semantic_parts(by_id[sid], n_points, seed)
        if parts is None:
            skipped[sid] = f"labeled coverage {coverage:.2f} or <2 labeled parts"
            continue
        idxs = []
        for p in parts:
            idxs.append(len(pool))
            pool.append(p)
        shape_parts[sid] = idxs
    queries = []
    for sid, idxs in sorted(shape_parts.items()):
        rng = np.random.default_rng(stable_seed(seed, sid, kind, "query"))
        if kind == "all_except_one":
            held = idxs[int(rng.integers(len(idxs)))]
            visible = [i for i in idxs if i != held]
            if not visible:
                skipped[sid] = "single-part shape"
                continue
            x_cloud = build_assembly_cloud(
                [(pool[i].cloud_centered, pool[i].centroid, pool[i].surface_area) for i in visible],
                n_points,
                rng,
            )
            queries.append(
                BenchmarkQuery(
                    category=category,
                    shape_id=sid,
                    kind=kind,
                    x_parts=visible,
                    held_out=held,
                    query_part=None,
                    x_cloud=x_cloud,
                )
            )
        else:
            q = idxs[int(rng.integers(len(idxs)))]
            x_cloud = pool[q].cloud_centered + pool[q].centroid
            queries.append(
                BenchmarkQuery(
                    category=category,
                    shape_id=sid,
                    kind=kind,
                    x_parts=[q],
                    held_out=None,
                    query_part=q,
                    x_cloud=x_cloud,
                )
            )
    return BenchmarkSet(category=category, parts=pool, queries=queries, skipped=skipped)


# ---------------------------------------------------------------------------
# backends: geometry in, ranked pool indices out


class ModelBackend:
    """Scores pool parts by mixture density at their f-embeddings."""

    def __init__(self, f_params, g_params, ncfg: NetConfig, pool: list[BenchPart], batch: int = 64):
        self.ncfg = ncfg
        self.g_params = g_params
        coords = []
        for lo in range(0, len(pool), batch):
            pts = np.stack([p.cloud_centered for p in pool[lo : lo + batch]])
            coords.append(embed_batch(f_params, ncfg, Tensor(pts)).data)
        self.pool_coords = np.concatenate(coords) if coords else np.zeros((0, ncfg.embed_dim))

    def retrieve(self, x_cloud: np.ndarray, allowed: list[int], k: int) -> list[int]:
        phi, mu, sigma = mixture_batch(self.g_params, self.ncfg, Tensor(x_cloud[None]))
        from .networks import GaussianMixture

        mix = GaussianMixture(phi.data[0], mu.data[0], sigma.data[0])
        log_dens, _ = _mode_responsibilities(mix, self.pool_coords[allowed])
        order = np.argsort(-log_dens, kind="stable")
        return [allowed[int(i)] for i in order[:k]]


class RandomBackend:
    """Uniform sample without replacement; ignores the query geometry."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def retrieve(self, x_cloud: np.ndarray, allowed: list[int], k: int) -> list[int]:
        k = min(k, len(allowed))
        picks = self.rng.choice(len(allowed), size=k, replace=False)
        return [allowed[int(i)] for i in picks]


def random_baseline(rng: np.random.Generator) -> RandomBackend:
    return RandomBackend(rng)


# ---------------------------------------------------------------------------
# metrics


def average_precision(hits: list[bool]) -> float:
    """Mean precision at the ranks of correct hits; 0 when no hits."""
    precisions = []
    correct = 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            correct += 1
            precisions.append(correct / rank)
    return float(np.mean(precisions)) if precisions else 0.0


def functional_map(backend, bench: BenchmarkSet, k: int = 5) -> dict:
    """mAP@k of part-label matches against the held-out part."""
    aps = []
    skipped = 0
    for q in bench.queries:
        if q.held_out is None:
            skipped += 1
            continue
        want = bench.parts[q.held_out].label
        if want is None:
            skipped += 1
            continue
        got = backend.retrieve(q.x_cloud, bench.allowed_pool(q), k)
        aps.append(average_precision([bench.parts[i].label == want for i in got]))
    return {"map": float(np.mean(aps)) if aps else 0.0, "n_queries": len(aps), "skipped": skipped}


def geometric_hausdorff(backend, bench: BenchmarkSet, k: int = 5) -> dict:
    """Mean over queries of mean symmetric Hausdorff of top-k vs held-out."""
    means = []
    for q in bench.queries:
        if q.held_out is None:
            continue
        held = PointCloud(bench.parts[q.held_out].cloud_centered, Frame.CENTERED)
        got = backend.retrieve(q.x_cloud, bench.allowed_pool(q), k)
        ds = []
        for i in got:
            cand = PointCloud(bench.parts[i].cloud_centered, Frame.CENTERED)
            ds.append(max(directional_hausdorff(cand, held), directional_hausdorff(held, cand)))
        if ds:
            means.append(float(np.mean(ds)))
    return {"hausdorff": float(np.mean(means)) if means else float("nan"), "n_queries": len(means)}


def style_map(backend, bench: BenchmarkSet, k: int = 5) -> dict:
    """mAP@k where relevance is any style-label overlap with the query shape."""
    aps = []
    skipped = 0
    for q in bench.queries:
        want = bench.parts[q.x_parts[0]].style_labels
        if not want:
            skipped += 1
            continue
        got = backend.retrieve(q.x_cloud, bench.allowed_pool(q), k)
        aps.append(average_precision([bool(want & bench.parts[i].style_labels) for i in got]))
    return {"map": float(np.mean(aps)) if aps else 0.0, "n_queries": len(aps), "skipped": skipped}


def placement_pairs(dataset: Dataset, split: str, category: str, seed: int, per_shape: int = 3):
    """(X, Y, target) pairs drawn with the training sampler's distribution."""
    graphs = dataset.graphs(split, category)
    if not graphs:
        return []
    sampler = TripletSampler(graphs, dataset.config.n_points)
    rng = np.random.default_rng(stable_seed(seed, category, split, "placement"))
    pairs = []
    for gi in range(len(graphs)):
        for _ in range(per_shape):
            t = sampler.sample(gi, rng)
            pairs.append((t.x_points, t.y_points, t.y_target_centroid))
    return pairs


def placement_error_metric(h_params, ncfg: NetConfig, pairs, batch: int = 64) -> dict:
    """Mean Euclidean error in the unit-radius frame; plus a constant baseline.

    The baseline predictor always outputs the mean target of these pairs.
    """
    if not pairs:
        return {"mean_error": float("nan"), "n_pairs": 0, "baseline_error": float("nan")}
    errors = []
    targets = np.stack([t for _, _, t in pairs])
    for lo in range(0, len(pairs), batch):
        chunk = pairs[lo : lo + batch]
        x = Tensor(np.stack([p[0] for p in chunk]))
        y = Tensor(np.stack([p[1] for p in chunk]))
        pred = place_batch(h_params, ncfg, x, y).data
        for p, (_, _, t) in zip(pred, chunk):
            errors.append(placement_error(p, t))
    center = targets.mean(axis=0)
    baseline = float(np.mean(np.sqrt(((targets - center) ** 2).sum(axis=1))))
    return {"mean_error": float(np.mean(errors)), "n_pairs": len(pairs), "baseline_error": baseline}


# ---------------------------------------------------------------------------
# full report


def run_benchmark(
    raw_shapes: list[RawShape],
    dataset: Dataset,
    f_params,
    g_params,
    h_params,
    ncfg: NetConfig,
    categories: list[str] | None = None,
    k: int = 5,
    seed: int = 0,
    metrics: list[str] | None = None,
) -> dict:
    """Evaluate all metrics per category; returns the report dict."""
    categories = categories or dataset.categories
    metrics = metrics or ["functional", "geometric", "style", "placement"]
    report: dict = {
        "config": {
            "k": k,
            "seed": seed,
            "hausdorff": "symmetric (max of both directions), centered clouds, unit-radius frame",
            "ap_definition": "mean precision at hit ranks, 0 if no hits",
        },
        "categories": {},
    }
    for cat in categories:
        entry: dict = {}
        bench = build_benchmark(raw_shapes, dataset, cat, "all_except_one", "test", seed)
        model = ModelBackend(f_params, g_params, ncfg, bench.parts)
        rand = random_baseline(np.random.default_rng(stable_seed(seed, cat, "random")))
        if "functional" in metrics:
            entry["functional"] = {
                "ours": functional_map(model, bench, k),
                "random": functional_map(rand, bench, k),
            }
        if "geometric" in metrics:
            entry["geometric"] = {
                "ours": geometric_hausdorff(model, bench, k),
                "random": geometric_hausdorff(rand, bench, k),
            }
        if "style" in metrics:
            style = {}
            for kind in ("all_except_one", "single"):
                b = bench if kind == "all_except_one" else build_benchmark(raw_shapes, dataset, cat, kind, "test", seed)
                m = model if kind == "all_except_one" else ModelBackend(f_params, g_params, ncfg, b.parts)
                style[kind] = {
                    "ours": style_map(m, b, k),
                    "random": style_map(random_baseline(np.random.default_rng(stable_seed(seed, cat, kind, "random"))), b, k),
                }
            entry["style"] = style
        if "placement" in metrics:
            entry["placement"] = {
                split: placement_error_metric(h_params, ncfg, placement_pairs(dataset, split, cat, seed))
                for split in ("train", "test")
            }
        entry["n_pool_parts"] = len(bench.parts)
        entry["skipped_shapes"] = bench.skipped
        report["categories"][cat] = entry
    return report


def report_means(report: dict) -> dict:
    """Cross-category means, mirroring a summary row."""
    out: dict = {}
    cats = report["categories"]
    def mean_of(path):
        vals = []
        for cat in cats.values():
            node = cat
            for key in path:
                node = node.get(key) if isinstance(node, dict) else None
                if node is None:
                    return None
            vals.append(node)
        return float(np.mean(vals)) if vals else None

    for who in ("ours", "random"):
        out[f"functional_map_{who}"] = mean_of(["functional", who, "map"])
        out[f"geometric_hausdorff_{who}"] = mean_of(["geometric", who, "hausdorff"])
    out["placement_test_error"] = mean_of(["placement", "test", "mean_error"])
    out["placement_train_error"] = mean_of(["placement", "train", "mean_error"])
    out["placement_test_baseline"] = mean_of(["placement", "test", "baseline_error"])
    return {k: v for k, v in out.items() if v is not None}


def format_report(report: dict) -> str:
    """Plain-text tables in the style of the benchmark's four tables."""
    lines = []
    cats = sorted(report["categories"])
    def row(name, values):
        return f"  {name:<10s}" + "".join(f" {v:>8s}" for v in values)

    if any("functional" in report["categories"][c] for c in cats):
        lines.append("Functional mAP@5 (higher is better)")
        lines.append(row("", cats))
        for who in ("random", "ours"):
            vals = [f"{report['categories'][c]['functional'][who]['map']:.2f}" for c in cats]
            lines.append(row(who, vals))
        lines.append("")
    if any("geometric" in report["categories"][c] for c in cats):
        lines.append("Geometric mean top-5 symmetric Hausdorff (lower is better)")
        lines.append(row("", cats))
        for who in ("random", "ours"):
            vals = [f"{report['categories'][c]['geometric'][who]['hausdorff']:.2f}" for c in cats]
            lines.append(row(who, vals))
        lines.append("")
    if any("style" in report["categories"][c] for c in cats):
        lines.append("Style mAP@5 (higher is better)")
        for kind in ("all_except_one", "single"):
            lines.append(f"  [{kind}]")
            lines.append(row("", cats))
            for who in ("random", "ours"):
                vals = [f"{report['categories'][c]['style'][kind][who]['map']:.2f}" for c in cats]
                lines.append(row(who, vals))
        lines.append("")
    if any("placement" in report["categories"][c] for c in cats):
        lines.append("Placement mean error, unit-radius frame (lower is better)")
        lines.append(row("", cats))
        for split in ("train", "test"):
            vals = [f"{report['categories'][c]['placement'][split]['mean_error']:.2f}" for c in cats]
            lines.append(row(split, vals))
    return "\n".join(lines)


def save_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
