"""Shape ingestion, contact graphs, merge rules, and the processed dataset.

Pipeline per shape: normalize to the unit-radius frame (bbox center at the
origin, max vertex distance 1), sample each raw component, connect
components whose clouds come closer than ``tau_proximity``, then merge to a
fixpoint: undersized nodes into their largest neighbor, mutually-overlapping
nodes together, and equal-geometry-hash nodes into one. Merged nodes are
resampled from the union mesh so every component keeps exactly ``n_points``
points.

External formats
----------------
Triangle soup (ASCII, one object per file)::

    tris 1
    <n_vertices> <n_triangles>
    x y z          (one line per vertex, repr-printed float64)
    i j k          (one line per triangle, 0-based vertex indices)

``components.bin`` (all little-endian)::

    magic b"PFCOMP01", u32 n_points, u32 n_shapes,
    shape offset table: (u32 id_len, id utf8, u64 absolute_offset) per shape,
    per shape at its offset: u32 n_components, then per component:
        u32 id_len, id utf8, 3 x f32 centroid, n_points x 3 x f32 cloud.

``manifest.json`` holds everything else: thresholds, per-shape component
metadata and contact edges, splits, stats, and labels (labels are consumed
only by the benchmark, never by training).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import (
    Frame,
    GeometryError,
    PointCloud,
    TriMesh,
    clouds_within,
    hausdorff_within,
    min_distance,
    normalize_shape,
    pca_obb,
    recenter,
    sample_surface,
)

MANIFEST_VERSION = 1
BIN_MAGIC = b"PFCOMP01"


class DatasetError(ValueError):
    pass


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from structured parts (not Python hash())."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# raw shapes and mesh io


@dataclass(frozen=True)
class RawComponent:
    id: str
    mesh: TriMesh
    part_label: str | None = None


@dataclass(frozen=True)
class RawShape:
    shape_id: str
    category: str
    components: tuple[RawComponent, ...]
    fine_grained_labels: frozenset[str] = frozenset()

    def __post_init__(self):
        ids = [c.id for c in self.components]
        if len(ids) != len(set(ids)):
            raise DatasetError(f"{self.shape_id}: duplicate component ids")
        if not ids:
            raise DatasetError(f"{self.shape_id}: shape has no components")


def write_tris(path, mesh: TriMesh) -> None:
    lines = ["tris 1", f"{len(mesh.vertices)} {len(mesh.triangles)}"]
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for t in mesh.triangles:
        lines.append(f"{t[0]} {t[1]} {t[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tris(path) -> TriMesh:
    lines = Path(path).read_text().split("\n")
    if not lines or lines[0].strip() != "tris 1":
        raise DatasetError(f"{path}: not a 'tris 1' file")
    try:
        nv, nt = (int(x) for x in lines[1].split())
        verts = np.array([[float(x) for x in lines[2 + i].split()] for i in range(nv)])
        tris = np.array([[int(x) for x in lines[2 + nv + i].split()] for i in range(nt)], dtype=np.int64)
    except (ValueError, IndexError) as e:
        raise DatasetError(f"{path}: malformed triangle soup ({e})") from None
    return TriMesh(verts.reshape(nv, 3), tris.reshape(nt, 3))


def save_raw_shape(shape: RawShape, shape_dir) -> None:
    shape_dir = Path(shape_dir)
    shape_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "shape_id": shape.shape_id,
        "category": shape.category,
        "fine_grained_labels": sorted(shape.fine_grained_labels),
        "components": [],
    }
    for comp in shape.components:
        fname = f"{comp.id}.tris"
        write_tris(shape_dir / fname, comp.mesh)
        doc["components"].append({"id": comp.id, "mesh": fname, "part_label": comp.part_label})
    (shape_dir / "shape.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_raw_shape(shape_dir) -> RawShape:
    shape_dir = Path(shape_dir)
    doc = json.loads((shape_dir / "shape.json").read_text())
    comps = tuple(
        RawComponent(c["id"], read_tris(shape_dir / c["mesh"]), c.get("part_label"))
        for c in doc["components"]
    )
    return RawShape(doc["shape_id"], doc["category"], comps, frozenset(doc.get("fine_grained_labels", [])))


def load_corpus(corpus_dir) -> list[RawShape]:
    corpus_dir = Path(corpus_dir)
    shapes = []
    for sub in sorted(p for p in corpus_dir.iterdir() if (p / "shape.json").exists()):
        shapes.append(load_raw_shape(sub))
    if not shapes:
        raise DatasetError(f"{corpus_dir}: no shapes found")
    return shapes


# ---------------------------------------------------------------------------
# processed components and contact graphs


@dataclass(frozen=True)
class PrepConfig:
    tau_proximity: float = 0.05
    tau_size: float = 0.2
    tau_hausdorff: float = 0.05
    max_cc: int = 8
    n_points: int = 1000
    split_ratio: float = 0.8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Component:
    """A processed part in the unit-radius object frame of its shape."""

    id: str
    shape_id: str
    cloud_centered: PointCloud
    centroid: np.ndarray
    obb_diagonal: float
    merged_from: tuple[str, ...]
    geometry_hash: str
    surface_area: float
    part_label: str | None = None
    label_areas: dict = field(default_factory=dict)

    @property
    def cloud_object(self) -> PointCloud:
        return self.cloud_centered.translated(self.centroid)


@dataclass(eq=False)
class ContactGraph:
    shape_id: str
    category: str
    nodes: list[Component]
    edges: frozenset[frozenset]
    fine_grained_labels: frozenset[str] = frozenset()
    meshes: list[TriMesh] | None = None  # kept during prep for union resampling
    prep_seed: int = 0
    labeled_coverage: float = 1.0

    def neighbors(self, i: int) -> list[int]:
        out = []
        for e in self.edges:
            a, b = sorted(e)
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            a, b = sorted(e)
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]


def geometry_hash(mesh: TriMesh, rel_quant: float = 1e-5, gap_tol: float = 1e-6) -> str:
    """Digest of the quantized, centered, PCA-canonicalized vertex multiset.

    PCA alignment is applied only when the covariance eigenvalues are
    well-separated; near-ties (symmetric parts) fall back to the input
    orientation so that translated duplicates still hash equal.
    """
    v = mesh.vertices
    x = v - v.mean(axis=0)
    scale = float(np.sqrt((x * x).sum(axis=1).max()))  # rotation-invariant
    if scale == 0.0:
        scale = 1.0
    cov = (x.T @ x) / len(x)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    lam = eigvals[order]
    total = float(lam[0]) if lam[0] > 0 else 1.0
    if (lam[0] - lam[1]) / total > gap_tol and (lam[1] - lam[2]) / total > gap_tol:
        proj = x @ eigvecs[:, order]
        # axis signs must come from the data (projection skewness), not the
        # eigenvector entries, or rotated copies canonicalize differently
        skew = (proj**3).sum(axis=0)
        flip = skew < -gap_tol * len(x) * scale**3
        proj[:, flip] = -proj[:, flip]
        x = proj
    q = np.round(x / (scale * rel_quant)).astype(np.int64)
    rows = q[np.lexsort((q[:, 2], q[:, 1], q[:, 0]))]
    return hashlib.sha256(rows.tobytes()).hexdigest()[:16]


def _component_from_mesh(
    cid: str,
    shape_id: str,
    mesh: TriMesh,
    merged_from: tuple[str, ...],
    label_areas: dict,
    cfg: PrepConfig,
    prep_seed: int,
) -> Component:
    cloud = sample_surface(mesh, cfg.n_points, stable_seed(prep_seed, shape_id, cid, "sample"))
    centered, centroid = recenter(cloud)
    label = None
    labeled = {k: v for k, v in label_areas.items() if k is not None}
    if labeled:
        label = max(sorted(labeled), key=lambda k: labeled[k])
    return Component(
        id=cid,
        shape_id=shape_id,
        cloud_centered=centered,
        centroid=centroid,
        obb_diagonal=pca_obb(cloud).diagonal,
        merged_from=merged_from,
        geometry_hash=geometry_hash(mesh),
        surface_area=mesh.area(),
        part_label=label,
        label_areas=dict(label_areas),
    )


def _compute_edges(nodes: list[Component], tau: float) -> frozenset:
    edges = set()
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if clouds_within(nodes[i].cloud_object, nodes[j].cloud_object, tau):
                edges.add(frozenset((i, j)))
    return frozenset(edges)


def build_contact_graph(shape: RawShape, cfg: PrepConfig, rng_seed: int) -> ContactGraph:
    """Normalize, sample, and connect one raw shape."""
    norm = normalize_shape([PointCloud(c.mesh.vertices) for c in shape.components])
    meshes = [c.mesh.transformed(norm.center, norm.radius) for c in shape.components]
    nodes = []
    total_area = 0.0
    labeled_area = 0.0
    for comp, mesh in zip(shape.components, meshes):
        area = mesh.area()
        total_area += area
        if comp.part_label is not None:
            labeled_area += area
        nodes.append(
            _component_from_mesh(
                comp.id,
                shape.shape_id,
                mesh,
                merged_from=(comp.id,),
                label_areas={comp.part_label: area},
                cfg=cfg,
                prep_seed=rng_seed,
            )
        )
    return ContactGraph(
        shape_id=shape.shape_id,
        category=shape.category,
        nodes=nodes,
        edges=_compute_edges(nodes, cfg.tau_proximity),
        fine_grained_labels=shape.fine_grained_labels,
        meshes=meshes,
        prep_seed=rng_seed,
        labeled_coverage=labeled_area / total_area if total_area > 0 else 0.0,
    )


def _merge_nodes(g: ContactGraph, cfg: PrepConfig, group: list[int]) -> ContactGraph:
    """Union the meshes of ``group`` into one node, resample, recompute edges."""
    assert g.meshes is not None, "merge requires meshes (prep-time graphs only)"
    group_set = set(group)
    union = TriMesh.union([g.meshes[i] for i in group])
    merged_from = tuple(sorted({mid for i in group for mid in g.nodes[i].merged_from}))
    label_areas: dict = {}
    for i in group:
        for k, v in g.nodes[i].label_areas.items():
            label_areas[k] = label_areas.get(k, 0.0) + v
    new_id = "+".join(merged_from)
    merged = _component_from_mesh(
        new_id, g.shape_id, union, merged_from, label_areas, cfg, g.prep_seed
    )
    nodes = [n for i, n in enumerate(g.nodes) if i not in group_set] + [merged]
    meshes = [m for i, m in enumerate(g.meshes) if i not in group_set] + [union]
    return ContactGraph(
        shape_id=g.shape_id,
        category=g.category,
        nodes=nodes,
        edges=_compute_edges(nodes, cfg.tau_proximity),
        fine_grained_labels=g.fine_grained_labels,
        meshes=meshes,
        prep_seed=g.prep_seed,
        labeled_coverage=g.labeled_coverage,
    )


def merge_components(g: ContactGraph, cfg: PrepConfig, stats: dict | None = None) -> ContactGraph:
    """Apply size, overlap, and duplicate merges until nothing fires.

    Rule order per pass: (1) any node with obb diagonal under
    ``tau_size`` merges into its largest neighbor (globally nearest node
    when it has no neighbor); (2) the first pair whose directional
    Hausdorff distance is under ``tau_hausdorff`` in either direction
    merges; (3) nodes with equal geometry hashes merge as one group.
    Every merge restarts the pass, so the result is a fixpoint of all
    three rules; node count strictly decreases, which bounds the loop.
    """
    stats = stats if stats is not None else {}
    while len(g.nodes) > 1:
        # rule 1: size
        small = [i for i, n in enumerate(g.nodes) if n.obb_diagonal < cfg.tau_size]
        if small:
            i = min(small, key=lambda i: (g.nodes[i].obb_diagonal, i))
            nbrs = g.neighbors(i)
            if nbrs:
                j = max(nbrs, key=lambda j: (g.nodes[j].obb_diagonal, -j))
            else:
                stats["size_merge_no_neighbor"] = stats.get("size_merge_no_neighbor", 0) + 1
                others = [j for j in range(len(g.nodes)) if j != i]
                j = min(others, key=lambda j: (min_distance(g.nodes[i].cloud_object, g.nodes[j].cloud_object), j))
            g = _merge_nodes(g, cfg, [i, j])
            stats["size_merges"] = stats.get("size_merges", 0) + 1
            continue
        # rule 2: overlap (directional Hausdorff in either direction)
        fired = False
        for i in range(len(g.nodes)):
            for j in range(i + 1, len(g.nodes)):
                ci, cj = g.nodes[i].cloud_object, g.nodes[j].cloud_object
                if hausdorff_within(ci, cj, cfg.tau_hausdorff) or hausdorff_within(cj, ci, cfg.tau_hausdorff):
                    g = _merge_nodes(g, cfg, [i, j])
                    stats["overlap_merges"] = stats.get("overlap_merges", 0) + 1
                    fired = True
                    break
            if fired:
                break
        if fired:
            continue
        # rule 3: equal geometry hash
        by_hash: dict[str, list[int]] = {}
        for i, n in enumerate(g.nodes):
            by_hash.setdefault(n.geometry_hash, []).append(i)
        groups = [v for _, v in sorted(by_hash.items()) if len(v) > 1]
        if groups:
            g = _merge_nodes(g, cfg, groups[0])
            stats["duplicate_merges"] = stats.get("duplicate_merges", 0) + 1
            continue
        break
    return g


def prep_shape(shape: RawShape, cfg: PrepConfig, stats: dict | None = None) -> ContactGraph:
    return merge_components(build_contact_graph(shape, cfg, cfg.seed), cfg, stats)


# ---------------------------------------------------------------------------
# export / import


def _write_components_bin(path, graphs: list[ContactGraph], n_points: int) -> None:
    blocks = []
    for g in graphs:
        buf = bytearray()
        buf += struct.pack("<I", len(g.nodes))
        for node in g.nodes:
            cid = node.id.encode()
            buf += struct.pack("<I", len(cid)) + cid
            buf += np.asarray(node.centroid, dtype="<f4").tobytes()
            buf += np.ascontiguousarray(node.cloud_centered.points, dtype="<f4").tobytes()
        blocks.append((g.shape_id, bytes(buf)))
    header = bytearray()
    header += BIN_MAGIC
    header += struct.pack("<II", n_points, len(blocks))
    table_len = sum(4 + len(sid.encode()) + 8 for sid, _ in blocks)
    offset = len(header) + table_len
    for sid, blob in blocks:
        sid_b = sid.encode()
        header += struct.pack("<I", len(sid_b)) + sid_b + struct.pack("<Q", offset)
        offset += len(blob)
    with open(path, "wb") as f:
        f.write(header)
        for _, blob in blocks:
            f.write(blob)


def _read_components_bin(path):
    data = Path(path).read_bytes()
    if data[: len(BIN_MAGIC)] != BIN_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    pos = len(BIN_MAGIC)
    n_points, n_shapes = struct.unpack_from("<II", data, pos)
    pos += 8
    table = []
    for _ in range(n_shapes):
        (id_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        sid = data[pos : pos + id_len].decode()
        pos += id_len
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        table.append((sid, offset))
    out: dict[str, list[tuple[str, np.ndarray, np.ndarray]]] = {}
    for sid, offset in table:
        pos = offset
        (n_comp,) = struct.unpack_from("<I", data, pos)
        pos += 4
        comps = []
        for _ in range(n_comp):
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            cid = data[pos : pos + id_len].decode()
            pos += id_len
            centroid = np.frombuffer(data, dtype="<f4", count=3, offset=pos).astype(np.float64)
            pos += 12
            cloud = (
                np.frombuffer(data, dtype="<f4", count=n_points * 3, offset=pos)
                .reshape(n_points, 3)
                .astype(np.float64)
            )
            pos += n_points * 12
            comps.append((cid, centroid, cloud))
        out[sid] = comps
    return n_points, out


def export_dataset(graphs: list[ContactGraph], out_dir, cfg: PrepConfig, prep_stats: dict | None = None) -> dict:
    """Write manifest.json + components.bin; returns the manifest dict.

    Graphs outside [2, max_cc] components are discarded (recorded with a
    reason); the per-category split is a seeded shuffle of sorted shape ids.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    admitted: list[ContactGraph] = []
    discarded: dict[str, str] = {}
    for g in graphs:
        if len(g.nodes) < 2:
            discarded[g.shape_id] = "too_few_components"
        elif len(g.nodes) > cfg.max_cc:
            discarded[g.shape_id] = "too_many_components"
        else:
            admitted.append(g)
    admitted.sort(key=lambda g: g.shape_id)

    categories = sorted({g.category for g in graphs})
    splits: dict[str, dict[str, list[str]]] = {}
    warnings: list[str] = []
    for cat in categories:
        ids = sorted(g.shape_id for g in admitted if g.category == cat)
        if len(ids) < 5:
            warnings.append(f"category {cat!r} has only {len(ids)} admitted shapes")
        rng = np.random.default_rng(stable_seed(cfg.seed, cat, "split"))
        perm = rng.permutation(len(ids))
        n_train = int(round(cfg.split_ratio * len(ids)))
        train = sorted(ids[i] for i in perm[:n_train])
        test = sorted(ids[i] for i in perm[n_train:])
        splits[cat] = {"train": train, "test": test}

    histogram: dict[str, dict[str, int]] = {}
    discarded_by_cat: dict[str, int] = {}
    cat_of = {g.shape_id: g.category for g in graphs}
    for g in admitted:
        histogram.setdefault(g.category, {})
        key = str(len(g.nodes))
        histogram[g.category][key] = histogram[g.category].get(key, 0) + 1
    for sid in discarded:
        discarded_by_cat[cat_of[sid]] = discarded_by_cat.get(cat_of[sid], 0) + 1

    shapes_doc = {}
    for g in admitted:
        shapes_doc[g.shape_id] = {
            "category": g.category,
            "n_components": len(g.nodes),
            "edges": sorted(sorted(e) for e in g.edges),
            "labeled_coverage": g.labeled_coverage,
            "labels": {"fine_grained": sorted(g.fine_grained_labels)},
            "components": [
                {
                    "id": n.id,
                    "obb_diagonal": n.obb_diagonal,
                    "surface_area": n.surface_area,
                    "geometry_hash": n.geometry_hash,
                    "merged_from": list(n.merged_from),
                    "part_label": n.part_label,
                }
                for n in g.nodes
            ],
        }

    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "categories": categories,
        "shapes": shapes_doc,
        "discarded": discarded,
        "splits": splits,
        "stats": {
            "histogram": histogram,
            "n_admitted": len(admitted),
            "n_discarded": len(discarded),
            "discarded_per_category": discarded_by_cat,
            "merge": prep_stats or {},
        },
        "warnings": warnings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    _write_components_bin(out_dir / "components.bin", admitted, cfg.n_points)
    return manifest


def dataset_stats(manifest: dict) -> dict:
    """Histogram of component counts per category plus discard counts."""
    hist: dict[str, dict[int, int]] = {}
    for sid, doc in manifest["shapes"].items():
        cat = doc["category"]
        hist.setdefault(cat, {})
        hist[cat][doc["n_components"]] = hist[cat].get(doc["n_components"], 0) + 1
    return {
        "histogram": hist,
        "discarded": dict(manifest["discarded"]),
        "n_admitted": len(manifest["shapes"]),
    }


# ---------------------------------------------------------------------------
# read-back view used by training, retrieval, and the benchmark


@dataclass(frozen=True)
class ComponentRef:
    shape_id: str
    component_id: str

    def key(self) -> str:
        return f"{self.shape_id}/{self.component_id}"


@dataclass(eq=False)
class ComponentView:
    ref: ComponentRef
    cloud_centered: PointCloud
    centroid: np.ndarray
    surface_area: float
    obb_diagonal: float
    geometry_hash: str
    part_label: str | None

    @property
    def cloud_object(self) -> PointCloud:
        return self.cloud_centered.translated(self.centroid)


@dataclass(eq=False)
class GraphView:
    shape_id: str
    category: str
    components: list[ComponentView]
    edges: frozenset
    fine_grained_labels: frozenset[str]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.components]
        for e in self.edges:
            a, b = sorted(e)
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]


class Dataset:
    """Loaded prep output: manifest + per-component clouds."""

    def __init__(self, manifest: dict, clouds: dict):
        self.manifest = manifest
        self.config = PrepConfig(**manifest["config"])
        self._graphs: dict[str, GraphView] = {}
        for sid, doc in manifest["shapes"].items():
            comps = []
            for meta, (cid, centroid, cloud) in zip(doc["components"], clouds[sid]):
                if meta["id"] != cid:
                    raise DatasetError(f"{sid}: manifest/bin component order mismatch")
                comps.append(
                    ComponentView(
                        ref=ComponentRef(sid, cid),
                        cloud_centered=PointCloud(cloud, Frame.CENTERED),
                        centroid=centroid,
                        surface_area=meta["surface_area"],
                        obb_diagonal=meta["obb_diagonal"],
                        geometry_hash=meta["geometry_hash"],
                        part_label=meta["part_label"],
                    )
                )
            self._graphs[sid] = GraphView(
                shape_id=sid,
                category=doc["category"],
                components=comps,
                edges=frozenset(frozenset(e) for e in doc["edges"]),
                fine_grained_labels=frozenset(doc["labels"]["fine_grained"]),
            )

    @classmethod
    def load(cls, prep_dir) -> "Dataset":
        prep_dir = Path(prep_dir)
        manifest_path = prep_dir / "manifest.json"
        bin_path = prep_dir / "components.bin"
        missing = [str(p) for p in (manifest_path, bin_path) if not p.exists()]
        if missing:
            raise DatasetError(f"missing dataset files: {', '.join(missing)}")
        manifest = json.loads(manifest_path.read_text())
        n_points, clouds = _read_components_bin(bin_path)
        if n_points != manifest["config"]["n_points"]:
            raise DatasetError("components.bin n_points disagrees with manifest")
        return cls(manifest, clouds)

    @property
    def categories(self) -> list[str]:
        return list(self.manifest["categories"])

    def split_ids(self, split: str, category: str | None = None) -> list[str]:
        cats = [category] if category else self.categories
        out: list[str] = []
        for cat in cats:
            out.extend(self.manifest["splits"].get(cat, {}).get(split, []))
        return out

    def graph(self, shape_id: str) -> GraphView:
        return self._graphs[shape_id]

    def graphs(self, split: str | None = None, category: str | None = None) -> list[GraphView]:
        if split is None:
            ids = [sid for sid, g in sorted(self._graphs.items()) if category in (None, g.category)]
        else:
            ids = self.split_ids(split, category)
        return [self._graphs[sid] for sid in ids]

    def components(self, split: str | None = None, category: str | None = None) -> list[ComponentView]:
        return [c for g in self.graphs(split, category) for c in g.components]

    def find(self, ref: ComponentRef) -> ComponentView:
        for c in self._graphs[ref.shape_id].components:
            if c.ref == ref:
                return c
        raise KeyError(ref)


def prep_corpus(corpus_dir, out_dir, cfg: PrepConfig) -> dict:
    """Full preprocessing pass: load raw shapes, build + merge, export."""
    shapes = load_corpus(corpus_dir)
    stats: dict = {}
    graphs = [prep_shape(s, cfg, stats) for s in shapes]
    return export_dataset(graphs, out_dir, cfg, prep_stats=stats)
