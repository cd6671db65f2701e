"""Inference: embed the component pool, predict mixtures for partial
assemblies, sample coordinates, proximity-search the embedding, place
candidates, and run automatic synthesis.

Suggestion scores are mixture densities evaluated at the *entry's*
embedding coordinate (not at the sampled point), so rankings are
insensitive to sampling noise; ``score = exp(log_score)`` with
``log_score = -gmm_nll``. Nearest-neighbor search over the
50-dimensional embedding is an exact vectorized linear scan, which is
both the correctness definition and fast enough at desk scale.

Assemblies resample their query cloud with a seed derived from their
content (refs + placements), so max-mode suggestion is a pure function
of (params, index, assembly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataset import ComponentRef, ComponentView, Dataset, stable_seed
from .geometry import Frame, PointCloud
from .losses import gmm_nll
from .networks import GaussianMixture, NetConfig, embed_batch, mixture_batch, place_batch
from .trainer import build_assembly_cloud


class RetrievalError(ValueError):
    pass


@dataclass(eq=False)
class IndexEntry:
    ref: ComponentRef
    coord: np.ndarray  # (D,)
    cloud_centered: np.ndarray  # (N, 3)
    centroid: np.ndarray  # (3,) ground-truth position in its source shape
    surface_area: float
    category: str


class EmbeddingIndex:
    """Exact nearest-neighbor search over embedded components."""

    def __init__(self, entries: list[IndexEntry]):
        if not entries:
            raise RetrievalError("empty component pool")
        self.entries: list[IndexEntry] = []
        self._coords: np.ndarray | None = None
        self.add(entries)

    def add(self, entries: list[IndexEntry]) -> None:
        self.entries.extend(entries)
        self._coords = np.stack([e.coord for e in self.entries])

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    def __len__(self) -> int:
        return len(self.entries)

    def knn(self, coord: np.ndarray, k: int, exclude: set[ComponentRef] | None = None) -> list[tuple[IndexEntry, float]]:
        d = np.sqrt(((self._coords - np.asarray(coord)) ** 2).sum(axis=1))
        order = np.argsort(d, kind="stable")
        out = []
        for i in order:
            e = self.entries[int(i)]
            if exclude and e.ref in exclude:
                continue
            out.append((e, float(d[int(i)])))
            if len(out) == k:
                break
        return out

    def nearest(self, coords: np.ndarray, exclude: set[ComponentRef] | None = None) -> list[IndexEntry]:
        mask = np.ones(len(self.entries), dtype=bool)
        if exclude:
            for i, e in enumerate(self.entries):
                if e.ref in exclude:
                    mask[i] = False
        if not mask.any():
            return []
        idx = np.nonzero(mask)[0]
        sub = self._coords[idx]
        d = ((sub[None, :, :] - np.asarray(coords)[:, None, :]) ** 2).sum(axis=2)
        return [self.entries[int(idx[j])] for j in np.argmin(d, axis=1)]


def build_index(
    f_params: dict[str, Tensor],
    ncfg: NetConfig,
    dataset: Dataset,
    categories: list[str] | None = None,
    split: str | None = None,
    batch: int = 64,
) -> EmbeddingIndex:
    """Embed every pool component with f; deterministic."""
    comps: list[ComponentView] = []
    cats = categories if categories is not None else [None]
    for cat in cats:
        comps.extend(dataset.components(split, cat))
    if not comps:
        raise RetrievalError("empty component pool")
    cat_of = {sid: doc["category"] for sid, doc in dataset.manifest["shapes"].items()}
    entries = []
    for lo in range(0, len(comps), batch):
        chunk = comps[lo : lo + batch]
        pts = np.stack([c.cloud_centered.points for c in chunk])
        coords = embed_batch(f_params, ncfg, Tensor(pts)).data
        for c, coord in zip(chunk, coords):
            entries.append(
                IndexEntry(
                    ref=c.ref,
                    coord=coord,
                    cloud_centered=c.cloud_centered.points,
                    centroid=np.asarray(c.centroid, dtype=np.float64),
                    surface_area=c.surface_area,
                    category=cat_of[c.ref.shape_id],
                )
            )
    return EmbeddingIndex(entries)


# ---------------------------------------------------------------------------
# assemblies and suggestions


@dataclass(eq=False)
class Assembly:
    """Placed components in a shared object frame."""

    parts: list[tuple[IndexEntry, np.ndarray]] = field(default_factory=list)

    @classmethod
    def seeded(cls, entry: IndexEntry, position: np.ndarray | None = None) -> "Assembly":
        pos = entry.centroid if position is None else np.asarray(position, dtype=np.float64)
        return cls(parts=[(entry, pos)])

    def add(self, entry: IndexEntry, position) -> None:
        self.parts.append((entry, np.asarray(position, dtype=np.float64)))

    @property
    def refs(self) -> set[ComponentRef]:
        return {e.ref for e, _ in self.parts}

    def content_seed(self) -> int:
        items = sorted((e.ref.key(), p.astype("<f8").tobytes().hex()) for e, p in self.parts)
        return stable_seed("assembly", *[f"{k}:{h}" for k, h in items])

    def cloud(self, n_points: int) -> PointCloud:
        """Area-weighted union resample; deterministic for the same content."""
        if not self.parts:
            raise RetrievalError("empty assembly")
        rng = np.random.default_rng(self.content_seed())
        pts = build_assembly_cloud(
            [(e.cloud_centered, p, e.surface_area) for e, p in self.parts], n_points, rng
        )
        return PointCloud(pts, Frame.OBJECT)


@dataclass(eq=False)
class Suggestion:
    entry: IndexEntry
    score: float  # mixture density at the entry's coordinate
    log_score: float
    mode: int  # mixture mode: sampled-from (sample) or argmax responsibility (max)
    placement: np.ndarray  # (3,)

    @property
    def ref(self) -> ComponentRef:
        return self.entry.ref


@dataclass(eq=False)
class SuggestionSet:
    items: list[Suggestion]

    def __post_init__(self):
        scores = [s.log_score for s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise RetrievalError("suggestion scores must be nonincreasing")
        refs = [s.ref for s in self.items]
        if len(refs) != len(set(refs)):
            raise RetrievalError("duplicate component refs in suggestions")

    def __len__(self) -> int:
        return len(self.items)


def _mode_responsibilities(mix: GaussianMixture, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry (log density, argmax mode) at many coordinates."""
    y = np.atleast_2d(coords)
    diff = y[:, None, :] - mix.means[None, :, :]
    quad = (diff * diff / (2.0 * mix.stds**2)[None]).sum(axis=2)
    logdet = np.log(mix.stds).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    expo = logw[None, :] - quad - logdet[None, :] - 0.5 * mix.dim * np.log(2 * np.pi)
    m = expo.max(axis=1, keepdims=True)
    log_dens = m[:, 0] + np.log(np.exp(expo - m).sum(axis=1))
    return log_dens, expo.argmax(axis=1)


def suggest_from_mixture(
    mix: GaussianMixture,
    index: EmbeddingIndex,
    h_params: dict[str, Tensor],
    ncfg: NetConfig,
    assembly_cloud: PointCloud,
    n_candidates: int = 8,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
    exclude: set[ComponentRef] | None = None,
) -> SuggestionSet:
    """Rank pool entries under a predicted mixture and place each candidate."""
    exclude = exclude or set()
    if mode == "sample":
        if rng is None:
            raise RetrievalError("sample mode needs an rng")
        coords, modes = mix.sample(n_candidates, rng)
        hits = index.nearest(coords, exclude=exclude)
        picked: dict[ComponentRef, tuple[IndexEntry, int]] = {}
        for entry, k in zip(hits, modes):
            if entry.ref not in picked:
                picked[entry.ref] = (entry, int(k))
        chosen = list(picked.values())
    elif mode == "max":
        log_dens, modes = _mode_responsibilities(mix, index.coords)
        order = np.argsort(-log_dens, kind="stable")
        chosen = []
        for i in order:
            e = index.entries[int(i)]
            if e.ref in exclude:
                continue
            chosen.append((e, int(modes[int(i)])))
            if len(chosen) == n_candidates:
                break
    else:
        raise RetrievalError(f"unknown suggestion mode {mode!r}")
    if not chosen:
        return SuggestionSet(items=[])

    entries = [e for e, _ in chosen]
    log_scores = _mode_responsibilities(mix, np.stack([e.coord for e in entries]))[0]
    apts = np.repeat(assembly_cloud.points[None, :, :], len(entries), axis=0)
    cpts = np.stack([e.cloud_centered for e in entries])
    placements = place_batch(h_params, ncfg, Tensor(apts), Tensor(cpts)).data
    items = [
        Suggestion(entry=e, score=float(np.exp(ls)), log_score=float(ls), mode=k, placement=p)
        for (e, k), ls, p in zip(chosen, log_scores, placements)
    ]
    items.sort(key=lambda s: (-s.log_score, s.ref.key()))
    return SuggestionSet(items=items)


def suggest(
    g_params: dict[str, Tensor],
    h_params: dict[str, Tensor],
    ncfg: NetConfig,
    index: EmbeddingIndex,
    assembly: Assembly,
    n_candidates: int = 8,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> SuggestionSet:
    """Predict the mixture from the assembly cloud and rank complements."""
    if not assembly.parts:
        raise RetrievalError("empty assembly")
    from .networks import retrieve_distribution

    cloud = assembly.cloud(ncfg.n_points)
    mix = retrieve_distribution(g_params, ncfg, cloud)
    return suggest_from_mixture(
        mix, index, h_params, ncfg, cloud, n_candidates, mode, rng, exclude=assembly.refs
    )


# ---------------------------------------------------------------------------
# automatic synthesis


@dataclass(eq=False)
class TrajectoryStep:
    step: int
    chosen: Suggestion | None
    placed: list[tuple[ComponentRef, np.ndarray]]
    error: str | None = None


@dataclass(eq=False)
class Trajectory:
    steps: list[TrajectoryStep]

    @property
    def final_refs(self) -> set[ComponentRef]:
        return {ref for ref, _ in self.steps[-1].placed}


def auto_assemble(
    g_params: dict[str, Tensor],
    h_params: dict[str, Tensor],
    ncfg: NetConfig,
    index: EmbeddingIndex,
    seed_entry: IndexEntry,
    max_steps: int = 7,
    mode: str = "max",
    rng: np.random.Generator | None = None,
    n_candidates: int = 8,
    min_log_score: float | None = None,
) -> Trajectory:
    """Iteratively suggest, place, and union until max_steps or threshold."""
    assembly = Assembly.seeded(seed_entry)
    snap = [(e.ref, p.copy()) for e, p in assembly.parts]
    steps = [TrajectoryStep(step=0, chosen=None, placed=snap)]
    for step in range(1, max_steps + 1):
        sugg = suggest(g_params, h_params, ncfg, index, assembly, n_candidates, mode, rng)
        if not sugg.items:
            break
        top = sugg.items[0]
        if min_log_score is not None and top.log_score < min_log_score:
            break
        if not np.all(np.isfinite(top.placement)):
            steps.append(
                TrajectoryStep(step=step, chosen=top, placed=[(e.ref, p.copy()) for e, p in assembly.parts], error="non-finite placement")
            )
            break
        assembly.add(top.entry, top.placement)
        steps.append(TrajectoryStep(step=step, chosen=top, placed=[(e.ref, p.copy()) for e, p in assembly.parts]))
    return Trajectory(steps=steps)


def cross_category_assemble(
    g_params: dict[str, Tensor],
    h_params: dict[str, Tensor],
    ncfg: NetConfig,
    foreign_index: EmbeddingIndex,
    seed_entry: IndexEntry,
    **kwargs,
) -> Trajectory:
    """auto_assemble against a pool from a different category; it composes."""
    return auto_assemble(g_params, h_params, ncfg, foreign_index, seed_entry, **kwargs)


@dataclass(eq=False)
class TreeNode:
    node_id: int
    parent: int | None
    depth: int
    chosen: Suggestion | None
    assembly: Assembly


def assemble_tree(
    g_params: dict[str, Tensor],
    h_params: dict[str, Tensor],
    ncfg: NetConfig,
    index: EmbeddingIndex,
    seed_entry: IndexEntry,
    depth: int = 3,
    branch: int = 2,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> list[TreeNode]:
    """Branching synthesis: a ``branch``-ary tree of alternatives per step."""
    nodes = [TreeNode(0, None, 0, None, Assembly.seeded(seed_entry))]
    frontier = [0]
    next_id = 1
    for d in range(1, depth + 1):
        new_frontier = []
        for pid in frontier:
            parent = nodes[pid]
            sugg = suggest(g_params, h_params, ncfg, index, parent.assembly, max(branch, 2), mode, rng)
            for s in sugg.items[:branch]:
                child = Assembly(parts=list(parent.assembly.parts))
                child.add(s.entry, s.placement)
                nodes.append(TreeNode(next_id, pid, d, s, child))
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return nodes


def export_trajectory(traj: Trajectory, out_dir, index: EmbeddingIndex | None = None, n_points: int = 1000) -> dict:
    """JSON document (ordered placements) plus per-step cloud dumps.

    Cloud dumps (one xyz text file per step) need the index to look up
    component geometry; they are skipped when ``index`` is None.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if index is not None:
        by_ref = {e.ref: e for e in index.entries}
        for s in traj.steps:
            entries = [(by_ref[r], p) for r, p in s.placed if r in by_ref]
            if not entries:
                continue
            asm = Assembly(parts=[(e, np.asarray(p)) for e, p in entries])
            pts = asm.cloud(n_points).points
            lines = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in pts]
            (out_dir / f"step_{s.step:02d}.xyz").write_text("\n".join(lines) + "\n")
    doc = {
        "format": "partforge-trajectory-v1",
        "steps": [
            {
                "step": s.step,
                "chosen": None
                if s.chosen is None
                else {
                    "shape_id": s.chosen.ref.shape_id,
                    "component_id": s.chosen.ref.component_id,
                    "log_score": s.chosen.log_score,
                    "mode": s.chosen.mode,
                    "placement": [float(v) for v in s.chosen.placement],
                },
                "placed": [
                    {"shape_id": r.shape_id, "component_id": r.component_id, "position": [float(v) for v in p]}
                    for r, p in s.placed
                ],
                "error": s.error,
            }
            for s in traj.steps
        ],
    }
    (out_dir / "trajectory.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc
