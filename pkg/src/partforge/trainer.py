"""Triplet sampling from contact graphs and the two training loops.

A triplet is (X, Y, Z): X is a random connected subgraph of one shape's
contact graph resampled as a single cloud in the shape's object frame, Y a
component adjacent to the subgraph (positive), Z a non-adjacent component,
possibly from another shape (negative). The subgraph size r is drawn from
[1, n-1]: growing to n would leave no adjacent positive.

X is resampled from the union of the subgraph's surfaces: component clouds
are already area-uniform on each part, so drawing a multinomial split by
surface area and subsampling each part's stored cloud without replacement
reproduces area-uniform sampling of the union (larger parts dominate).

The negative pool mixes same-shape non-adjacent components and components
of other shapes at ``negative_same_shape_ratio`` when both exist.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .dataset import ComponentRef, Dataset, GraphView
from .losses import contrastive_loss_t, gmm_nll_t, placement_loss_t
from .networks import (
    NetConfig,
    embed_batch,
    init_embedding,
    init_placement,
    init_retrieval,
    mixture_batch,
    place_batch,
    save_checkpoint,
)


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch: int = 32
    lr0: float = 1e-3
    decay: float = 0.8
    decay_steps: int = 50000
    margin: float = 10.0
    seed: int = 0
    max_steps: int | None = None  # optional global step cap
    checkpoint_every: int = 50  # epochs
    negative_same_shape_ratio: float = 0.5

    def __post_init__(self):
        if min(self.epochs, self.batch, self.checkpoint_every) <= 0 or self.lr0 <= 0 or self.decay <= 0:
            raise TrainerError("TrainConfig fields must be positive")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """lr(t) = lr0 * decay^(t / decay_steps), continuous exponent."""
    return cfg.lr0 * cfg.decay ** (step / cfg.decay_steps)


@dataclass
class TripletStructure:
    graph_index: int
    subgraph: tuple[int, ...]
    positive: int
    negative: tuple[int, int]  # (graph index, component index); same graph allowed


@dataclass(eq=False)
class TrainingTriplet:
    x_points: np.ndarray  # (N, 3) object frame
    y_points: np.ndarray  # (N, 3) centered
    z_points: np.ndarray  # (N, 3) centered
    y_target_centroid: np.ndarray  # (3,)
    shape_id: str
    subgraph: tuple[int, ...]
    y_ref: ComponentRef
    z_ref: ComponentRef


def build_assembly_cloud(parts, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Resample a union cloud from (centered cloud, centroid, area) parts.

    One part passes its cloud through unchanged (translated); several parts
    are mixed multinomially by surface area, each contributing a without-
    replacement subsample of its own area-uniform cloud.
    """
    if not parts:
        raise TrainerError("assembly with no parts")
    if len(parts) == 1:
        cloud, centroid, _ = parts[0]
        return cloud + centroid
    areas = np.array([max(a, 0.0) for _, _, a in parts])
    if areas.sum() <= 0:
        raise TrainerError("assembly parts have zero total area")
    counts = rng.multinomial(n_points, areas / areas.sum())
    pieces = []
    for (cloud, centroid, _), c in zip(parts, counts):
        if c == 0:
            continue
        idx = rng.choice(len(cloud), size=int(c), replace=False)
        pieces.append(cloud[idx] + centroid)
    return np.concatenate(pieces)


class TripletSampler:
    """Draws triplets over a fixed list of contact graphs."""

    MAX_ATTEMPTS = 100

    def __init__(self, graphs: list[GraphView], n_points: int, negative_same_shape_ratio: float = 0.5):
        if not graphs:
            raise TrainerError("no graphs to sample from")
        self.graphs = graphs
        self.n_points = n_points
        self.ratio = negative_same_shape_ratio
        self.adjacency = [g.adjacency() for g in graphs]
        self._sizes = np.array([len(g.components) for g in graphs])
        self._cum = np.cumsum(self._sizes)

    def draw_structure(self, gi: int, rng: np.random.Generator) -> TripletStructure:
        g = self.graphs[gi]
        adj = self.adjacency[gi]
        n = len(g.components)
        if n < 2:
            raise TrainerError(f"{g.shape_id}: graph needs >= 2 nodes")
        for _ in range(self.MAX_ATTEMPTS):
            r = int(rng.integers(1, n))  # [1, n-1]
            nodes = {int(rng.integers(n))}
            while len(nodes) < r:
                frontier = sorted({j for i in nodes for j in adj[i]} - nodes)
                if not frontier:
                    break
                nodes.add(frontier[int(rng.integers(len(frontier)))])
            if len(nodes) < r:
                continue
            positives = sorted({j for i in nodes for j in adj[i]} - nodes)
            if not positives:
                continue
            y = positives[int(rng.integers(len(positives)))]
            z = self._draw_negative(gi, nodes, set(positives), rng)
            if z is None:
                continue
            return TripletStructure(gi, tuple(sorted(nodes)), y, z)
        raise TrainerError(f"{g.shape_id}: no valid triplet after {self.MAX_ATTEMPTS} attempts")

    def _draw_negative(self, gi, members: set, adjacent: set, rng) -> tuple[int, int] | None:
        n = len(self.graphs[gi].components)
        same_pool = [k for k in range(n) if k not in members and k not in adjacent]
        others_total = int(self._cum[-1] - self._sizes[gi])
        if not same_pool and others_total == 0:
            return None
        use_same = bool(same_pool) and (others_total == 0 or rng.random() < self.ratio)
        if use_same:
            return (gi, same_pool[int(rng.integers(len(same_pool)))])
        # uniform over all components of all other graphs
        t = int(rng.integers(others_total))
        for gj in range(len(self.graphs)):
            if gj == gi:
                continue
            if t < self._sizes[gj]:
                return (gj, t)
            t -= int(self._sizes[gj])
        raise AssertionError("unreachable")

    def materialize(self, s: TripletStructure, rng: np.random.Generator) -> TrainingTriplet:
        g = self.graphs[s.graph_index]
        parts = [
            (g.components[i].cloud_centered.points, g.components[i].centroid, g.components[i].surface_area)
            for i in s.subgraph
        ]
        x = build_assembly_cloud(parts, self.n_points, rng)
        y_comp = g.components[s.positive]
        zg, zc = s.negative
        z_comp = self.graphs[zg].components[zc]
        return TrainingTriplet(
            x_points=x,
            y_points=y_comp.cloud_centered.points,
            z_points=z_comp.cloud_centered.points,
            y_target_centroid=y_comp.centroid,
            shape_id=g.shape_id,
            subgraph=s.subgraph,
            y_ref=y_comp.ref,
            z_ref=z_comp.ref,
        )

    def sample(self, gi: int, rng: np.random.Generator) -> TrainingTriplet:
        return self.materialize(self.draw_structure(gi, rng), rng)

    def validate_structure(self, s: TripletStructure) -> None:
        """Asserts the TrainingTriplet invariants; used by tests and debug runs."""
        adj = self.adjacency[s.graph_index]
        members = set(s.subgraph)
        # connectivity of the subgraph
        start = s.subgraph[0]
        seen = {start}
        stack = [start]
        while stack:
            i = stack.pop()
            for j in adj[i]:
                if j in members and j not in seen:
                    seen.add(j)
                    stack.append(j)
        assert seen == members, "subgraph not connected"
        adjacent = {j for i in members for j in adj[i]} - members
        assert s.positive in adjacent, "positive not adjacent to subgraph"
        assert s.positive not in members, "positive inside subgraph"
        zg, zc = s.negative
        if zg == s.graph_index:
            assert zc not in members and zc not in adjacent, "negative adjacent to subgraph"


def sample_triplet(
    graph: GraphView,
    all_graphs: list[GraphView],
    rng: np.random.Generator,
    n_points: int = 1000,
    negative_same_shape_ratio: float = 0.5,
) -> TrainingTriplet:
    """One-shot triplet draw (training uses a persistent TripletSampler)."""
    graphs = list(all_graphs)
    if not any(g is graph for g in graphs):
        graphs = [graph] + graphs
    gi = next(i for i, g in enumerate(graphs) if g is graph)
    sampler = TripletSampler(graphs, n_points, negative_same_shape_ratio)
    return sampler.sample(gi, rng)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]
    aborted: bool = False
    epoch_summaries: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [rec["loss"] for rec in self.log]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.data = snap[k].copy()


def _write_logs(out_dir, name: str, result: TrainResult, wall_times: list[float]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # deterministic loss log: no wall-clock fields
    with open(out_dir / f"losses_{name}.jsonl", "w") as f:
        for rec in result.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out_dir / f"timing_{name}.txt", "w") as f:
        for epoch, dt in enumerate(wall_times):
            f.write(f"epoch {epoch} wall {dt:.3f}s\n")


def _run_training(
    kind: str,
    dataset: Dataset,
    tcfg: TrainConfig,
    ncfg: NetConfig,
    params: dict[str, Tensor],
    step_fn,
    out_dir=None,
    categories=None,
) -> TrainResult:
    graphs = dataset.graphs("train")
    if categories is not None:
        graphs = [g for g in graphs if g.category in categories]
    if not graphs:
        raise TrainerError("empty train split")
    sampler = TripletSampler(graphs, ncfg.n_points, tcfg.negative_same_shape_ratio)
    ss = np.random.SeedSequence(tcfg.seed)
    _, order_ss, trip_ss = ss.spawn(3)
    order_rng = np.random.default_rng(order_ss)
    trip_rng = np.random.default_rng(trip_ss)

    leaves = list(params.values())
    adam = AdamState(params)
    result = TrainResult(params=params, log=[])
    last_good = _snapshot(params)
    best = (np.inf, last_good)
    wall_times: list[float] = []
    step = 0
    stop = False
    for epoch in range(tcfg.epochs):
        t0 = time.monotonic()
        order = order_rng.permutation(len(graphs))
        epoch_losses = []
        for lo in range(0, len(order), tcfg.batch):
            batch = [sampler.sample(int(gi), trip_rng) for gi in order[lo : lo + tcfg.batch]]
            lr = learning_rate(step, tcfg)
            for leaf in leaves:
                leaf.zero_grad()
            with Tape() as tape:
                loss_t, extra = step_fn(batch)
            loss = float(loss_t.data)
            if not np.isfinite(loss):
                _restore(params, last_good)
                result.aborted = True
                stop = True
                break
            grads = ad.backward(tape, loss_t, leaves=leaves)
            ad.adam_step(params, grads, adam, lr)
            rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss}
            rec.update(extra)
            result.log.append(rec)
            epoch_losses.append(loss)
            step += 1
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                stop = True
                break
        wall_times.append(time.monotonic() - t0)
        if epoch_losses:
            mean_loss = float(np.mean(epoch_losses))
            result.epoch_summaries.append({"epoch": epoch, "mean_loss": mean_loss})
            if mean_loss < best[0]:
                best = (mean_loss, _snapshot(params))
        if not result.aborted and (epoch + 1) % tcfg.checkpoint_every == 0:
            last_good = _snapshot(params)
        if stop:
            break
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {
            "train_config": {k: getattr(tcfg, k) for k in TrainConfig.__dataclass_fields__},
            "aborted": result.aborted,
            "dataset_seed": dataset.config.seed,
        }
        save_checkpoint(out_dir / f"{kind}.pfck", kind, ncfg, params, extra=extra)
        best_tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in best[1].items()}
        save_checkpoint(out_dir / f"{kind}_best.pfck", kind, ncfg, best_tensors, extra=extra)
        _write_logs(out_dir, kind, result, wall_times)
    return result


def train_joint(
    dataset: Dataset,
    tcfg: TrainConfig,
    ncfg: NetConfig,
    out_dir=None,
    categories=None,
) -> tuple[dict[str, Tensor], dict[str, Tensor], TrainResult]:
    """Jointly train the embedding f and retrieval g on contrastive triplets.

    The Y and Z branches share f's parameters; X goes through g. Loss is
    the batch mean of max(margin + E(X,Y) - E(X,Z), 0).
    """
    init_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(1)[0])
    f_params = init_embedding(ncfg, init_rng)
    g_params = init_retrieval(ncfg, init_rng)
    params = {**f_params, **g_params}
    b_margin = tcfg.margin

    def step_fn(batch):
        b = len(batch)
        x = Tensor(np.stack([t.x_points for t in batch]))
        yz = Tensor(np.stack([t.y_points for t in batch] + [t.z_points for t in batch]))
        phi, mu, sigma = mixture_batch(g_params, ncfg, x)
        emb = embed_batch(f_params, ncfg, yz)
        e_pos = gmm_nll_t(phi, mu, sigma, ad.index_select(emb, 0, list(range(b))))
        e_neg = gmm_nll_t(phi, mu, sigma, ad.index_select(emb, 0, list(range(b, 2 * b))))
        loss = ad.tmean(contrastive_loss_t(e_pos, e_neg, b_margin))
        hinge_active = float(np.mean(b_margin + e_pos.data - e_neg.data > 0))
        return loss, {"hinge_active": hinge_active}

    result = _run_training("joint", dataset, tcfg, ncfg, params, step_fn, out_dir, categories)
    return f_params, g_params, result


def train_placement(
    dataset: Dataset,
    tcfg: TrainConfig,
    ncfg: NetConfig,
    out_dir=None,
    categories=None,
) -> tuple[dict[str, Tensor], TrainResult]:
    """Train the placement regressor h on the same (X, Y) sample stream."""
    init_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(2)[1])
    h_params = init_placement(ncfg, init_rng)

    def step_fn(batch):
        x = Tensor(np.stack([t.x_points for t in batch]))
        y = Tensor(np.stack([t.y_points for t in batch]))
        target = Tensor(np.stack([t.y_target_centroid for t in batch]))
        pred = place_batch(h_params, ncfg, x, y)
        sq = placement_loss_t(pred, target)
        loss = ad.tmean(sq)
        mean_err = float(np.mean(np.sqrt(sq.data)))
        return loss, {"mean_error": mean_err}

    result = _run_training("placement", dataset, tcfg, ncfg, h_params, step_fn, out_dir, categories)
    return h_params, result
