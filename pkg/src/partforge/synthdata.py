"""Procedural synthetic furniture corpus: chairs and tables from boxes and
cylinders, with known part labels and two style families per category.

The geometry is laid out so the preprocessing thresholds behave
deterministically: parts that should be in contact meet flush, face on
face, which gives the sampled clouds a 2-D region of near-coincident
points (robust at 1000 samples, unlike thin crossing curves); parts that
should not be in contact keep a clearance of at least ~0.13 units (the
proximity threshold is 0.05 of the shape radius, roughly 1.3 units
here). Stretcher bars instead pierce through their legs by
``CONTACT_OVERLAP`` like through-tenons. Repeated parts
(legs, slats, arms) are exact translated copies so the duplicate-hash merge
groups them; a few shapes carry a deliberately tiny knob (absorbed by the
size rule) or a near-coincident duplicated cushion (merged by the overlap
rule). A small fraction of shapes is degenerate on purpose - one component,
or more than eight distinct components - to exercise the discard path.
"""

from __future__ import annotations

import numpy as np

from .dataset import RawComponent, RawShape, save_raw_shape, stable_seed
from .geometry import TriMesh

CONTACT_OVERLAP = 0.06

CATEGORIES = ("chair", "table")


def box(center, size) -> TriMesh:
    cx, cy, cz = center
    sx, sy, sz = (s / 2.0 for s in size)
    verts = np.array(
        [
            [cx - sx, cy - sy, cz - sz],
            [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz],
            [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz],
            [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz],
            [cx - sx, cy + sy, cz + sz],
        ]
    )
    tris = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # front
            [2, 3, 7], [2, 7, 6],  # back
            [1, 2, 6], [1, 6, 5],  # right
            [3, 0, 4], [3, 4, 7],  # left
        ]
    )
    return TriMesh(verts, tris)


def cylinder(center_xy, z0, z1, radius, segments: int = 14) -> TriMesh:
    cx, cy = center_xy
    angles = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, float(z0))])
    top = np.column_stack([ring, np.full(segments, float(z1))])
    centers = np.array([[cx, cy, z0], [cx, cy, z1]])
    verts = np.concatenate([bottom, top, centers])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append([i, j, segments + i])
        tris.append([j, segments + j, segments + i])
        tris.append([j, i, cb])
        tris.append([segments + i, segments + j, ct])
    return TriMesh(verts, np.array(tris))


def translated(mesh: TriMesh, offset) -> TriMesh:
    return TriMesh(mesh.vertices + np.asarray(offset, dtype=np.float64), mesh.triangles)


def _chair(rng: np.random.Generator, shape_id: str) -> RawShape:
    boxy = rng.random() < 0.5
    style = "chair/boxy" if boxy else "chair/round"
    w = rng.uniform(0.95, 1.35)
    d = rng.uniform(0.9, 1.2)
    t = rng.uniform(0.14, 0.2)
    h_seat = rng.uniform(0.85, 1.05)
    h_back = rng.uniform(0.8, 1.1)
    t_back = rng.uniform(0.1, 0.12)
    inset = 0.32
    comps: list[RawComponent] = []
    labels = {style}

    if boxy:
        comps.append(RawComponent("seat", box((0, 0, h_seat - t / 2), (w, d, t)), "seat"))
    else:
        r_seat = min(w, d) / 2
        comps.append(RawComponent("seat", cylinder((0, 0), h_seat - t, h_seat, r_seat, 18), "seat"))

    # four identical legs (translated copies of one prototype), flush under the seat
    leg_top = h_seat - t
    if boxy:
        s_leg = rng.uniform(0.1, 0.14)
        proto = box((0, 0, leg_top / 2), (s_leg, s_leg, leg_top))
    else:
        r_leg = rng.uniform(0.055, 0.08)
        proto = cylinder((0, 0), 0.0, leg_top, r_leg, 12)
    lx = w / 2 - inset if boxy else min(w, d) / 2 - inset
    ly = d / 2 - inset if boxy else min(w, d) / 2 - inset
    lx, ly = max(lx, 0.12), max(ly, 0.12)
    for name, sx, sy in (("legFL", -1, 1), ("legFR", 1, 1), ("legBL", -1, -1), ("legBR", 1, -1)):
        comps.append(RawComponent(name, translated(proto, (sx * lx, sy * ly, 0.0)), "leg"))

    back_y = -d / 2 + t_back / 2
    back_z0 = h_seat
    slatted = boxy and rng.random() < 0.4
    if slatted:
        labels.add("chair/slatted")
        n_slats = int(rng.integers(3, 5))
        rail_h = rng.uniform(0.12, 0.16)
        rail_z0 = back_z0 + h_back - rail_h
        slat_w = rng.uniform(0.1, 0.14)
        slat = box((0, back_y, (back_z0 + rail_z0) / 2), (slat_w, t_back, rail_z0 - back_z0))
        span = w * 0.72
        xs = np.linspace(-span / 2, span / 2, n_slats)
        for i, x in enumerate(xs):
            comps.append(RawComponent(f"slat{i}", translated(slat, (float(x), 0.0, 0.0)), "back"))
        comps.append(RawComponent("rail", box((0, back_y, rail_z0 + rail_h / 2), (w * 0.8, t_back, rail_h)), "back"))
    else:
        bw = w * rng.uniform(0.75, 0.95) if boxy else w * rng.uniform(0.6, 0.75)
        comps.append(
            RawComponent("back", box((0, back_y, back_z0 + h_back / 2), (bw, t_back, h_back)), "back")
        )

    if boxy and rng.random() < 0.5:
        # arms need the rectangular seat: on the round family they would
        # overhang the disc and lose their contact region
        labels.add("chair/armchair")
        arm_h = rng.uniform(0.25, 0.35)
        arm_w = 0.1
        arm_len = d - t_back - 0.3
        arm = box((0, t_back / 2, h_seat + arm_h / 2), (arm_w, arm_len, arm_h))
        ax = w / 2 - arm_w / 2 - 0.02
        comps.append(RawComponent("armL", translated(arm, (-ax, 0.0, 0.0)), "arm"))
        comps.append(RawComponent("armR", translated(arm, (ax, 0.0, 0.0)), "arm"))
    elif not boxy and h_back > 0.95:
        labels.add("chair/highback")

    if rng.random() < 0.2:
        # tiny unlabeled knob under the seat; the size rule absorbs it
        # small enough that even the inflated tied-eigenvalue PCA diagonal
        # stays under the size threshold
        comps.append(RawComponent("knob", box((0, 0.1, h_seat - t - 0.025), (0.08, 0.08, 0.05)), None))

    if rng.random() < 0.15:
        # near-coincident duplicated cushion; the overlap rule merges the pair
        cush = box((0, 0.05, h_seat + 0.05), (w * 0.44, d * 0.42, 0.1))
        comps.append(RawComponent("cushion", cush, "seat"))
        comps.append(RawComponent("cushion_dup", translated(cush, (0.008, 0.0, 0.0)), "seat"))

    return RawShape(shape_id, "chair", tuple(comps), frozenset(labels))


def _table(rng: np.random.Generator, shape_id: str) -> RawShape:
    boxy = rng.random() < 0.5
    style = "table/boxy" if boxy else "table/round"
    h = rng.uniform(0.95, 1.15)
    t = rng.uniform(0.1, 0.15)
    comps: list[RawComponent] = []
    labels = {style}

    if boxy:
        w = rng.uniform(1.4, 2.0)
        d = rng.uniform(0.9, 1.4)
        comps.append(RawComponent("top", box((0, 0, h - t / 2), (w, d, t)), "top"))
        s_leg = rng.uniform(0.1, 0.16)
        inset = 0.32
        leg_top = h - t
        proto = box((0, 0, leg_top / 2), (s_leg, s_leg, leg_top))
        lx, ly = w / 2 - inset, d / 2 - inset
        for name, sx, sy in (("legFL", -1, 1), ("legFR", 1, 1), ("legBL", -1, -1), ("legBR", 1, -1)):
            comps.append(RawComponent(name, translated(proto, (sx * lx, sy * ly, 0.0)), "leg"))
        if rng.random() < 0.5:
            labels.add("table/stretchered")
            z = rng.uniform(0.25, 0.4)
            bar_len = 2 * lx + s_leg + 2 * CONTACT_OVERLAP
            bar = box((0, 0, z), (bar_len, 0.08, 0.08))
            comps.append(RawComponent("stretcherF", translated(bar, (0.0, ly, 0.0)), "stretcher"))
            comps.append(RawComponent("stretcherB", translated(bar, (0.0, -ly, 0.0)), "stretcher"))
    else:
        r_top = rng.uniform(0.6, 0.9)
        comps.append(RawComponent("top", cylinder((0, 0), h - t, h, r_top, 18), "top"))
        r_ped = rng.uniform(0.09, 0.13)
        base_h = 0.07
        comps.append(RawComponent("pedestal", cylinder((0, 0), base_h, h - t, r_ped, 12), "leg"))
        comps.append(RawComponent("base", cylinder((0, 0), 0.0, base_h, rng.uniform(0.32, 0.45), 16), "leg"))

    if rng.random() < 0.15:
        comps.append(RawComponent("knob", box((0.2, 0, h - t - 0.025), (0.08, 0.08, 0.05)), None))

    return RawShape(shape_id, "table", tuple(comps), frozenset(labels))


def _plank(rng: np.random.Generator, shape_id: str, category: str) -> RawShape:
    # single-component shape; the export step must discard it
    w = rng.uniform(1.0, 2.0)
    return RawShape(
        shape_id,
        category,
        (RawComponent("plank", box((0, 0, 0.5), (w, rng.uniform(0.5, 1.0), 0.1)), None),),
        frozenset({f"{category}/degenerate"}),
    )


def _shelf(rng: np.random.Generator, shape_id: str, category: str) -> RawShape:
    # 2 sides + 10 distinct slats: stays above the component cap, so discarded
    comps = [
        RawComponent("sideL", box((-0.8, 0, 0.95), (0.08, 0.62, 1.9)), None),
        RawComponent("sideR", box((0.8, 0, 0.95), (0.08, 0.62, 1.9)), None),
    ]
    for i in range(10):
        th = 0.1 + 0.006 * i  # unique sizes defeat the duplicate hash
        z = 0.22 + 0.17 * i
        comps.append(RawComponent(f"slab{i}", box((0, 0, z), (1.6 + 2 * CONTACT_OVERLAP, 0.55 + 0.004 * i, th)), None))
    return RawShape(shape_id, category, tuple(comps), frozenset({f"{category}/degenerate"}))


def generate_raw_shapes(category: str, count: int, seed: int) -> list[RawShape]:
    """Deterministic corpus slice for one category."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    shapes = []
    for i in range(count):
        shape_id = f"{category}_{i:04d}"
        rng = np.random.default_rng(stable_seed(seed, category, i, "shape"))
        roll = rng.random()
        if roll < 0.02:
            shapes.append(_plank(rng, shape_id, category))
        elif roll < 0.04:
            shapes.append(_shelf(rng, shape_id, category))
        elif category == "chair":
            shapes.append(_chair(rng, shape_id))
        else:
            shapes.append(_table(rng, shape_id))
    return shapes


def generate_corpus(out_dir, shapes_per_category: int = 200, seed: int = 0, categories=CATEGORIES) -> list[RawShape]:
    """Generate and write the corpus; returns the shapes."""
    shapes = []
    for cat in categories:
        shapes.extend(generate_raw_shapes(cat, shapes_per_category, seed))
    for shape in shapes:
        save_raw_shape(shape, f"{out_dir}/{shape.shape_id}")
    return shapes
