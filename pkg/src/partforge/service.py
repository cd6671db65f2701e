"""Stateful local service for interactive assembly sessions.

Wire protocol: JSON over HTTP. Every mutating request carries the current
session ``revision`` (optimistic concurrency: stale writes get 409 and the
client refreshes) and a client ``request_id`` (mutations are idempotent on
retry: the cached response is replayed). Revisions are monotone, including
across undo.

Endpoints
---------
- ``GET  /api/health``
- ``GET  /api/components?category=C``
- ``GET  /api/components/{shape_id}/{component_id}/cloud``
- ``POST /api/sessions``                   {category, seed_component?, rng_seed?, mode?, n_candidates?}
- ``POST /api/sessions/import``            {document}
- ``GET  /api/sessions/{id}``
- ``GET  /api/sessions/{id}/suggestions/wait?since=R&timeout_ms=T`` (long poll)
- ``POST /api/sessions/{id}/choose``       {revision, request_id, candidate_index}
- ``POST /api/sessions/{id}/override``     {revision, request_id, candidate_index, position}
- ``POST /api/sessions/{id}/undo``         {revision, request_id}
- ``POST /api/sessions/{id}/reroll``       {revision, request_id}
- ``GET  /api/sessions/{id}/export``

Point clouds travel as base64 little-endian float32 xyz triplets.
"""

from __future__ import annotations

import base64
import copy
import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .dataset import ComponentRef, Dataset
from .networks import NetConfig, load_checkpoint
from .retrieval import Assembly, EmbeddingIndex, IndexEntry, SuggestionSet, build_index, suggest

MAX_PLACEMENT_RADIUS = 2.0


class ServiceError(Exception):
    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.status = status


@dataclass(eq=False)
class ModelBundle:
    f_params: dict
    g_params: dict
    h_params: dict
    ncfg: NetConfig
    index: EmbeddingIndex


def split_joint_params(params: dict) -> tuple[dict, dict]:
    f = {k: v for k, v in params.items() if k.startswith("f.")}
    g = {k: v for k, v in params.items() if k.startswith("g.")}
    return f, g


def load_models(models_dir, dataset: Dataset, categories: list[str] | None = None) -> dict[str, ModelBundle]:
    """Load checkpoints and build one per-category index over the full pool.

    Fails fast with a diagnostic listing the expected paths.
    """
    models_dir = Path(models_dir)
    joint_path = models_dir / "joint.pfck"
    placement_path = models_dir / "placement.pfck"
    missing = [str(p) for p in (joint_path, placement_path) if not p.exists()]
    if missing:
        raise ServiceError(
            "missing_models",
            "missing model files: " + ", ".join(missing) + " (expected joint.pfck and placement.pfck)",
            status=500,
        )
    joint, ncfg, _ = load_checkpoint(joint_path)
    h_params, ncfg_h, _ = load_checkpoint(placement_path)
    if ncfg_h != ncfg:
        raise ServiceError("config_mismatch", "joint and placement checkpoints disagree on network config", 500)
    f_params, g_params = split_joint_params(joint)
    bundles = {}
    for cat in categories or dataset.categories:
        index = build_index(f_params, ncfg, dataset, categories=[cat])
        bundles[cat] = ModelBundle(f_params, g_params, h_params, ncfg, index)
    return bundles


@dataclass(eq=False)
class SessionState:
    session_id: str
    category: str
    bundle: ModelBundle
    mode: str
    n_candidates: int
    rng: np.random.Generator
    assembly: Assembly = field(default_factory=Assembly)
    suggestions: SuggestionSet = field(default_factory=lambda: SuggestionSet(items=[]))
    revision: int = 0
    undo_stack: list = field(default_factory=list)
    request_cache: dict = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock)
    cond: threading.Condition = None  # type: ignore[assignment]

    def __post_init__(self):
        self.cond = threading.Condition(self.lock)

    # -- state snapshots for undo (placed parts, suggestions, rng state)

    def _snapshot(self):
        return (
            list(self.assembly.parts),
            self.suggestions,
            copy.deepcopy(self.rng.bit_generator.state),
        )

    def _restore(self, snap) -> None:
        parts, suggestions, rng_state = snap
        self.assembly = Assembly(parts=list(parts))
        self.suggestions = suggestions
        self.rng.bit_generator.state = copy.deepcopy(rng_state)

    def _bump(self) -> None:
        self.revision += 1
        self.cond.notify_all()

    def refresh_suggestions(self) -> None:
        b = self.bundle
        self.suggestions = suggest(
            b.g_params,
            b.h_params,
            b.ncfg,
            b.index,
            self.assembly,
            n_candidates=self.n_candidates,
            mode=self.mode,
            rng=self.rng,
        )


class AssemblyService:
    """Session registry over immutable model bundles."""

    def __init__(self, bundles: dict[str, ModelBundle], dataset: Dataset):
        self.bundles = bundles
        self.dataset = dataset
        self.sessions: dict[str, SessionState] = {}
        self._lock = threading.Lock()
        self._next_id = 0

    # -- helpers

    def _session(self, session_id: str) -> SessionState:
        with self._lock:
            s = self.sessions.get(session_id)
        if s is None:
            raise ServiceError("unknown_session", f"no session {session_id!r}", 404)
        return s

    def _check_revision(self, s: SessionState, revision) -> None:
        if revision != s.revision:
            raise ServiceError(
                "conflict", f"stale revision {revision} (current {s.revision}); refresh and retry", 409
            )

    def _entry(self, category: str, ref: ComponentRef) -> IndexEntry:
        for e in self.bundles[category].index.entries:
            if e.ref == ref:
                return e
        raise ServiceError("unknown_component", f"{ref.key()} not in {category} pool", 404)

    # -- session operations

    def session_create(
        self,
        category: str,
        seed_component: ComponentRef | None = None,
        rng_seed: int = 0,
        mode: str = "sample",
        n_candidates: int = 8,
    ) -> SessionState:
        if category not in self.bundles:
            raise ServiceError("unknown_category", f"no models for category {category!r}", 404)
        if mode not in ("sample", "max"):
            raise ServiceError("bad_mode", f"mode must be sample or max, got {mode!r}")
        bundle = self.bundles[category]
        rng = np.random.default_rng(rng_seed)
        if seed_component is None:
            entry = bundle.index.entries[int(rng.integers(len(bundle.index)))]
        else:
            entry = self._entry(category, seed_component)
        with self._lock:
            sid = f"s{self._next_id:06d}"
            self._next_id += 1
        state = SessionState(
            session_id=sid,
            category=category,
            bundle=bundle,
            mode=mode,
            n_candidates=n_candidates,
            rng=rng,
        )
        state.assembly = Assembly.seeded(entry)
        state.refresh_suggestions()
        with self._lock:
            self.sessions[sid] = state
        return state

    def session_choose(self, session_id: str, revision, candidate_index: int, placement=None) -> SessionState:
        s = self._session(session_id)
        with s.lock:
            self._check_revision(s, revision)
            if not (0 <= candidate_index < len(s.suggestions.items)):
                raise ServiceError("bad_candidate", f"candidate_index {candidate_index} out of range")
            chosen = s.suggestions.items[candidate_index]
            if placement is None:
                position = chosen.placement
            else:
                position = np.asarray(placement, dtype=np.float64)
                if position.shape != (3,) or not np.all(np.isfinite(position)):
                    raise ServiceError("bad_placement", "position must be 3 finite numbers")
                if float(np.linalg.norm(position)) > MAX_PLACEMENT_RADIUS:
                    raise ServiceError(
                        "bad_placement", f"position norm exceeds {MAX_PLACEMENT_RADIUS} (unit-radius frame)"
                    )
            s.undo_stack.append(s._snapshot())
            s.assembly.add(chosen.entry, position)
            s.refresh_suggestions()
            s._bump()
            return s

    def session_override_placement(self, session_id: str, revision, candidate_index: int, position) -> SessionState:
        return self.session_choose(session_id, revision, candidate_index, placement=position)

    def session_undo(self, session_id: str, revision) -> SessionState:
        s = self._session(session_id)
        with s.lock:
            self._check_revision(s, revision)
            if not s.undo_stack:
                raise ServiceError("nothing_to_undo", "undo stack is empty")
            s._restore(s.undo_stack.pop())
            s._bump()
            return s

    def session_reroll(self, session_id: str, revision) -> SessionState:
        s = self._session(session_id)
        with s.lock:
            self._check_revision(s, revision)
            s.undo_stack.append(s._snapshot())
            s.refresh_suggestions()
            s._bump()
            return s

    def export_assembly(self, session_id: str) -> tuple[dict, np.ndarray]:
        s = self._session(session_id)
        with s.lock:
            doc = {
                "format": "partforge-assembly-v1",
                "category": s.category,
                "components": [
                    {
                        "shape_id": e.ref.shape_id,
                        "component_id": e.ref.component_id,
                        "position": [float(v) for v in p],
                    }
                    for e, p in s.assembly.parts
                ],
            }
            cloud = np.concatenate([e.cloud_centered + p for e, p in s.assembly.parts])
            return doc, cloud

    def import_assembly(self, doc: dict, rng_seed: int = 0, mode: str = "sample") -> SessionState:
        if doc.get("format") != "partforge-assembly-v1":
            raise ServiceError("bad_document", "unknown assembly document format")
        category = doc.get("category")
        if category not in self.bundles:
            raise ServiceError("unknown_category", f"no models for category {category!r}", 404)
        comps = doc.get("components") or []
        if not comps:
            raise ServiceError("bad_document", "assembly document has no components")
        first = comps[0]
        state = self.session_create(
            category,
            seed_component=ComponentRef(first["shape_id"], first["component_id"]),
            rng_seed=rng_seed,
            mode=mode,
        )
        with state.lock:
            state.assembly = Assembly(
                parts=[
                    (
                        self._entry(category, ComponentRef(c["shape_id"], c["component_id"])),
                        np.asarray(c["position"], dtype=np.float64),
                    )
                    for c in comps
                ]
            )
            state.refresh_suggestions()
            state._bump()
        return state

    def wait_for_suggestions(self, session_id: str, since: int, timeout_s: float) -> SessionState:
        s = self._session(session_id)
        with s.cond:
            s.cond.wait_for(lambda: s.revision > since, timeout=timeout_s)
            return s


# ---------------------------------------------------------------------------
# JSON payloads


def session_payload(s: SessionState) -> dict:
    return {
        "session_id": s.session_id,
        "category": s.category,
        "revision": s.revision,
        "mode": s.mode,
        "can_undo": bool(s.undo_stack),
        "placed": [
            {
                "shape_id": e.ref.shape_id,
                "component_id": e.ref.component_id,
                "position": [float(v) for v in p],
            }
            for e, p in s.assembly.parts
        ],
        "suggestions": [
            {
                "shape_id": it.ref.shape_id,
                "component_id": it.ref.component_id,
                "score": it.score,
                "log_score": it.log_score,
                "mode": it.mode,
                "placement": [float(v) for v in it.placement],
            }
            for it in s.suggestions.items
        ],
    }


def cloud_b64(points: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(points, dtype="<f4").tobytes()).decode()


# ---------------------------------------------------------------------------
# HTTP layer

_ROUTES: list[tuple[str, re.Pattern, str]] = [
    ("GET", re.compile(r"^/api/health$"), "health"),
    ("GET", re.compile(r"^/api/components$"), "list_components"),
    ("GET", re.compile(r"^/api/components/([^/]+)/([^/]+)/cloud$"), "component_cloud"),
    ("POST", re.compile(r"^/api/sessions$"), "create_session"),
    ("POST", re.compile(r"^/api/sessions/import$"), "import_session"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)$"), "get_session"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)/suggestions/wait$"), "wait_suggestions"),
    ("POST", re.compile(r"^/api/sessions/([^/]+)/choose$"), "choose"),
    ("POST", re.compile(r"^/api/sessions/([^/]+)/override$"), "override"),
    ("POST", re.compile(r"^/api/sessions/([^/]+)/undo$"), "undo"),
    ("POST", re.compile(r"^/api/sessions/([^/]+)/reroll$"), "reroll"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)/export$"), "export"),
]

_CONTENT_TYPES = {
    ".html": "text/html",
    ".js": "text/javascript",
    ".mjs": "text/javascript",
    ".css": "text/css",
    ".map": "application/json",
    ".json": "application/json",
}


def make_handler(service: AssemblyService, ui_dir: Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet
            pass

        def _send(self, status: int, body: dict) -> None:
            blob = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(blob)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                raise ServiceError("bad_json", "request body is not valid JSON")

        def _query(self) -> dict:
            from urllib.parse import parse_qs, urlparse

            return {k: v[0] for k, v in parse_qs(urlparse(self.path).query).items()}

        def _dispatch(self, method: str) -> None:
            path = self.path.split("?", 1)[0]
            try:
                for m, pattern, name in _ROUTES:
                    if m != method:
                        continue
                    match = pattern.match(path)
                    if match:
                        getattr(self, f"h_{name}")(*match.groups())
                        return
                if method == "GET" and ui_dir is not None:
                    self._serve_static(path)
                    return
                raise ServiceError("not_found", f"no route for {method} {path}", 404)
            except ServiceError as e:
                self._send(e.status, {"error": {"code": e.code, "message": str(e)}})
            except Exception as e:  # programming error: visible but contained
                self._send(500, {"error": {"code": "internal", "message": f"{type(e).__name__}: {e}"}})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def _serve_static(self, path: str) -> None:
            rel = path.lstrip("/") or "index.html"
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                raise ServiceError("not_found", f"no file {rel}", 404)
            blob = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        # -- handlers

        def h_health(self):
            self._send(
                200,
                {
                    "status": "ok",
                    "categories": sorted(service.bundles),
                    "n_sessions": len(service.sessions),
                },
            )

        def h_list_components(self):
            cat = self._query().get("category")
            cats = [cat] if cat else sorted(service.bundles)
            comps = []
            for c in cats:
                bundle = service.bundles.get(c)
                if bundle is None:
                    raise ServiceError("unknown_category", f"no models for category {c!r}", 404)
                for e in bundle.index.entries:
                    comps.append(
                        {
                            "shape_id": e.ref.shape_id,
                            "component_id": e.ref.component_id,
                            "category": c,
                            "surface_area": float(e.surface_area),
                        }
                    )
            self._send(200, {"components": comps})

        def h_component_cloud(self, shape_id, component_id):
            ref = ComponentRef(shape_id, component_id)
            for bundle in service.bundles.values():
                for e in bundle.index.entries:
                    if e.ref == ref:
                        self._send(
                            200,
                            {
                                "n": len(e.cloud_centered),
                                "dtype": "f32le",
                                "points_b64": cloud_b64(e.cloud_centered),
                                "centroid": [float(v) for v in e.centroid],
                            },
                        )
                        return
            raise ServiceError("unknown_component", f"{ref.key()} not found", 404)

        def h_create_session(self):
            body = self._body()
            seed = body.get("seed_component")
            ref = ComponentRef(seed["shape_id"], seed["component_id"]) if seed else None
            s = service.session_create(
                category=body.get("category", ""),
                seed_component=ref,
                rng_seed=int(body.get("rng_seed", 0)),
                mode=body.get("mode", "sample"),
                n_candidates=int(body.get("n_candidates", 8)),
            )
            self._send(200, {"session": session_payload(s)})

        def h_import_session(self):
            body = self._body()
            s = service.import_assembly(
                body.get("document") or {},
                rng_seed=int(body.get("rng_seed", 0)),
                mode=body.get("mode", "sample"),
            )
            self._send(200, {"session": session_payload(s)})

        def h_get_session(self, sid):
            s = service._session(sid)
            with s.lock:
                self._send(200, {"session": session_payload(s)})

        def h_wait_suggestions(self, sid):
            q = self._query()
            since = int(q.get("since", -1))
            timeout_s = min(float(q.get("timeout_ms", 10000)) / 1000.0, 30.0)
            s = service.wait_for_suggestions(sid, since, timeout_s)
            with s.lock:
                self._send(200, {"session": session_payload(s)})

        def _mutate(self, sid, fn):
            body = self._body()
            request_id = body.get("request_id")
            s = service._session(sid)
            if request_id is not None:
                with s.lock:
                    cached = s.request_cache.get(request_id)
                if cached is not None:
                    self._send(*cached)
                    return
            try:
                out = fn(s, body)
                with s.lock:
                    payload = (200, {"session": session_payload(out)})
            except ServiceError as e:
                # conflicts are not cached: the client should retry fresh
                if e.status != 409 and request_id is not None:
                    with s.lock:
                        s.request_cache[request_id] = (e.status, {"error": {"code": e.code, "message": str(e)}})
                raise
            if request_id is not None:
                with s.lock:
                    s.request_cache[request_id] = payload
            self._send(*payload)

        def h_choose(self, sid):
            self._mutate(
                sid,
                lambda s, b: service.session_choose(sid, b.get("revision"), int(b.get("candidate_index", -1))),
            )

        def h_override(self, sid):
            self._mutate(
                sid,
                lambda s, b: service.session_override_placement(
                    sid, b.get("revision"), int(b.get("candidate_index", -1)), b.get("position")
                ),
            )

        def h_undo(self, sid):
            self._mutate(sid, lambda s, b: service.session_undo(sid, b.get("revision")))

        def h_reroll(self, sid):
            self._mutate(sid, lambda s, b: service.session_reroll(sid, b.get("revision")))

        def h_export(self, sid):
            doc, cloud = service.export_assembly(sid)
            self._send(200, {"document": doc, "cloud_b64": cloud_b64(cloud), "n": len(cloud)})

    return Handler


def serve(service: AssemblyService, port: int, ui_dir=None) -> ThreadingHTTPServer:
    """Start the HTTP server (returns it; caller owns serve_forever/shutdown)."""
    handler = make_handler(service, Path(ui_dir) if ui_dir else None)
    httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
    return httpd
