"""The three networks: embedding f, retrieval g (MDN head), placement h.

All encoders are PointNet-style: a shared per-point MLP, channelwise max
pool over points, then a global MLP. Permutation invariance is exact
because every per-point row is transformed independently and the pool is a
max. Spatial transformer blocks are intentionally absent; inputs are
assumed pre-aligned.

Heads on the retrieval feature: softmax for mixture weights, linear for
means, exponential for stds with a hard clamp at ``sigma_cap`` (the clamp
has zero gradient above the cap).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Frame, PointCloud


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Layer sizes are configuration; defaults are the canonical PointNet sizes."""

    point_mlp: tuple[int, ...] = (64, 64, 64, 128, 1024)
    global_mlp: tuple[int, ...] = (512, 256)
    embed_dim: int = 50
    n_modes: int = 8
    sigma_cap: float = 0.05
    n_points: int = 1000
    placement_mlp: tuple[int, ...] = (512, 256)

    @property
    def feature_dim(self) -> int:
        return self.global_mlp[-1] if self.global_mlp else self.point_mlp[-1]

    @classmethod
    def small(cls, **overrides) -> "NetConfig":
        """Reduced profile for desk-scale corpora and tests."""
        base = dict(
            point_mlp=(32, 64, 128),
            global_mlp=(64,),
            placement_mlp=(64, 32),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("point_mlp", "global_mlp", "placement_mlp"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal Gaussian mixture over the embedding space."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    stds: np.ndarray  # (K, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or m.shape[0] != w.shape[0] or s.shape != m.shape:
            raise NetworkError(f"inconsistent mixture shapes {w.shape}, {m.shape}, {s.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise NetworkError("mixture weights must be nonnegative and sum to one")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise NetworkError("mixture stds must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def n_modes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_density(self, coords: np.ndarray) -> np.ndarray:
        """Stable log density at one (D,) or many (n, D) coordinates."""
        y = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        diff = y[:, None, :] - self.means[None, :, :]
        quad = (diff * diff / (2.0 * self.stds**2)[None]).sum(axis=2)
        logdet = np.log(self.stds).sum(axis=1)
        d = self.dim
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        expo = logw[None, :] - quad - logdet[None, :] - 0.5 * d * np.log(2.0 * np.pi)
        m = expo.max(axis=1, keepdims=True)
        out = m[:, 0] + np.log(np.exp(expo - m).sum(axis=1))
        return out if np.asarray(coords).ndim == 2 else out[0]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n coordinates; returns (coords (n, D), mode indices (n,))."""
        modes = rng.choice(self.n_modes, size=n, p=self.weights / self.weights.sum())
        eps = rng.standard_normal((n, self.dim))
        return self.means[modes] + self.stds[modes] * eps, modes


# ---------------------------------------------------------------------------
# parameter initialization: He-uniform weights, zero biases


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_linear(params: dict, name: str, fan_in: int, fan_out: int, rng) -> None:
    params[f"{name}.w"] = Tensor(_he_uniform(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def _init_encoder(params: dict, prefix: str, cfg: NetConfig, rng) -> None:
    fan = 3
    for i, width in enumerate(cfg.point_mlp):
        _init_linear(params, f"{prefix}.point{i}", fan, width, rng)
        fan = width
    for i, width in enumerate(cfg.global_mlp):
        _init_linear(params, f"{prefix}.global{i}", fan, width, rng)
        fan = width


def init_embedding(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_encoder(params, "f.enc", cfg, rng)
    _init_linear(params, "f.out", cfg.feature_dim, cfg.embed_dim, rng)
    return params


def init_retrieval(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_encoder(params, "g.enc", cfg, rng)
    kd = cfg.n_modes * cfg.embed_dim
    _init_linear(params, "g.phi", cfg.feature_dim, cfg.n_modes, rng)
    _init_linear(params, "g.mu", cfg.feature_dim, kd, rng)
    _init_linear(params, "g.sigma", cfg.feature_dim, kd, rng)
    return params


def init_placement(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_encoder(params, "h.encx", cfg, rng)
    _init_encoder(params, "h.ency", cfg, rng)
    fan = 2 * cfg.feature_dim
    for i, width in enumerate(cfg.placement_mlp):
        _init_linear(params, f"h.mlp{i}", fan, width, rng)
        fan = width
    _init_linear(params, "h.out", fan, 3, rng)
    return params


# ---------------------------------------------------------------------------
# forward passes (batched, tape-recorded when a Tape is active)


def encode_batch(params: dict[str, Tensor], prefix: str, pts: Tensor, cfg: NetConfig) -> Tensor:
    """(B, N, 3) points -> (B, feature_dim) permutation-invariant features."""
    b, n, _ = pts.shape
    x = ad.reshape(pts, (b * n, 3))
    for i in range(len(cfg.point_mlp)):
        x = ad.relu(ad.affine(x, params[f"{prefix}.point{i}.w"], params[f"{prefix}.point{i}.b"]))
    x = ad.reshape(x, (b, n, cfg.point_mlp[-1]))
    g = ad.max_over_axis(x, 1)
    for i in range(len(cfg.global_mlp)):
        g = ad.relu(ad.affine(g, params[f"{prefix}.global{i}.w"], params[f"{prefix}.global{i}.b"]))
    return g


def embed_batch(f_params: dict[str, Tensor], cfg: NetConfig, pts: Tensor) -> Tensor:
    feat = encode_batch(f_params, "f.enc", pts, cfg)
    return ad.affine(feat, f_params["f.out.w"], f_params["f.out.b"])


def mixture_batch(g_params: dict[str, Tensor], cfg: NetConfig, pts: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (phi (B, K), mu (B, K, D), sigma (B, K, D)) with sigma in (0, cap]."""
    b = pts.shape[0]
    k, d = cfg.n_modes, cfg.embed_dim
    feat = encode_batch(g_params, "g.enc", pts, cfg)
    phi = ad.softmax(ad.affine(feat, g_params["g.phi.w"], g_params["g.phi.b"]), axis=-1)
    mu = ad.reshape(ad.affine(feat, g_params["g.mu.w"], g_params["g.mu.b"]), (b, k, d))
    raw = ad.exp(ad.affine(feat, g_params["g.sigma.w"], g_params["g.sigma.b"]))
    # min(raw, cap) = cap - relu(cap - raw); zero gradient above the cap
    capped = ad.add(ad.mul(ad.relu(ad.add(ad.mul(raw, -1.0), cfg.sigma_cap)), -1.0), cfg.sigma_cap)
    sigma = ad.reshape(capped, (b, k, d))
    return phi, mu, sigma


def place_batch(h_params: dict[str, Tensor], cfg: NetConfig, assembly_pts: Tensor, component_pts: Tensor) -> Tensor:
    fx = encode_batch(h_params, "h.encx", assembly_pts, cfg)
    fy = encode_batch(h_params, "h.ency", component_pts, cfg)
    z = ad.concat([fx, fy], axis=1)
    for i in range(len(cfg.placement_mlp)):
        z = ad.relu(ad.affine(z, h_params[f"h.mlp{i}.w"], h_params[f"h.mlp{i}.b"]))
    return ad.affine(z, h_params["h.out.w"], h_params["h.out.b"])


# ---------------------------------------------------------------------------
# single-cloud entry points


def _check_cloud(cloud: PointCloud, cfg: NetConfig, frame: Frame, what: str) -> np.ndarray:
    if len(cloud) != cfg.n_points:
        raise NetworkError(f"{what} must have {cfg.n_points} points, got {len(cloud)}")
    if cloud.frame is not frame:
        raise NetworkError(f"{what} must be in the {frame.value} frame")
    return cloud.points[None, :, :]


def embed(f_params: dict[str, Tensor], cfg: NetConfig, component_cloud: PointCloud) -> np.ndarray:
    """Map a centered component cloud to its embedding coordinates."""
    pts = _check_cloud(component_cloud, cfg, Frame.CENTERED, "component cloud")
    return embed_batch(f_params, cfg, Tensor(pts)).data[0]


def retrieve_distribution(g_params: dict[str, Tensor], cfg: NetConfig, assembly_cloud: PointCloud) -> GaussianMixture:
    """Predict the mixture over the embedding space from a partial assembly."""
    pts = _check_cloud(assembly_cloud, cfg, Frame.OBJECT, "assembly cloud")
    phi, mu, sigma = mixture_batch(g_params, cfg, Tensor(pts))
    return GaussianMixture(phi.data[0], mu.data[0], sigma.data[0])


def place(
    h_params: dict[str, Tensor],
    cfg: NetConfig,
    assembly_cloud: PointCloud,
    component_cloud: PointCloud,
) -> np.ndarray:
    """Predict the component centroid position in the assembly frame."""
    apts = _check_cloud(assembly_cloud, cfg, Frame.OBJECT, "assembly cloud")
    cpts = _check_cloud(component_cloud, cfg, Frame.CENTERED, "component cloud")
    return place_batch(h_params, cfg, Tensor(apts), Tensor(cpts)).data[0]


# ---------------------------------------------------------------------------
# checkpoints: named tensors + config + dataset stamp


def save_checkpoint(path, kind: str, cfg: NetConfig, params: dict[str, Tensor], extra: dict | None = None) -> None:
    meta = {"kind": kind, "net_config": cfg.to_dict(), "extra": extra or {}}
    ad.save_named_tensors(path, {k: v.data for k, v in params.items()}, meta)


def load_checkpoint(path) -> tuple[dict[str, Tensor], NetConfig, dict]:
    arrays, meta = ad.load_named_tensors(path)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return params, NetConfig.from_dict(meta["net_config"]), meta
