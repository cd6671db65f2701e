import numpy as np
import pytest

from partforge import autodiff as ad
from partforge import networks as nets
from partforge.autodiff import Tape, Tensor
from partforge.geometry import Frame, PointCloud

TINY = nets.NetConfig(
    point_mlp=(8, 16),
    global_mlp=(12,),
    embed_dim=5,
    n_modes=3,
    sigma_cap=0.05,
    n_points=24,
    placement_mlp=(10,),
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def unit_ball_cloud(rng, n, frame=Frame.CENTERED):
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(1.0, 4.0, size=(n, 1))
    if frame is Frame.CENTERED:
        pts -= pts.mean(axis=0)
    return PointCloud(pts, frame)


def numpy_encoder_oracle(params, prefix, pts, cfg):
    """Independent forward pass: per-point numpy matmuls + plain np.max."""
    x = pts
    for i in range(len(cfg.point_mlp)):
        w = params[f"{prefix}.point{i}.w"].data
        b = params[f"{prefix}.point{i}.b"].data
        x = np.maximum(x @ w + b, 0.0)
    g = x.max(axis=0)
    for i in range(len(cfg.global_mlp)):
        w = params[f"{prefix}.global{i}.w"].data
        b = params[f"{prefix}.global{i}.b"].data
        g = np.maximum(g @ w + b, 0.0)
    return g


class TestEmbedding:
    def test_permutation_invariance_exact(self, rng):
        params = nets.init_embedding(TINY, rng)
        cloud = unit_ball_cloud(rng, TINY.n_points)
        perm = rng.permutation(TINY.n_points)
        a = nets.embed(params, TINY, cloud)
        b = nets.embed(params, TINY, PointCloud(cloud.points[perm], Frame.CENTERED))
        assert np.array_equal(a, b)

    def test_zero_params_zero_output(self, rng):
        params = nets.init_embedding(TINY, rng)
        for p in params.values():
            p.data[:] = 0.0
        cloud = unit_ball_cloud(rng, TINY.n_points)
        assert np.array_equal(nets.embed(params, TINY, cloud), np.zeros(TINY.embed_dim))

    def test_matches_numpy_oracle(self, rng):
        params = nets.init_embedding(TINY, rng)
        cloud = unit_ball_cloud(rng, TINY.n_points)
        feat = numpy_encoder_oracle(params, "f.enc", cloud.points, TINY)
        expect = feat @ params["f.out.w"].data + params["f.out.b"].data
        got = nets.embed(params, TINY, cloud)
        assert np.max(np.abs(got - expect)) < 1e-12

    def test_wrong_point_count(self, rng):
        params = nets.init_embedding(TINY, rng)
        with pytest.raises(nets.NetworkError, match="must have 24 points"):
            nets.embed(params, TINY, unit_ball_cloud(rng, 10))

    def test_wrong_frame(self, rng):
        params = nets.init_embedding(TINY, rng)
        cloud = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        with pytest.raises(nets.NetworkError, match="centered frame"):
            nets.embed(params, TINY, cloud)


class TestRetrieval:
    def test_mixture_invariants(self, rng):
        params = nets.init_retrieval(TINY, rng)
        for _ in range(50):
            cloud = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
            mix = nets.retrieve_distribution(params, TINY, cloud)
            assert abs(mix.weights.sum() - 1.0) <= 1e-9
            assert np.all(mix.weights >= 0)
            assert np.all(mix.stds > 0) and np.all(mix.stds <= TINY.sigma_cap)
            assert np.all(np.isfinite(mix.means))

    def test_permutation_invariance(self, rng):
        params = nets.init_retrieval(TINY, rng)
        cloud = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        perm = rng.permutation(TINY.n_points)
        m1 = nets.retrieve_distribution(params, TINY, cloud)
        m2 = nets.retrieve_distribution(params, TINY, PointCloud(cloud.points[perm], Frame.OBJECT))
        assert np.array_equal(m1.weights, m2.weights)
        assert np.array_equal(m1.means, m2.means)
        assert np.array_equal(m1.stds, m2.stds)

    def test_phi_matches_softmax_oracle(self, rng):
        params = nets.init_retrieval(TINY, rng)
        cloud = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        feat = numpy_encoder_oracle(params, "g.enc", cloud.points, TINY)
        logits = feat @ params["g.phi.w"].data + params["g.phi.b"].data
        e = np.exp(logits - logits.max())
        mix = nets.retrieve_distribution(params, TINY, cloud)
        assert np.max(np.abs(mix.weights - e / e.sum())) < 1e-12

    def test_sigma_cap_is_hard(self, rng):
        params = nets.init_retrieval(TINY, rng)
        # bias the sigma head high; the exp output must clamp at the cap
        params["g.sigma.b"].data[:] = 5.0
        cloud = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        mix = nets.retrieve_distribution(params, TINY, cloud)
        assert np.all(mix.stds == TINY.sigma_cap)


class TestPlacement:
    def test_permutation_invariance_both_inputs(self, rng):
        params = nets.init_placement(TINY, rng)
        a = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        c = unit_ball_cloud(rng, TINY.n_points)
        base = nets.place(params, TINY, a, c)
        pa = PointCloud(a.points[rng.permutation(TINY.n_points)], Frame.OBJECT)
        pc = PointCloud(c.points[rng.permutation(TINY.n_points)], Frame.CENTERED)
        assert np.array_equal(base, nets.place(params, TINY, pa, c))
        assert np.array_equal(base, nets.place(params, TINY, a, pc))

    def test_zero_output_head(self, rng):
        params = nets.init_placement(TINY, rng)
        params["h.out.w"].data[:] = 0.0
        params["h.out.b"].data[:] = 0.0
        a = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        c = unit_ball_cloud(rng, TINY.n_points)
        assert np.array_equal(nets.place(params, TINY, a, c), np.zeros(3))

    def test_matches_numpy_oracle(self, rng):
        params = nets.init_placement(TINY, rng)
        a = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
        c = unit_ball_cloud(rng, TINY.n_points)
        z = np.concatenate(
            [
                numpy_encoder_oracle(params, "h.encx", a.points, TINY),
                numpy_encoder_oracle(params, "h.ency", c.points, TINY),
            ]
        )
        for i in range(len(TINY.placement_mlp)):
            z = np.maximum(z @ params[f"h.mlp{i}.w"].data + params[f"h.mlp{i}.b"].data, 0.0)
        expect = z @ params["h.out.w"].data + params["h.out.b"].data
        assert np.max(np.abs(nets.place(params, TINY, a, c) - expect)) < 1e-12


class TestSharedProperties:
    def test_duplicated_point_does_not_change_pooled_features(self, rng):
        params = nets.init_embedding(TINY, rng)
        pts = rng.standard_normal((TINY.n_points, 3))
        dup = np.concatenate([pts, pts[5:6]])
        a = nets.encode_batch(params, "f.enc", Tensor(pts[None]), TINY).data
        b = nets.encode_batch(params, "f.enc", Tensor(dup[None]), TINY).data
        assert np.array_equal(a, b)

    def test_outputs_finite_on_unit_ball(self, rng):
        f = nets.init_embedding(TINY, rng)
        g = nets.init_retrieval(TINY, rng)
        h = nets.init_placement(TINY, rng)
        for _ in range(10):
            a = unit_ball_cloud(rng, TINY.n_points, frame=Frame.OBJECT)
            c = unit_ball_cloud(rng, TINY.n_points)
            assert np.all(np.isfinite(nets.embed(f, TINY, c)))
            mix = nets.retrieve_distribution(g, TINY, a)
            assert np.all(np.isfinite(mix.means))
            assert np.all(np.isfinite(nets.place(h, TINY, a, c)))

    def test_gradients_flow_through_all_networks(self, rng):
        f = nets.init_embedding(TINY, rng)
        g = nets.init_retrieval(TINY, rng)
        pts = Tensor(rng.standard_normal((2, TINY.n_points, 3)))
        with Tape() as tape:
            emb = nets.embed_batch(f, TINY, pts)
            phi, mu, sigma = nets.mixture_batch(g, TINY, pts)
            loss = ad.tsum(ad.square(emb)) + ad.tsum(ad.square(mu)) + ad.tsum(phi) + ad.tsum(sigma)
        leaves = list(f.values()) + list(g.values())
        grads = ad.backward(tape, loss, leaves=leaves)
        # encoder weights receive nonzero gradient
        assert np.any(grads["f.enc.point0.w"] != 0)
        assert np.any(grads["g.enc.point0.w"] != 0)


class TestGaussianMixtureType:
    def test_validation(self):
        with pytest.raises(nets.NetworkError, match="sum to one"):
            nets.GaussianMixture(np.array([0.5, 0.4]), np.zeros((2, 3)), np.ones((2, 3)))
        with pytest.raises(nets.NetworkError, match="positive"):
            nets.GaussianMixture(np.array([0.5, 0.5]), np.zeros((2, 3)), np.zeros((2, 3)))

    def test_sample_and_log_density(self, rng):
        mix = nets.GaussianMixture(
            np.array([0.3, 0.7]),
            np.array([[0.0, 0.0], [5.0, 5.0]]),
            np.array([[0.1, 0.1], [0.2, 0.2]]),
        )
        coords, modes = mix.sample(2000, rng)
        assert coords.shape == (2000, 2) and set(np.unique(modes)) <= {0, 1}
        assert abs((modes == 1).mean() - 0.7) < 0.05
        # density integrates sanity: log density at a mode center beats far away
        assert mix.log_density(np.array([5.0, 5.0])) > mix.log_density(np.array([2.5, 2.5]))


class TestCheckpoint:
    def test_roundtrip_with_config(self, rng, tmp_path):
        params = nets.init_retrieval(TINY, rng)
        path = tmp_path / "g.ckpt"
        nets.save_checkpoint(path, "joint", TINY, params, extra={"dataset": "synthetic-v1"})
        loaded, cfg, meta = nets.load_checkpoint(path)
        assert cfg == TINY
        assert meta["extra"]["dataset"] == "synthetic-v1"
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k].data, params[k].data)
            assert loaded[k].requires_grad
