import numpy as np
import pytest

from sugarsplat.camera import canonical_rig, orbit_camera, sample_random_camera
from sugarsplat.errors import ConfigError
from sugarsplat.guidance import (
    GuidanceContext,
    GuidanceError,
    NoiseSchedule,
    PullToTargetProvider,
    add_noise,
    hybrid_sds_grad,
    make_synthetic_provider,
    sds_grad,
)
from sugarsplat.render import RenderAdjoint, RenderOutput, SplatScene, cloud_gradients

from conftest import random_cloud


class OffsetProvider:
    """``eps_hat = eps + c``."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def predict(self, z_t, t, context):
        return context.noise + self.c


class RecordingProvider:
    def __init__(self):
        self.contexts = []

    def predict(self, z_t, t, context):
        self.contexts.append(context)
        return np.array(context.noise)


class FailingProvider:
    def predict(self, z_t, t, context):
        raise RuntimeError("model unavailable")


class PixelScene:
    """A one-pixel 'scene' whose rendered color is the parameter itself."""

    def __init__(self, value):
        self.x = np.array(value, dtype=np.float64).reshape(1, 1, 3)
        self.grads = {"x": np.zeros_like(self.x)}

    def render(self, view):
        return RenderOutput(self.x.copy(), np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1, 3)))

    def gradients(self, view, adjoint):
        return {"x": np.array(adjoint.color)}

    def zero_gradients(self):
        return {"x": np.zeros_like(self.x)}

    def accumulate(self, grads, scale=1.0):
        self.grads["x"] += scale * grads["x"]


@pytest.fixture
def scene():
    return SplatScene(random_cloud(np.random.default_rng(0), 4), (1, 1, 1))


@pytest.fixture
def views():
    return [orbit_camera(20, 10, 1.2, 50, 16), orbit_camera(140, 25, 1.3, 45, 16)]


# ---------------------------------------------------------------- schedule and noising

def test_default_schedule_shape():
    s = NoiseSchedule.linear()
    assert s.num_timesteps == 1000
    assert np.all(np.diff(s.alphas_cumprod) < 0)
    assert s.alphas_cumprod[0] == pytest.approx(1 - 1e-4)
    assert s.alphas_cumprod[-1] < 1e-4
    np.testing.assert_allclose(s.weights, 1 - s.alphas_cumprod)


def test_timestep_sampling_range():
    s = NoiseSchedule.linear()
    rng = np.random.default_rng(0)
    ts = [s.sample_t(rng) for _ in range(5000)]
    assert min(ts) == 20 and max(ts) == 980


def test_schedule_rejects_non_decreasing():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.5, 0.6]))


def test_add_noise_examples():
    s = NoiseSchedule(np.array([1.0, 0.25, 0.0]))
    x, eps = np.full((2, 2), 1.0), np.full((2, 2), 3.0)
    np.testing.assert_array_equal(add_noise(x, 0, eps, s), x)
    np.testing.assert_array_equal(add_noise(x, 2, eps, s), eps)
    np.testing.assert_allclose(add_noise(x, 1, np.zeros((2, 2)), s), np.full((2, 2), 0.5))


def test_add_noise_contract_violations():
    s = NoiseSchedule.linear()
    with pytest.raises(IndexError):
        add_noise(np.zeros(3), 1000, np.zeros(3), s)
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), 5, np.zeros(4), s)


# ---------------------------------------------------------------- sds_grad

def test_echo_noise_gives_exactly_zero(scene, views):
    g = sds_grad(scene, views, make_synthetic_provider("echo-noise"), NoiseSchedule.linear(),
                 np.random.default_rng(1))
    assert all(not np.any(v) for v in g.values())
    assert all(not np.any(v) for v in scene.cloud.grads.values())


def test_zero_weight_gives_zero(scene, views):
    base = NoiseSchedule.linear()
    s = NoiseSchedule(base.alphas_cumprod, np.zeros(1000))
    g = sds_grad(scene, views, OffsetProvider(0.3), s, np.random.default_rng(1))
    assert all(not np.any(v) for v in g.values())


def test_offset_provider_equals_direct_backward(scene, views):
    s = NoiseSchedule.linear()
    rng = np.random.default_rng(2)
    c = np.random.default_rng(3).normal(size=(len(views), 16, 16, 3))
    t = s.sample_t(np.random.default_rng(2))
    g = sds_grad(scene, views, OffsetProvider(c), s, rng)
    scale = s.weight(t) * np.sqrt(s.alpha_bar(t))
    for k in g:
        direct = sum(cloud_gradients(scene.cloud, v, scene.background, RenderAdjoint(color=scale * ci))[k]
                     for v, ci in zip(views, c))
        np.testing.assert_allclose(g[k], direct, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("k", [0.5, 2.0, -3.0])
def test_linear_in_residual(scene, views, k):
    s = NoiseSchedule.linear()
    g1 = sds_grad(scene, views, OffsetProvider(0.2), s, np.random.default_rng(4), accumulate=False)
    gk = sds_grad(scene, views, OffsetProvider(0.2 * k), s, np.random.default_rng(4), accumulate=False)
    for name in g1:
        np.testing.assert_allclose(gk[name], k * g1[name], rtol=1e-9, atol=1e-15)


def test_fixed_seed_is_deterministic(scene, views):
    prov = make_synthetic_provider("pull-to-target", targets={views[0]: np.zeros((16, 16, 3))})
    a = sds_grad(scene, views, prov, NoiseSchedule.linear(), np.random.default_rng(9), accumulate=False)
    b = sds_grad(scene, views, prov, NoiseSchedule.linear(), np.random.default_rng(9), accumulate=False)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_provider_failure_becomes_guidance_error(scene, views):
    with pytest.raises(GuidanceError):
        sds_grad(scene, views, FailingProvider(), NoiseSchedule.linear(), np.random.default_rng(0))


def test_provider_shape_mismatch_is_guidance_error(scene, views):
    class Wrong:
        def predict(self, z_t, t, context):
            return np.zeros((1, 2, 3))

    with pytest.raises(GuidanceError):
        sds_grad(scene, views, Wrong(), NoiseSchedule.linear(), np.random.default_rng(0))


def test_normal_mode_routes_residual_through_normals(scene, views):
    s = NoiseSchedule.linear()
    c = 0.7
    t = s.sample_t(np.random.default_rng(5))
    g = sds_grad(scene, views, OffsetProvider(c), s, np.random.default_rng(5),
                 GuidanceContext(mode="normal"), accumulate=False)
    scale = s.weight(t) * np.sqrt(s.alpha_bar(t))
    adj = RenderAdjoint(normal=np.full((16, 16, 3), 0.5 * scale * c))
    for k in g:
        direct = sum(cloud_gradients(scene.cloud, v, scene.background, adj)[k] for v in views)
        np.testing.assert_allclose(g[k], direct, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- providers

def test_unknown_provider_kind():
    with pytest.raises(ConfigError):
        make_synthetic_provider("stable-diffusion")


def test_pull_to_target_single_pixel_fixed_point():
    s = NoiseSchedule.linear()
    target = np.array([0.2, 0.9, 0.5])
    view = orbit_camera(0, 0, 1.5, 50, 1)
    prov = PullToTargetProvider(s, {view: target.reshape(1, 1, 3)}, gain=1.0)
    px = PixelScene([0.8, 0.1, 0.5])
    rng, replay = np.random.default_rng(0), np.random.default_rng(0)
    lr = 0.5
    for _ in range(200):
        err = px.x.ravel() - target
        px.grads["x"][:] = 0
        sds_grad(px, [view], prov, s, rng)
        t = s.sample_t(replay)
        replay.standard_normal((1, 1, 1, 3))
        px.x -= lr * px.grads["x"]
        # closed-form contraction of the error toward the target
        k = s.weight(t) * np.sqrt(s.alpha_bar(t))
        np.testing.assert_allclose(px.x.ravel() - target, (1 - lr * k) * err, atol=1e-12)
    np.testing.assert_allclose(px.x.ravel(), target, atol=1e-6)


def test_pull_to_target_without_target_is_inert(scene, views):
    prov = make_synthetic_provider("pull-to-target")
    g = sds_grad(scene, views, prov, NoiseSchedule.linear(), np.random.default_rng(0))
    assert all(not np.any(v) for v in g.values())


def test_conditioning_toy_provider_shape_contract():
    prov = make_synthetic_provider("conditioning-toy", seed=0)
    rig = canonical_rig(0, 15, 1.5, 50, 32)
    z = np.random.default_rng(0).normal(size=(4, 32, 32, 3))
    ctx = GuidanceContext(cameras=rig, noise=np.zeros_like(z))
    out = prov.predict(z, 500, ctx)
    assert out.shape == z.shape and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, prov.predict(z, 500, ctx))
    with pytest.raises(GuidanceError):
        prov.predict(z[:3], 500, ctx)


# ---------------------------------------------------------------- hybrid

def _hybrid_setup():
    scene = SplatScene(random_cloud(np.random.default_rng(1), 4), (1, 1, 1))
    rig = canonical_rig(10, 15, 1.4, 50, 16)
    rand = [sample_random_camera(i, 16) for i in range(2)]
    return scene, rig, rand


def test_hybrid_zero_weights_zero():
    scene, rig, rand = _hybrid_setup()
    g = hybrid_sds_grad(scene, rig, rand, OffsetProvider(1.0), OffsetProvider(1.0), 0.0, 0.0, rng=0)
    assert all(not np.any(v) for v in g.values())


def test_hybrid_echo_zero_regardless_of_weights():
    scene, rig, rand = _hybrid_setup()
    echo = make_synthetic_provider("echo-noise")
    g = hybrid_sds_grad(scene, rig, rand, echo, echo, 3.0, 5.0, rng=0)
    assert all(not np.any(v) for v in g.values())


def test_hybrid_default_weights():
    import inspect

    sig = inspect.signature(hybrid_sds_grad)
    assert sig.parameters["lambda_2d"].default == 0.1
    assert sig.parameters["lambda_3d"].default == 0.01


def test_hybrid_without_3d_equals_scaled_2d_bitwise():
    scene, rig, rand = _hybrid_setup()
    s = NoiseSchedule.linear()
    g = hybrid_sds_grad(scene, rig, rand, OffsetProvider(0.3), OffsetProvider(9.0), 0.1, 0.0, s,
                        np.random.default_rng(8), accumulate=False)
    g2 = sds_grad(scene, rand, OffsetProvider(0.3), s, np.random.default_rng(8), accumulate=False)
    for k in g:
        np.testing.assert_array_equal(g[k], 0.0 + 0.1 * g2[k])


def test_condition_reaches_only_the_3d_provider():
    scene, rig, rand = _hybrid_setup()
    p2, p3 = RecordingProvider(), RecordingProvider()
    hybrid_sds_grad(scene, rig, rand, p2, p3, 0.1, 0.01, rng=0, context=GuidanceContext(condition="edge-map"))
    assert p2.contexts[0].condition is None
    assert p3.contexts[0].condition == "edge-map"
    assert len(p3.contexts[0].cameras) == 4


def test_hybrid_rig_size_enforced():
    scene, rig, rand = _hybrid_setup()
    echo = make_synthetic_provider("echo-noise")
    with pytest.raises(ValueError):
        hybrid_sds_grad(scene, rig[:3], rand, echo, echo, rng=0)
    with pytest.raises(ValueError):
        hybrid_sds_grad(scene, rig, [], echo, echo, rng=0)
