import numpy as np
import pytest
from hypothesis import settings

from sugarsplat.camera import orbit_camera
from sugarsplat.render import COMPILED_AVAILABLE
from sugarsplat.scene import GaussianCloud, normalize_quaternions

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

BACKENDS = ["python"] + (["compiled"] if COMPILED_AVAILABLE else [])


def rel_err(analytic, numeric):
    """Normwise relative error ``|a - fd|_inf / max(|a|_inf, |fd|_inf)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def central_diff(fn, x, h):
    """Central differences of scalar ``fn()`` w.r.t. every entry of array ``x`` (mutated in place)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


def random_cloud(rng, n=3, spread=0.15, scale=(0.05, 0.12), opacity=(0.4, 0.9)):
    centers = rng.uniform(-spread, spread, size=(n, 3))
    rot = normalize_quaternions(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(*scale, size=(n, 3)))
    p = rng.uniform(*opacity, size=n)
    return GaussianCloud(centers, rot, log_scales, np.log(p / (1 - p)), rng.uniform(0.1, 0.9, size=(n, 3)))


@pytest.fixture
def view32():
    return orbit_camera(30.0, 20.0, 1.2, 50.0, 32)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


# ---------------------------------------------------------------- acceptance report

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    rep = outcome.get_result()
    if rep.when == "call" or rep.failed or rep.skipped:
        if hasattr(rep, "wasxfail"):
            status = "XFAIL"
        elif rep.passed:
            status = "PASS"
        elif rep.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        results = item.config.stash[_CRITERIA]
        if marker.args[0] not in results or status != "PASS":
            results[marker.args[0]] = (status, item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, name, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {status:<5} {name}  {detail}".rstrip())
