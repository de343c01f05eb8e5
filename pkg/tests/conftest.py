import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from trauma3d import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr, eps=1e-5, order=2):
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place).

    ``order=4`` uses the five-point stencil; needed when small components sit
    next to an O(1) loss and two-point roundoff would dominate.
    """
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]

        def at(h):
            arr[i] = old + h
            return f()

        if order == 4:
            g[i] = (-at(2 * eps) + 8 * at(eps) - 8 * at(-eps) + at(-2 * eps)) / (12 * eps)
        else:
            g[i] = (at(eps) - at(-eps)) / (2 * eps)
        arr[i] = old
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-8):
    """Relative error <= rtol on components with magnitude >= floor."""
    analytic = np.asarray(analytic)
    big = np.maximum(np.abs(analytic), np.abs(numeric)) >= floor
    if not big.any():
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)
        return
    rel = np.abs(analytic - numeric)[big] / np.maximum(np.abs(analytic), np.abs(numeric))[big]
    assert (rel <= rtol).all(), f"max rel err {rel.max():.3e}"


# -- acceptance reporting ---------------------------------------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name, budget=None): acceptance criterion; budget in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    name = mark.args[0]
    entry = _CRITERIA.setdefault(name, {"budget": mark.kwargs.get("budget"), "failed": [], "seconds": 0.0,
                                        "tests": 0})
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(n) for n in _CRITERIA)
    for name, e in _CRITERIA.items():
        over = e["budget"] is not None and e["seconds"] > e["budget"]
        ok = not e["failed"] and not over and e["tests"] > 0
        budget = f" / {e['budget']:.0f}s budget" if e["budget"] else ""
        detail = f"{e['tests']} tests, {e['seconds']:.1f}s{budget}"
        if e["failed"]:
            detail += "; failed: " + ", ".join(e["failed"])
        if over:
            detail += "; over time budget"
        terminalreporter.write_line(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  ({detail})")
