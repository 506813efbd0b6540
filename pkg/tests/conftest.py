import numpy as np
import pytest

from mahamech import EmbeddingStore, ScaledCovariance


def random_pd_sigma(rng, dim, spread=3.0):
    """Random SPD matrix with trace `dim` and log-uniform eigenvalues."""
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q = Q * np.sign(np.diag(R))
    w = np.exp(rng.uniform(-spread, spread, size=dim))
    w *= dim / w.sum()
    return (Q * w) @ Q.T


def random_pd_covariance(rng, dim, spread=3.0):
    return ScaledCovariance.from_matrix(random_pd_sigma(rng, dim, spread))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def square_store():
    """Four points symmetric about the origin; its scaled covariance is I."""
    return EmbeddingStore(["a", "b", "c", "d"], [[1, 0], [-1, 0], [0, 1], [0, -1]])


@pytest.fixture
def diag_cov():
    return ScaledCovariance.from_matrix(np.diag([1.5, 0.5]))


@pytest.fixture
def small_store():
    rng = np.random.default_rng(5)
    words = [f"t{i}" for i in range(12)]
    return EmbeddingStore(words, rng.normal(size=(12, 3)) * np.array([3.0, 1.0, 0.3]))


# ---- acceptance criteria reporting ---------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")
    config.addinivalue_line("markers", "slow: long-running acceptance check")


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance line of the running test."""
    def add(text):
        request.node.user_properties.append(("note", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "status": [], "notes": []})
    entry["status"].append("SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL")
    entry["notes"] += [v for k, v in item.user_properties if k == "note"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        st = entry["status"]
        status = "FAIL" if "FAIL" in st else "SKIP" if set(st) == {"SKIP"} else "PASS"
        notes = "; ".join(entry["notes"])
        line = f"criterion {number:>2} {status}: {entry['title']}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
