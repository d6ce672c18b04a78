import numpy as np
import pytest
from hypothesis import settings, strategies as st

from kdetect.geometry import Box

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@st.composite
def boxes(draw, lo=-50.0, hi=300.0, min_size=0.5):
    x0 = draw(st.floats(lo, hi, allow_nan=False))
    y0 = draw(st.floats(lo, hi, allow_nan=False))
    w = draw(st.floats(min_size, 200.0, allow_nan=False))
    h = draw(st.floats(min_size, 200.0, allow_nan=False))
    return Box(x0, y0, x0 + w, y0 + h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def polyp_corpus():
    from kdetect.synthdata import generate_polyp_proxy

    return generate_polyp_proxy(0)


@pytest.fixture(scope="session")
def edd_corpus():
    from kdetect.synthdata import generate_edd_proxy

    return generate_edd_proxy(1)


@pytest.fixture(scope="session")
def unseen_set():
    from kdetect.synthdata import generate_unseen_test

    return generate_unseen_test(2)


@pytest.fixture(scope="session")
def tiny_dirs(tmp_path_factory, polyp_corpus, edd_corpus, unseen_set):
    """Small on-disk corpora for end-to-end command tests."""
    from kdetect.synthdata import SPLITS, save_corpus, save_dataset

    root = tmp_path_factory.mktemp("tiny")
    sizes = {"train": 8, "val": 4, "test": 4}
    polyp = save_corpus({s: d.subset(range(sizes[s])) for s, d in zip(SPLITS, polyp_corpus)}, root / "polyp")
    edd = save_corpus({s: d.subset(range(sizes[s] + 4)) for s, d in zip(SPLITS, edd_corpus)}, root / "edd")
    unseen = save_dataset(unseen_set.subset(range(4)), root / "unseen")
    return {"polyp": polyp, "edd": edd, "unseen": unseen}


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory, tiny_dirs):
    """YAML config for a one-epoch, two-seed experiment over the tiny corpora."""
    import yaml

    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump({
        "data": {"polyp_dir": str(tiny_dirs["polyp"]), "edd_dir": str(tiny_dirs["edd"]),
                 "unseen_dir": str(tiny_dirs["unseen"])},
        "experiment": {"seeds": 2, "teacher_epochs": 1, "student_epochs": 1},
        "kfold": {"epochs": 1, "variants": ["none", "geometric+photometric"]},
        "train": {"epochs": 1},
    }))
    return path


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, ok, detail):
        lines.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
