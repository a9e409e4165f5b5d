"""Shared fixtures. Trained desk-scale models are built once per session and
additionally cached on disk (keyed by configuration and package source), so
reruns on unchanged code skip retraining."""

import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import geodesica
from geodesica import eikonal as ek
from geodesica import manifold as mf
from geodesica import sampling as sm

SPHERE_BOUNDS = ([np.pi / 6, -np.pi / 2], [5 * np.pi / 6, 3 * np.pi / 2])


# Only the modules on the training path invalidate cached models.
TRAINING_MODULES = ("diffcore.py", "manifold.py", "network.py", "_kernels.py", "eikonal.py", "sampling.py")


def _source_digest() -> str:
    h = hashlib.sha256()
    root = Path(geodesica.__file__).parent
    for name in TRAINING_MODULES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


# Desk-scale budgets: 4 x 128 network, 10^4 updates, batch 1024.
DESK = ek.TrainingConfig()


def desk_models():
    """name -> (manifold, config, seed, sampler config) for every trained model the suite uses."""
    return {
        "euclid-s0": (mf.builtin("euclidean", 2), DESK, 0, None),
        "euclid-s1": (mf.builtin("euclidean", 2), DESK, 1, None),
        "sphere": (mf.builtin("hypersphere", 2), DESK, 0, None),
        "peaks": (mf.builtin("peaks"), DESK, 0, sm.SamplerConfig(kind="mixture", weight=0.5, seed=0)),
        "peaks-upper": (mf.builtin("peaks"), replace(DESK, kind="global_upper"), 0,
                        sm.SamplerConfig(kind="mixture", weight=0.5, seed=0)),
        "gmm": (mf.builtin("gmm"), DESK, 0, None),
    }


@pytest.fixture(scope="session")
def euclid():
    return mf.builtin("euclidean", 2)


@pytest.fixture(scope="session")
def sphere():
    return mf.builtin("hypersphere", 2)


@pytest.fixture(scope="session")
def sphere_wide():
    """S^2 chart whose longitude range contains 0, for equatorial examples."""
    return mf.builtin("hypersphere", 2, bounds=SPHERE_BOUNDS)


@pytest.fixture(scope="session")
def peaks():
    return mf.builtin("peaks")


@pytest.fixture(scope="session")
def gmm():
    return mf.builtin("gmm")


class TrainedModels:
    def __init__(self, cache_dir: Path):
        self.cache_dir = cache_dir
        self._models = {}
        self.timings = {}

    def desk(self, name: str):
        man, config, seed, sampler_config = desk_models()[name]
        return self.get(name, man, config, seed, sampler_config)

    def get(self, name: str, man, config: ek.TrainingConfig, seed: int = 0, sampler_config=None):
        key_src = json.dumps({"man": man.ident, "cfg": config.as_dict(), "seed": seed,
                              "sampler": None if sampler_config is None else vars(sampler_config),
                              "code": _source_digest()}, sort_keys=True, default=str)
        key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
        if key in self._models:
            return self._models[key]
        path = self.cache_dir / f"{name}-{key}.ckpt"
        if path.exists():
            model = ek.load_model(path, man)
        else:
            import time
            sampler = None if sampler_config is None else sm.make_sampler(man, sampler_config)
            t0 = time.perf_counter()
            model = ek.train(man, config, sampler=sampler, seed=seed).model
            self.timings[name] = time.perf_counter() - t0
            ek.save_model(path, model)
        self._models[key] = model
        return model


@pytest.fixture(scope="session")
def trained(request):
    return TrainedModels(Path(request.config.cache.mkdir("geodesica-models")))


# acceptance reporting: one PASS/FAIL line per criterion ------------------------------------

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        ACCEPTANCE[marker.args[0]] = ("PASS" if rep.passed else "FAIL", marker.args[1],
                                      getattr(item, "detail", "") or rep.longreprtext.splitlines()[-1:])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[num]
        if isinstance(detail, list):
            detail = detail[0] if detail else ""
        terminalreporter.write_line(f"[{status}] C{num:<2} {title}: {detail}")


@pytest.fixture
def note(request):
    """note(text) attaches the measured values to the acceptance line; also printed."""
    def _note(text):
        request.node.detail = text
        print(text)
    return _note
