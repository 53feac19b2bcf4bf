import os
from pathlib import Path

import numpy as np
import pytest

from fhnloop import melnikov, orbits
from fhnloop.config import RunConfig
from fhnloop.model import ModelParams, symmetric_gamma
from fhnloop.wave import wave_from_orbit

A_REF = 0.25
EPS_REF = 0.0025


@pytest.fixture(scope="session")
def loop():
    return orbits.locate_loop(EPS_REF, A_REF)


@pytest.fixture(scope="session")
def adjoints(loop):
    psi1 = melnikov.compute_adjoint(loop.h1, loop.h2)
    psi2 = melnikov.compute_adjoint(loop.h2, loop.h1)
    return psi1, psi2


@pytest.fixture(scope="session")
def member40(loop):
    return orbits.compute_periodic(loop, 40.0)


@pytest.fixture(scope="session")
def wave40(member40):
    return wave_from_orbit(member40.orbit)


@pytest.fixture(scope="session")
def params_ref(loop):
    return ModelParams(a=A_REF, gamma=symmetric_gamma(A_REF), epsilon=EPS_REF, c=loop.c_star)


@pytest.fixture(scope="session")
def reference_out(tmp_path_factory):
    """Output directory of the full default pipeline (a few minutes, run once).

    FHNLOOP_REFERENCE_OUT points at a persistent directory instead, where the
    checkpoint cache makes repeated sessions fast.
    """
    from fhnloop.pipeline import run_pipeline

    out = os.environ.get("FHNLOOP_REFERENCE_OUT")
    out = Path(out) if out else tmp_path_factory.mktemp("reference")
    cfg = RunConfig()
    cfg.pipeline.threads = 4
    result = run_pipeline(cfg, out=out)
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
