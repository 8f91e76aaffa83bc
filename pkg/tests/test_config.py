from dataclasses import replace

import numpy as np
import pytest
import tomli
from hypothesis import given, settings, strategies as hst

from qtraj.config import (
    BUNDLED,
    ConfigError,
    config_hash,
    dumps_toml,
    load_bundled,
    parse_config,
    serialize_config,
)
from qtraj.experiments import Experiment
from qtraj.sde import KernelInclusionError, SimConfig

from .conftest import random_density, random_model

MINIMAL = """
[model]
hamiltonian = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
diffusive = [[[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]]

[states]
rho0 = [[[0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, 0.0]]]
rho_hat0 = [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.0]]]

[simulation]
dt = 0.01
horizon = 1.0
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.experiment is Experiment.FIDELITY
    assert cfg.n_traj == 1
    assert cfg.sim.seed == 0 and cfg.sim.max_jump_prob == 0.1
    assert cfg.sample_times[0] == 0.0 and cfg.sample_times[-1] == pytest.approx(1.0)
    assert len(cfg.sample_times) == 101
    assert cfg.spec.n_diffusive == 1 and cfg.spec.n_jumps == 0


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_round_trip(name):
    cfg = load_bundled(name)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)
    assert config_hash(again) == config_hash(cfg)


@settings(max_examples=25, deadline=None)
@given(
    hst.integers(0, 2**32 - 1),
    hst.integers(1, 3),
    hst.integers(1, 1000),
    hst.sampled_from(list(Experiment)),
    hst.floats(0.51, 0.99),
    hst.dictionaries(hst.sampled_from(["a", "b_c", "sigma"]), hst.floats(-1e6, 1e6, allow_nan=False)),
)
def test_round_trip_exact(seed, k, n_traj, kind, threshold, tolerances):
    rng = np.random.default_rng(seed)
    spec = random_model(rng, k, 1, 1)
    lam = max(np.linalg.eigvalsh(C.conj().T @ C)[-1] for C in spec.jumps)
    dt = 0.5 ** np.ceil(np.log2(max(16.0, 20 * lam)))
    base = parse_config(MINIMAL)
    cfg = replace(
        base,
        spec=spec,
        rho0=random_density(rng, k),
        rho_hat0=random_density(rng, k),
        n_traj=n_traj,
        sim=SimConfig(dt=float(dt), horizon=float(8 * dt), seed=seed),
        sample_times=(0.0, float(4 * dt), float(8 * dt)),
        experiment=kind,
        gamma_threshold=threshold,
        tolerances=tolerances,
        name=f"model {seed} é",
    )
    assert parse_config(serialize_config(cfg)) == cfg


def test_hash_is_canonical():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL.replace("dt = 0.01\nhorizon = 1.0", "horizon = 1.0\ndt = 0.01"))
    assert config_hash(a) == config_hash(b)
    c = replace(a, sim=replace(a.sim, seed=1))
    assert config_hash(c) != config_hash(a)


@pytest.mark.parametrize(
    "edit, path",
    [
        (("hamiltonian = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]", "hamiltonian = [[[0.0, 0.0], [0.0, 0.0]]]"), "model.hamiltonian[0]"),
        (("[[0.5, 0.0], [0.5, 0.0]], [[0.5", "[[0.5, 0.0], [0.5]], [[0.5"), "states.rho0[0][1]"),
        (("dt = 0.01", "dt = \"fast\""), "simulation.dt"),
        (("dt = 0.01", "dt = 0.3"), "simulation"),
        (("horizon = 1.0", "horizon = 1.0\nspeed = 2"), "simulation.speed"),
        (("[simulation]", "[simulation]\nseed = 1.5"), "simulation.seed"),
    ],
)
def test_errors_name_the_field(edit, path):
    text = MINIMAL.replace(*edit)
    assert text != MINIMAL
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path
    assert path in str(info.value)


def test_missing_and_unknown_sections():
    with pytest.raises(ConfigError, match="states: missing"):
        parse_config(MINIMAL.split("[states]")[0])
    with pytest.raises(ConfigError, match="experiment.kind"):
        parse_config(MINIMAL + '\n[experiment]\nkind = "tomography"\n')
    with pytest.raises(ConfigError, match="line"):
        parse_config(MINIMAL + "\n[broken\n")


def test_invalid_state_and_kernel_inclusion():
    bad_trace = MINIMAL.replace("rho_hat0 = [[[0.5, 0.0]", "rho_hat0 = [[[0.7, 0.0]")
    with pytest.raises(ConfigError, match="trace"):
        parse_config(bad_trace)
    swapped = MINIMAL.replace("rho0 =", "tmp =").replace("rho_hat0 =", "rho0 =").replace("tmp =", "rho_hat0 =")
    with pytest.raises(KernelInclusionError):
        parse_config(swapped)


def test_sample_times_must_be_on_grid():
    with pytest.raises(ConfigError, match="grid"):
        parse_config(MINIMAL + "\n[experiment]\nsample_times = [0.0, 0.005]\n")


def test_dumps_toml_is_valid_toml():
    doc = {"a": 1, "b": [1.5, -0.0, 1e-300], "s": 'x "q"', "t": {"m": [[[1.0, 2.0]]], "u": {"flag": True}}}
    assert tomli.loads(dumps_toml(doc)) == doc
