"""TOML configuration files.

A config holds one model, a pair of initial states, the simulation grid and
an optional ``[experiment]`` table::

    name = "qnd_qubit"

    [model]
    hamiltonian = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
    diffusive = [ <matrix>, ... ]
    jumps = []

    [states]
    rho0 = <matrix>
    rho_hat0 = <matrix>

    [simulation]
    dt = 0.001
    horizon = 20.0
    seed = 0

    [experiment]
    kind = "fidelity"
    n_traj = 1000
    sample_times = [0.0, 5.0, 10.0, 20.0]

    [experiment.tolerances]
    fidelity_final_min = 0.99

Complex matrices are row-major lists of rows whose entries are ``[re, im]``
pairs. Floats are written with ``repr`` so that parsing a serialized config
reproduces it bit for bit.
"""

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from .experiments import Experiment, ExperimentConfig
from .model import ModelSpec
from .sde import SimConfig

BUNDLED = (
    "qnd_qubit",
    "amplitude_damping",
    "dephasing_with_hamiltonian",
    "block_counterexample",
    "non_purifying_qubit",
)

DEFAULT_SAMPLES = 100


class ConfigError(ValueError):
    """A config document is malformed; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def encode_matrix(A):
    A = np.asarray(A, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in A]


def decode_matrix(obj, path):
    if not isinstance(obj, list) or not obj:
        raise ConfigError("expected a non-empty list of rows", path)
    n = len(obj)
    out = np.empty((n, n), dtype=complex)
    for a, row in enumerate(obj):
        if not isinstance(row, list) or len(row) != n:
            raise ConfigError(f"matrix must be square ({n} rows), row {a} has {_len(row)} entries", f"{path}[{a}]")
        for b, z in enumerate(row):
            p = f"{path}[{a}][{b}]"
            if not isinstance(z, list) or len(z) != 2 or not all(_is_number(x) for x in z):
                raise ConfigError("entry must be a [re, im] pair of numbers", p)
            out[a, b] = complex(float(z[0]), float(z[1]))
    if not np.all(np.isfinite(out)):
        raise ConfigError("matrix has non-finite entries", path)
    return out


def _len(x):
    return len(x) if isinstance(x, list) else "no"


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _get(table, key, path, kind, default=...):
    p = f"{path}.{key}" if path else key
    if key not in table:
        if default is ...:
            raise ConfigError("missing required field", p)
        return default
    value = table[key]
    if kind is float:
        if not _is_number(value):
            raise ConfigError(f"expected a number, got {type(value).__name__}", p)
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {type(value).__name__}", p)
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}", p)
    return value


def _check_keys(table, allowed, path):
    for key in table:
        if key not in allowed:
            raise ConfigError("unknown field", f"{path}.{key}" if path else key)


def _wrap(path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        if type(exc) is not ValueError:
            raise
        raise ConfigError(str(exc), path) from exc


def _default_times(sim):
    stride = max(1, sim.n_steps // DEFAULT_SAMPLES)
    steps = list(range(0, sim.n_steps + 1, stride))
    if steps[-1] != sim.n_steps:
        steps.append(sim.n_steps)
    return tuple(s * sim.dt for s in steps)


def from_dict(doc):
    """Build an :class:`ExperimentConfig` from a parsed document."""
    _check_keys(doc, {"name", "model", "states", "simulation", "experiment"}, "")
    name = _get(doc, "name", "", str, "")

    model = _get(doc, "model", "", dict)
    _check_keys(model, {"hamiltonian", "diffusive", "jumps"}, "model")
    H = decode_matrix(_get(model, "hamiltonian", "model", list), "model.hamiltonian")
    diffusive = tuple(
        decode_matrix(m, f"model.diffusive[{i}]") for i, m in enumerate(_get(model, "diffusive", "model", list, []))
    )
    jumps = tuple(decode_matrix(m, f"model.jumps[{i}]") for i, m in enumerate(_get(model, "jumps", "model", list, [])))
    spec = _wrap("model", ModelSpec, H, diffusive, jumps, name=name)

    states = _get(doc, "states", "", dict)
    _check_keys(states, {"rho0", "rho_hat0"}, "states")
    rho0 = decode_matrix(_get(states, "rho0", "states", list), "states.rho0")
    rho_hat0 = decode_matrix(_get(states, "rho_hat0", "states", list), "states.rho_hat0")

    sim_t = _get(doc, "simulation", "", dict)
    _check_keys(sim_t, {"dt", "horizon", "seed", "max_jump_prob", "renorm_every"}, "simulation")
    sim = _wrap(
        "simulation",
        SimConfig,
        dt=_get(sim_t, "dt", "simulation", float),
        horizon=_get(sim_t, "horizon", "simulation", float),
        seed=_get(sim_t, "seed", "simulation", int, 0),
        max_jump_prob=_get(sim_t, "max_jump_prob", "simulation", float, 0.1),
        renorm_every=_get(sim_t, "renorm_every", "simulation", int, 1),
    )

    exp = _get(doc, "experiment", "", dict, {})
    _check_keys(exp, {"kind", "n_traj", "sample_times", "gamma_threshold", "tolerances"}, "experiment")
    kind = _get(exp, "kind", "experiment", str, Experiment.FIDELITY.value)
    try:
        kind = Experiment(kind)
    except ValueError:
        choices = ", ".join(e.value for e in Experiment)
        raise ConfigError(f"unknown experiment {kind!r} (choose from {choices})", "experiment.kind") from None
    times = _get(exp, "sample_times", "experiment", list, None)
    if times is None:
        times = _default_times(sim)
    else:
        for i, t in enumerate(times):
            if not _is_number(t):
                raise ConfigError("expected a number", f"experiment.sample_times[{i}]")
        times = tuple(float(t) for t in times)
    tolerances = _get(exp, "tolerances", "experiment", dict, {})
    for key, value in tolerances.items():
        if not (_is_number(value) or isinstance(value, bool)):
            raise ConfigError("tolerance must be a number or boolean", f"experiment.tolerances.{key}")
    return _wrap(
        "experiment",
        ExperimentConfig,
        spec=spec,
        rho0=rho0,
        rho_hat0=rho_hat0,
        n_traj=_get(exp, "n_traj", "experiment", int, 1),
        sim=sim,
        sample_times=times,
        experiment=kind,
        gamma_threshold=_get(exp, "gamma_threshold", "experiment", float, 0.95),
        tolerances=dict(tolerances),
        name=name,
    )


def to_dict(cfg):
    spec = cfg.spec
    return {
        "name": cfg.name,
        "model": {
            "hamiltonian": encode_matrix(spec.hamiltonian),
            "diffusive": [encode_matrix(L) for L in spec.diffusive],
            "jumps": [encode_matrix(C) for C in spec.jumps],
        },
        "states": {"rho0": encode_matrix(cfg.rho0), "rho_hat0": encode_matrix(cfg.rho_hat0)},
        "simulation": {
            "dt": cfg.sim.dt,
            "horizon": cfg.sim.horizon,
            "seed": cfg.sim.seed,
            "max_jump_prob": cfg.sim.max_jump_prob,
            "renorm_every": cfg.sim.renorm_every,
        },
        "experiment": {
            "kind": cfg.experiment.value,
            "n_traj": cfg.n_traj,
            "sample_times": list(cfg.sample_times),
            "gamma_threshold": cfg.gamma_threshold,
            "tolerances": dict(cfg.tolerances),
        },
    }


def _depth(x):
    return 1 + max((_depth(v) for v in x), default=0) if isinstance(x, list) else 0


def _scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not np.isfinite(v):
            raise ValueError(f"cannot serialize non-finite float {v!r}")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _value(v, indent=0):
    if not isinstance(v, list):
        return _scalar(v)
    if _depth(v) <= 2:
        return "[" + ", ".join(_value(x) for x in v) + "]"
    pad = "    " * (indent + 1)
    inner = ",\n".join(pad + _value(x, indent + 1) for x in v)
    return "[\n" + inner + ",\n" + "    " * indent + "]"


def dumps_toml(doc, _prefix=""):
    """Serialize nested dicts of scalars and arrays; matrix rows stay on one line each."""
    lines = []
    for key, v in doc.items():
        if not isinstance(v, dict):
            lines.append(f"{key} = {_value(v)}")
    for key, v in doc.items():
        if isinstance(v, dict):
            name = f"{_prefix}{key}"
            body = dumps_toml(v, name + ".")
            lines.append(f"\n[{name}]\n{body}".rstrip("\n"))
    return "\n".join(lines).lstrip("\n") + "\n"


def parse_config(text):
    """Parse TOML text; syntax errors report line and column."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    return from_dict(doc)


def serialize_config(cfg):
    return dumps_toml(to_dict(cfg))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not UTF-8: {exc}") from exc
    return parse_config(text)


def save_config(cfg, path):
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")


def config_hash(cfg):
    """SHA-256 of the canonical JSON form (sorted keys, ``repr`` floats)."""
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def bundled_path(name):
    """Filesystem path of a bundled config, e.g. ``bundled_path("qnd_qubit")``."""
    if name not in BUNDLED:
        raise KeyError(f"no bundled config {name!r}; available: {', '.join(BUNDLED)}")
    return Path(str(resources.files("qtraj") / "configs" / f"{name}.toml"))


def load_bundled(name):
    return load_config(bundled_path(name))
