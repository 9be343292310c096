"""Flat key/value run configuration.

The file is TOML restricted to scalar values; dotted keys (``ovm.alpha``)
and ``[section]`` tables are both accepted and flattened. Unknown keys are
rejected. The defaults reproduce the standard experiment setup.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .control import MpcConfig
from .koopman_id import IdConfig
from .traffic_sim import OvmParams

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "dt": 0.05,
    "n_vehicles": 5,
    "ovm.alpha": 0.6,
    "ovm.beta": 0.9,
    "ovm.s_st": 5.0,
    "ovm.s_go": 35.0,
    "ovm.v_max": 30.0,
    "id.n_z": 40,
    "id.t_ini": 40,
    "id.n_future": 50,
    "id.epsilon": 1e-4,
    "id.max_iters": 500,
    "id.data_length": 1200,
    "edmd.n_trajectories": 100,
    "edmd.length": 1200,
    "edmd.n_centers": 30,
    "mpc.r_weight": 0.1,
    "mpc.a_min": -5.0,
    "mpc.a_max": 2.0,
    "mpc.s_min": 5.0,
    "mpc.s_max": 40.0,
    "mpc.tol": 1e-6,
    "scenario.history_dither": 0.1,
    "scenario.a.q_v": 1.0,
    "scenario.a.w_s": 0.5,
    "scenario.a.s_ref": 20.0,
    "scenario.a.v_ref": 15.0,
    "scenario.a.duration": 40.0,
    "scenario.a.disturbance_start": 10.0,
    "scenario.a.disturbance_end": 20.0,
    "scenario.a.ring_length": 140.0,
    "scenario.a.wave_window_start": 10.0,
    "scenario.a.wave_window_end": 40.0,
    "scenario.b.q_v": 1.0,
    "scenario.b.w_s": 0.0,
    "scenario.b.s_ref": 20.0,
    "scenario.b.min_duration": 40.0,
    "scenario.b.max_duration": 60.0,
}


class ConfigError(ValueError):
    pass


def _flatten(table: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


@dataclass(frozen=True)
class Config:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def with_seed(self, seed: int) -> "Config":
        return replace(self, values={**self.values, "seed": int(seed)})

    @property
    def ovm(self) -> OvmParams:
        v = self.values
        return OvmParams(v["ovm.alpha"], v["ovm.beta"], v["ovm.s_st"], v["ovm.s_go"], v["ovm.v_max"])

    @property
    def identification(self) -> IdConfig:
        v = self.values
        return IdConfig(n_z=v["id.n_z"], t_ini=v["id.t_ini"], n_future=v["id.n_future"],
                        epsilon=v["id.epsilon"], max_iters=v["id.max_iters"])

    def mpc(self, scenario: str) -> MpcConfig:
        v = self.values
        common = dict(n_future=v["id.n_future"], r_weight=v["mpc.r_weight"], a_min=v["mpc.a_min"],
                      a_max=v["mpc.a_max"], s_min=v["mpc.s_min"], s_max=v["mpc.s_max"], tol=v["mpc.tol"])
        if scenario == "a":
            return MpcConfig(q_v=v["scenario.a.q_v"], w_s=v["scenario.a.w_s"], s_ref=v["scenario.a.s_ref"],
                             v_ref=v["scenario.a.v_ref"], reference_mode="fixed", **common)
        if scenario == "b":
            return MpcConfig(q_v=v["scenario.b.q_v"], w_s=v["scenario.b.w_s"], s_ref=v["scenario.b.s_ref"],
                             reference_mode="head_mean", **common)
        raise ConfigError(f"unknown scenario {scenario!r}")


def parse_config(text: str) -> Config:
    try:
        raw = _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        values[key] = type(default)(value)
    return Config(values)


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    return parse_config(path.read_text())


def dump_config(cfg: Config) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(cfg.values.items()))
