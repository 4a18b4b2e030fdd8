"""Run configuration: flat INI sections with dotted command-line overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace

from .core_model import ConstraintSpec, DisturbanceSpec, ModelParams
from .driver import IdmParams
from .env import RewardConfig
from .td3 import Td3Config

METHODS = ("rmpc-only", "raw-rl", "safe-rl")
ENV_MODE = {"rmpc-only": "rmpc", "raw-rl": "raw", "safe-rl": "safe"}


@dataclass(frozen=True)
class MpcSection:
    N: int = 20
    q1: float = 1.0
    q2: float = 1.0
    R: float = 1.0
    Rl: float = 50.0
    mrpi_eps: float = 1e-3
    n_hold: int = 4
    backoff: float = 1e-7


@dataclass(frozen=True)
class RunSection:
    scenario: str = "C"
    mode: str = "safe-rl"
    episodes: int = 500
    n_steps: int = 300
    seed: int = 0
    eval_seeds: str = "0,1"
    n_preferences: int = 50
    T_lo: float = 0.5
    T_hi: float = 3.0
    preference_file: str = ""
    profile_dir: str = ""
    checkpoint_every: int = 100
    collision_gap: float = 0.0
    reward_action: str = "applied"
    gradient_tol: float = 1e-4

    def __post_init__(self):
        if self.mode not in METHODS:
            raise ValueError(f"mode must be one of {METHODS}, got {self.mode!r}")
        if self.scenario not in ("A", "B", "C"):
            raise ValueError(f"scenario must be A, B or C, got {self.scenario!r}")
        if self.episodes < 0 or self.n_steps <= 0 or self.n_preferences <= 0:
            raise ValueError("episodes, n_steps and n_preferences must be positive")

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.eval_seeds.split(",") if s.strip()]


# section name -> (RunConfig attribute, dataclass type)
SECTIONS = {
    "model": ("model", ModelParams),
    "constraints": ("constraints", ConstraintSpec),
    "disturbance": ("disturbance", DisturbanceSpec),
    "reward": ("reward", RewardConfig),
    "mpc": ("mpc", MpcSection),
    "td3": ("td3", Td3Config),
    "idm": ("idm", IdmParams),
    "run": ("run", RunSection),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams = field(default_factory=ModelParams)
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    reward: RewardConfig = field(default_factory=RewardConfig)
    mpc: MpcSection = field(default_factory=MpcSection)
    td3: Td3Config = field(default_factory=Td3Config)
    idm: IdmParams = field(default_factory=IdmParams)
    run: RunSection = field(default_factory=RunSection)

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``section.key=value`` strings; each section is validated once, after all its edits."""
        grouped: dict[str, dict[str, str]] = {}
        for pair in pairs:
            if "=" not in pair or "." not in pair.split("=", 1)[0]:
                raise ValueError(f"override must look like section.key=value, got {pair!r}")
            lhs, value = pair.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            grouped.setdefault(sec, {})[key.strip()] = value.strip()
        cfg = self
        for sec, kv in grouped.items():
            cfg = cfg._set_many(sec, kv)
        return cfg

    def _set_many(self, sec: str, kv: dict[str, str]) -> "RunConfig":
        if sec not in SECTIONS:
            raise ValueError(f"unknown config section {sec!r}")
        attr, cls = SECTIONS[sec]
        obj = getattr(self, attr)
        names = {f.name for f in _init_fields(cls)}
        for key in kv:
            if key not in names:
                raise ValueError(f"unknown key {key!r} in section [{sec}]")
        new = replace(obj, **{k: _parse(v, getattr(obj, k)) for k, v in kv.items()})
        return replace(self, **{attr: new})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, (attr, cls) in SECTIONS.items():
            obj = getattr(self, attr)
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in _init_fields(cls)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        cfg = cls()
        for sec in cp.sections():
            cfg = cfg._set_many(sec, dict(cp[sec].items()))
        return cfg

    def header_lines(self, **extra) -> list[str]:
        """Comment lines embedding the resolved configuration."""
        lines = [f"# {k} = {v}" for k, v in extra.items()]
        lines += ["# " + ln if ln else "#" for ln in self.to_ini().strip().splitlines()]
        return lines


def _init_fields(cls):
    return [f for f in fields(cls) if f.init]


def _fmt(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(",".join(repr(float(x)) for x in row) for row in v)
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def full_scale(cfg: RunConfig) -> RunConfig:
    """Full-size training and horizon values instead of the desk defaults."""
    return cfg.with_overrides(["mpc.N=50", "run.episodes=5000", "run.n_preferences=100"])


def dataclass_dict(obj) -> dict:
    return dataclasses.asdict(obj)
