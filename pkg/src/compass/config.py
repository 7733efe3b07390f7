"""Configuration handling: defaults, JSON load/dump, validation, hashing.

Config files are flat JSON objects; every key maps onto one field of one
of the four config groups below. Unknown keys are rejected, omitted keys
take the documented defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from compass.errors import ConfigError


@dataclass
class SimConfig:
    """Environment scale, sensing, motion, and history-buffer settings."""

    K: int = 200                     # graph nodes
    k_nn: int = 10                   # nearest neighbors per node
    M: int = 3                       # agents
    N: int = 8                       # targets
    r_sense: float = 0.1             # sensing radius, workspace units
    speed_factor: float = 0.6        # target speed / agent speed
    B: int = 30                      # per-agent action budget (evaluation)
    train_horizon: int = 100         # episode length in training mode
    H: int = 5                       # pooled history slots
    stride: int = 2                  # temporal pooling stride (raw steps per slot)
    delta: int = 1                   # future-prediction horizon, steps
    heading_noise_std: float = 0.2   # target heading perturbation, radians
    waypoint_redraw_prob: float = 0.05
    seed: int = 0


@dataclass
class KernelConfig:
    """Spatio-temporal kernel hyperparameters and belief window policy."""

    sigma_f2: float = 1.0    # amplitude (prior variance)
    ell_s: float = 0.2       # spatial length scale, workspace units
    ell_t: float = 40.0      # temporal length scale, decision steps
    sigma_n2: float = 0.01   # observation noise variance
    w_max: int = 200         # max observations retained per target
    t_horizon: int = 50      # observations older than now - t_horizon are evicted


@dataclass
class NetConfig:
    """Policy network dimensions and structural switches."""

    d_e: int = 64
    n_heads: int = 4
    n_spatial_layers: int = 2
    d_pe: int = 8            # Laplacian positional-encoding width
    ffn_mult: int = 4
    critic: str = "central"  # or "decentralized"
    variant: str = "full"    # full | no_presence | no_spatial | no_temporal


@dataclass
class PPOConfig:
    """Optimization hyperparameters."""

    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    n_env: int = 16
    rollout_T: int = 100
    epochs: int = 4
    lr0: float = 1e-4
    lr_decay: float = 0.96
    lr_decay_every: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    n_minibatches: int = 4
    total_env_steps: int = 20000
    iterations: int | None = None    # overrides total_env_steps when set
    checkpoint_every: int = 50


_GROUPS = {"sim": SimConfig, "kernel": KernelConfig, "net": NetConfig, "ppo": PPOConfig}

# key -> group name, built once from the dataclass field lists
_KEY_TO_GROUP: dict[str, str] = {}
for _gname, _gcls in _GROUPS.items():
    for _f in dataclasses.fields(_gcls):
        if _f.name in _KEY_TO_GROUP:
            raise AssertionError(f"duplicate config key {_f.name}")
        _KEY_TO_GROUP[_f.name] = _gname

_CRITIC_CHOICES = ("central", "decentralized")
_VARIANT_CHOICES = ("full", "no_presence", "no_spatial", "no_temporal")


@dataclass
class Config:
    """All settings for one run, grouped by concern."""

    sim: SimConfig = field(default_factory=SimConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def to_dict(self) -> dict:
        """Flat dict of every key (round-trips through from_dict)."""
        out = {}
        for gname in _GROUPS:
            out.update(dataclasses.asdict(getattr(self, gname)))
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for key, value in data.items():
            group = _KEY_TO_GROUP.get(key)
            if group is None:
                raise ConfigError(f"unknown config key: {key!r}")
            setattr(getattr(cfg, group), key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        s, k, n, p = self.sim, self.kernel, self.net, self.ppo
        _check(s.K >= 2, "K", "must be >= 2")
        _check(1 <= s.k_nn < s.K, "k_nn", "must satisfy 1 <= k_nn < K")
        _check(s.M >= 1, "M", "must be >= 1")
        _check(s.M <= s.K, "M", "must be <= K (agents occupy distinct nodes)")
        _check(s.N >= 1, "N", "must be >= 1")
        _check(s.r_sense > 0, "r_sense", "must be > 0")
        _check(s.speed_factor >= 0, "speed_factor", "must be >= 0")
        _check(s.B >= 1, "B", "must be >= 1")
        _check(s.train_horizon >= 1, "train_horizon", "must be >= 1")
        _check(s.H >= 1, "H", "must be >= 1")
        _check(s.stride >= 1, "stride", "must be >= 1")
        _check(s.delta >= 0, "delta", "must be >= 0")
        _check(s.heading_noise_std >= 0, "heading_noise_std", "must be >= 0")
        _check(0 <= s.waypoint_redraw_prob <= 1, "waypoint_redraw_prob", "must be in [0, 1]")
        for name in ("sigma_f2", "ell_s", "ell_t", "sigma_n2"):
            _check(getattr(k, name) > 0, name, "must be > 0")
        _check(k.w_max >= 1, "w_max", "must be >= 1")
        _check(k.t_horizon >= 1, "t_horizon", "must be >= 1")
        _check(n.d_e >= 1, "d_e", "must be >= 1")
        _check(n.n_heads >= 1, "n_heads", "must be >= 1")
        _check(n.d_e % n.n_heads == 0, "d_e", "must be divisible by n_heads")
        _check(n.n_spatial_layers >= 1, "n_spatial_layers", "must be >= 1")
        _check(1 <= n.d_pe < s.K, "d_pe", "must satisfy 1 <= d_pe < K")
        _check(n.ffn_mult >= 1, "ffn_mult", "must be >= 1")
        _check(n.critic in _CRITIC_CHOICES, "critic", f"must be one of {_CRITIC_CHOICES}")
        _check(n.variant in _VARIANT_CHOICES, "variant", f"must be one of {_VARIANT_CHOICES}")
        _check(0 < p.clip_eps < 1, "clip_eps", "must be in (0, 1)")
        _check(0 < p.gamma <= 1, "gamma", "must be in (0, 1]")
        _check(0 < p.lam <= 1, "lam", "must be in (0, 1]")
        _check(p.n_env >= 1, "n_env", "must be >= 1")
        _check(p.rollout_T >= 1, "rollout_T", "must be >= 1")
        _check(p.epochs >= 1, "epochs", "must be >= 1")
        _check(p.lr0 > 0, "lr0", "must be > 0")
        _check(0 < p.lr_decay <= 1, "lr_decay", "must be in (0, 1]")
        _check(p.lr_decay_every >= 1, "lr_decay_every", "must be >= 1")
        _check(p.entropy_coef >= 0, "entropy_coef", "must be >= 0")
        _check(p.value_coef >= 0, "value_coef", "must be >= 0")
        _check(p.max_grad_norm > 0, "max_grad_norm", "must be > 0")
        _check(p.n_minibatches >= 1, "n_minibatches", "must be >= 1")
        _check(p.total_env_steps >= 1, "total_env_steps", "must be >= 1")
        if p.iterations is not None:
            _check(p.iterations >= 1, "iterations", "must be >= 1 when set")
        _check(p.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")

    @property
    def feature_width(self) -> int:
        """Per-node raw feature width: 2N current + 2N future GP stats, presence, x, y."""
        return 4 * self.sim.N + 3

    @property
    def raw_history_len(self) -> int:
        return self.sim.H * self.sim.stride

    def hash(self) -> str:
        """Short content digest of the resolved configuration."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def n_iterations(self) -> int:
        p = self.ppo
        if p.iterations is not None:
            return p.iterations
        per_iter = p.n_env * p.rollout_T
        return max(1, -(-p.total_env_steps // per_iter))


def _check(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"config key {key!r}: {msg}")


def load_config(path: str) -> Config:
    """Parse a flat JSON config file; omitted keys keep their defaults."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(data).__name__}")
    return Config.from_dict(data)


def dump_config(cfg: Config, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
