"""Run configuration: a line-oriented key = value file plus flag overrides.

Flags always win over file values; defaults that the recipe ties to the
architecture (learning rate, anneal factor, warm-up length) are resolved
after both are merged, from whether the run is tiled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .network import POOL_KINDS, NetworkConfig
from .tiling import SCHEME_KINDS
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config"]

# Recipe defaults: (lr, lr_gamma, warmup_epochs).
UNTILED_DEFAULTS = (0.005, 0.5, 1)
TILED_DEFAULTS = (0.05, 0.75, 5)


class ConfigError(ValueError):
    """Unknown key, unparseable value, or constraint violation."""


def _int(s: str) -> int:
    return int(s, 10)


def _nonneg_int(s: str) -> int:
    v = _int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _pos_int(s: str) -> int:
    v = _int(s)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if v <= 0:
        raise ValueError(f"must be > 0, got {v}")
    return v


def _gamma(s: str) -> float:
    v = float(s)
    if not (0 < v <= 1):
        raise ValueError(f"must be in (0, 1], got {v}")
    return v


def _triple(s: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated integers, got {s!r}")
    vals = tuple(_pos_int(p) for p in parts)
    return vals


def _scheme(s: str) -> str:
    if s not in SCHEME_KINDS:
        raise ValueError(f"unknown scheme {s!r}; expected one of {'|'.join(SCHEME_KINDS)}")
    return s


def _pooling(s: str) -> str:
    if s not in POOL_KINDS:
        raise ValueError(f"unknown pooling {s!r}; expected one of {'|'.join(POOL_KINDS)}")
    return s


def _eps_grid(s: str) -> tuple[float, ...]:
    vals = tuple(float(p.strip()) for p in s.split(",") if p.strip())
    if not vals:
        raise ValueError("eps grid must not be empty")
    if any(v < 0 for v in vals):
        raise ValueError("eps values must be >= 0")
    return vals


def _cost_layers(s: str) -> tuple[tuple[int, int, int, int], ...]:
    layers = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        fields = [f.strip() for f in part.split(",")]
        if len(fields) != 4:
            raise ValueError(
                f"each layer needs 'n_p,k,c_out,n_t', got {part!r}"
            )
        layers.append(tuple(_pos_int(f) for f in fields))
    if not layers:
        raise ValueError("cost_layers must list at least one layer")
    return tuple(layers)


_KEYS = {
    "data": str,
    "out": str,
    "checkpoint": str,
    "scheme": _scheme,
    "pooling": _pooling,
    "tiles": _triple,
    "channels": _triple,
    "classes": _pos_int,
    "lr": _pos_float,
    "lr_gamma": _gamma,
    "warmup": _nonneg_int,
    "epochs": _nonneg_int,
    "batch": _pos_int,
    "seed": _int,
    "subset": _nonneg_int,
    "test_subset": _nonneg_int,
    "votes": _pos_int,
    "workers": _nonneg_int,
    "eps_grid": _eps_grid,
    "theory_instances": _pos_int,
    "cost_layers": _cost_layers,
}


@dataclass
class RunConfig:
    data: str = ""
    out: str = "."
    checkpoint: str = ""
    scheme: str = "none"
    pooling: str = "max"
    tiles: tuple[int, int, int] = (1, 1, 1)
    channels: tuple[int, int, int] = (32, 32, 64)
    classes: int = 10
    lr: float = UNTILED_DEFAULTS[0]
    lr_gamma: float = UNTILED_DEFAULTS[1]
    warmup: int = UNTILED_DEFAULTS[2]
    epochs: int = 30
    batch: int = 10
    seed: int = 0
    subset: int = 0  # 0 = full split
    test_subset: int = 0
    votes: int = 5
    workers: int = 0  # 0 = automatic
    eps_grid: tuple[float, ...] = (0.0, 2.0, 4.0, 8.0, 16.0, 32.0)
    theory_instances: int = 100
    cost_layers: tuple[tuple[int, int, int, int], ...] | None = None
    explicit: frozenset = field(default_factory=frozenset)

    @property
    def tiled(self) -> bool:
        return self.scheme != "none"

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            channels=self.channels,
            tiles=self.tiles,
            scheme=self.scheme,
            pooling=self.pooling,
            classes=self.classes,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            lr_gamma=self.lr_gamma,
            warmup_epochs=self.warmup,
            epochs=self.epochs,
            batch_size=self.batch,
        )


def _parse_value(key: str, raw: str, where: str) -> object:
    if key not in _KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return _KEYS[key](raw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{where}: invalid value for {key!r}: {e}") from e


def parse_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a validated RunConfig from a file and/or flag overrides.

    The file is line-oriented `key = value`; blank lines and lines starting
    with '#' are skipped. Diagnostics name the offending key and line.
    """
    values: dict[str, object] = {}
    explicit: set[str] = set()
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            values[key] = _parse_value(key, raw.strip(), f"{path}:{lineno}")
            explicit.add(key)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _parse_value(key, raw, f"flag --{key.replace('_', '-')}")
        explicit.add(key)

    cfg = RunConfig(**values, explicit=frozenset(explicit))

    # Architecture-coupled defaults: untiled vs tiled recipe values.
    defaults = TILED_DEFAULTS if cfg.tiled else UNTILED_DEFAULTS
    if "lr" not in cfg.explicit:
        cfg = replace(cfg, lr=defaults[0])
    if "lr_gamma" not in cfg.explicit:
        cfg = replace(cfg, lr_gamma=defaults[1])
    if "warmup" not in cfg.explicit:
        cfg = replace(cfg, warmup=defaults[2])

    # Cross-field validation happens in the module configs.
    try:
        cfg.network_config()
        cfg.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg
