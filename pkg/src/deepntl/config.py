"""Plain-text ``key = value`` run configuration.

Every tunable default of the toolkit has a key here.  Unknown keys are
rejected so typos fail loudly, and :meth:`RunConfig.dumps` writes the fully
resolved configuration that accompanies every command-line run.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # randomness and execution
    seed: int = 0
    threads: int = 1
    # reference pairing
    ref_dmsp: str = "2014F15"
    ref_viirs_year: int = 2014
    # VIIRS cleaning
    viirs_floor: float = 0.5
    viirs_ceil: float = 496.0
    viirs_ceil_quantile: float = 0.9999
    # calibration
    base_product: str = "1999F12"
    spatial_quantile: float = 0.25
    temporal_quantile: float = 0.25
    # sampling and dataset
    n_points: int = 30000
    tile_h: int = 128
    tile_w: int = 128
    min_lit: float = 0.01
    max_attempts_per_point: int = 1000
    train_frac: float = 0.95
    split_by_point: bool = False
    # model
    model_c: int = 32
    f3: str = "1,32,32,16"
    hstar: str = "2,32,32,32"
    gstar: str = "64,64,1,32"
    f1: str = "64,6,6,16"
    model_variant: str = "deepntl"
    dmsp_scale: float = 63.0
    viirs_scale: str = "auto"  # "auto": std of the training targets
    # training
    lr0: float = 1e-4
    decay: float = 0.95
    patience: int = 3
    batch_size: int = 4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # inference and evaluation
    overlap: int = 0
    infer_batch: int = 8
    metric_max: float = 496.0

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return cls().update(values, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def update(self, values: dict, source: str = "<override>") -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        converted = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r}")
            converted[key] = _convert(key, value, types[key], source)
        return replace(self, **converted)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


def _convert(key, value, typ, source):
    if not isinstance(value, str):
        return value
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        if typ in ("bool", bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(f"{source}: bad value {value!r} for {key!r}") from None
    return value


def quad(text: str) -> tuple[int, int, int, int]:
    """Parse ``"a,b,c,d"`` into four ints."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"expected four comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"expected four comma-separated integers, got {text!r}") from None
