"""Flat key=value run configuration.

One ``key = value`` per line, ``#`` starts a comment. Keys are the fields
of :class:`RunConfig`; anything else is rejected.
"""
from dataclasses import asdict, dataclass, fields

from .trainer import TrainConfig

FEATURIZE_KEYS = ("epoch_sec", "density", "graph_scope", "nperseg", "overlap")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    epoch_sec: float = 4.0
    density: float = 0.3
    graph_scope: str = "epoch"
    nperseg: int | None = None
    overlap: float = 0.5
    workers: int = 0  # fold processes; 0 = VMOGE_THREADS or cpu count

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def featurize_kwargs(self):
        return {k: getattr(self, k) for k in FEATURIZE_KEYS}

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides):
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        d = asdict(self)
        d.update(overrides)
        return RunConfig(**d)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {}


def _field_types():
    if not _TYPES:
        defaults = RunConfig()
        for f in fields(RunConfig):
            _TYPES[f.name] = type(getattr(defaults, f.name))
        _TYPES["nperseg"] = int
    return _TYPES


def parse_value(key, text):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    s = text.strip()
    if s.lower() == "none" and key == "nperseg":
        return None
    try:
        if t is bool:
            low = s.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(s)
            return low in ("true", "1", "yes")
        if t is int:
            return int(s)
        if t is float:
            return float(s)
    except ValueError:
        raise ConfigError(f"bad value {s!r} for {key} (expected {t.__name__})") from None
    return s


def parse_text(text):
    """key=value lines -> dict of typed values."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        out[k] = parse_value(k, v)
    return out


def load_config(path, **overrides):
    with open(path) as fh:
        values = parse_text(fh.read())
    values.update(overrides)
    return RunConfig().replace(**values)
