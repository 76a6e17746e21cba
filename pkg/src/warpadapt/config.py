"""Run configuration: ``section.key = value`` text files.

Every key has a default below; a config file only lists overrides.
Unknown or duplicated keys are hard errors so typos cannot silently
fall back to defaults, and each command echoes its fully resolved
configuration next to its outputs.
"""

import re

from . import data as D
from . import engine as E
from . import geometry as G
from . import model as Mo

_KEY_RE = re.compile(r"^[a-z]+\.[a-z0-9_]+$")

DEFAULTS = {
    "run.seed": 17,
    "run.data_dir": "data",
    "dataset.n_train": 600,
    "dataset.n_val": 100,
    "dataset.n_test": 200,
    "dataset.height": 128,
    "dataset.width": 256,
    "dataset.noise_amplitude": 8.0,
    "distortion.f": 125.0,
    "distortion.k1": -0.28,
    "distortion.k2": 0.0,
    "distortion.k3": 0.0,
    "distortion.k4": 0.0,
    "model.n_classes": Mo.N_CLASSES_DEFAULT,
    "baseline.epochs": 40,
    "baseline.lr_encoder": 0.005,
    "baseline.lr_decoder": 0.05,
    "baseline.batch_size": 8,
    "adapt.epochs": 35,
    "adapt.lr_encoder": 0.0005,
    "adapt.lr_decoder": 0.005,
    "adapt.batch_size": 4,
    "adapt.warmup_epochs": 2.0,
    "adapt.mode": E.MODE_DCN_BN,
    "adapt.placement": "BOTH",
    "augment.enabled": True,
    "augment.hflip_prob": 0.5,
    "augment.scale_min": 1.0,
    "augment.scale_max": 1.0,
    "augment.max_rotation_deg": 0.0,
    "sweep.seeds": (17, 42, 1337),
    "sweep.fewshot": (1, 50, 100, "full"),
}


def _parse_bool(token):
    low = token.lower()
    if low not in ("true", "false"):
        raise ValueError(f"expected true or false, got {token!r}")
    return low == "true"


def _parse_int(token):
    if not re.fullmatch(r"[+-]?\d+", token):
        raise ValueError(f"expected an integer, got {token!r}")
    return int(token)


def _parse_seeds(token):
    return tuple(_parse_int(t) for t in token.split())


def _parse_fewshot(token):
    out = []
    for t in token.split():
        out.append("full" if t == "full" else _parse_int(t))
    return tuple(out)


_SPECIAL_PARSERS = {
    "sweep.seeds": _parse_seeds,
    "sweep.fewshot": _parse_fewshot,
}


def _parser_for(key):
    special = _SPECIAL_PARSERS.get(key)
    if special is not None:
        return special
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return _parse_int
    if isinstance(default, float):
        return float
    return str


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


class Config:
    """Resolved configuration with typed accessors for each subsystem."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            for key, value in values.items():
                self.set(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        self.values[key] = value

    def set_text(self, key, token):
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        self.values[key] = _parser_for(key)(token)

    # -- typed builders ------------------------------------------------------

    def dataset_spec(self, seed):
        return D.DatasetSpec(seed=int(seed),
                             n_train=self["dataset.n_train"],
                             n_val=self["dataset.n_val"],
                             n_test=self["dataset.n_test"],
                             height=self["dataset.height"],
                             width=self["dataset.width"],
                             noise_amplitude=self["dataset.noise_amplitude"])

    def distortion_params(self, f=None):
        return G.fisheye_params(self["distortion.f"] if f is None else f,
                                k1=self["distortion.k1"],
                                k2=self["distortion.k2"],
                                k3=self["distortion.k3"],
                                k4=self["distortion.k4"])

    def augment_config(self):
        if not self["augment.enabled"]:
            return None
        return D.AugmentConfig(
            hflip_prob=self["augment.hflip_prob"],
            scale_range=(self["augment.scale_min"], self["augment.scale_max"]),
            max_rotation_deg=self["augment.max_rotation_deg"])

    def baseline_config(self, seed):
        return E.BaselineConfig(epochs=self["baseline.epochs"],
                                lr_encoder=self["baseline.lr_encoder"],
                                lr_decoder=self["baseline.lr_decoder"],
                                batch_size=self["baseline.batch_size"],
                                seed=int(seed),
                                augment=self.augment_config(),
                                n_classes=self["model.n_classes"])

    def adaptation_config(self, mode, placement, subset_n, seed):
        return E.AdaptationConfig(mode=mode, placement=placement,
                                  epochs=self["adapt.epochs"],
                                  lr_encoder=self["adapt.lr_encoder"],
                                  lr_decoder=self["adapt.lr_decoder"],
                                  batch_size=self["adapt.batch_size"],
                                  warmup_epochs=self["adapt.warmup_epochs"],
                                  subset_n=subset_n, seed=int(seed),
                                  augment=self.augment_config())

    def fewshot_sizes(self):
        return tuple(None if n == "full" else n
                     for n in self["sweep.fewshot"])

    # -- text round trip -----------------------------------------------------

    def resolved_text(self):
        lines = [f"{key} = {_format_value(self.values[key])}"
                 for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, path):
        with open(path, "w") as fh:
            fh.write(self.resolved_text())


def parse_config_text(text):
    """Parse override lines into a Config; see the module docstring."""
    cfg = Config()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, token = line.partition("=")
        key = key.strip()
        token = token.strip()
        if not eq or not token:
            raise ValueError(f"line {lineno}: expected 'section.key = value', "
                             f"got {raw.strip()!r}")
        if not _KEY_RE.match(key):
            raise ValueError(f"line {lineno}: malformed key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            cfg.set_text(key, token)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None):
    """Config from a file, or all defaults when no path is given."""
    if path is None:
        return Config()
    with open(path) as fh:
        return parse_config_text(fh.read())
