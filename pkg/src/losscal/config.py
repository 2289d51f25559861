"""Sectioned key/value run configuration with strict parsing.

Every key has a default, so an empty file is a valid configuration.  Unknown
sections or keys are rejected before any work starts.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path



class ConfigParseError(ValueError):
    pass


def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _words(text):
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default, description)
SCHEMA = {
    "run": {
        "seed": (int, 0, "root seed; every random stream is derived from it"),
        "seeds": (int, 5, "number of consecutive root seeds run by reproduce-all"),
        "split": (str, "seen", "training split for `train`: 'seen' (held-out classes removed) or 'full'"),
    },
    "data": {
        "num_classes": (int, 8, "number of inlier classes generated"),
        "input_dim": (int, 16, "feature dimension"),
        "n": (int, 8000, "total inlier samples"),
        "imbalance_ratio": (float, 20.0, "largest/smallest class size"),
        "separation": (float, 3.0, "distance of class means from the origin"),
        "val_fraction": (float, 0.1, "stratified validation fraction"),
        "held_out": (_ints, (5, 6, 7), "classes withheld for unseen-class detection"),
    },
    "arch": {
        "hidden_dims": (_ints, (64, 64, 64, 64), "trunk widths"),
        "tap_layers": (_ints, (0, 1, 2, 3), "trunk layers feeding the loss estimator"),
        "tap_embed_dim": (int, 32, "width of each tap's linear+ReLU transform"),
        "dropout": (float, 0.4, "dropout after each trunk layer (training only)"),
    },
    "train": {
        "epochs": (int, 30, "training epochs"),
        "batch_size": (int, 64, "minibatch size"),
        "base_lr": (float, 1e-3, "initial learning rate"),
        "lr_decay_factor": (float, 0.5, "step decay factor"),
        "lr_decay_every": (int, 10, "epochs between decays"),
        "adam_beta1": (float, 0.9, "Adam first-moment decay"),
        "adam_beta2": (float, 0.999, "Adam second-moment decay"),
        "adam_epsilon": (float, 1e-8, "Adam denominator epsilon"),
        "weight_decay": (float, 5e-4, "decoupled weight decay on non-bias parameters"),
        "augment_noise": (float, 0.05, "Gaussian jitter std for feature augmentation"),
        "augment_flip_prob": (float, 0.0, "per-coordinate sign-flip probability"),
    },
    "loss": {
        "aux": (str, "contrastive", "auxiliary objective: contrastive, mse or none"),
        "lambda": (float, 0.5, "weight of the auxiliary objective"),
        "margin": (float, 0.1, "ranking hinge margin"),
        "all_pairs": (_bool, False, "use every pair in a batch instead of disjoint random pairs"),
        "class_weighting": (str, "inverse", "cross-entropy class weights: inverse (1/count) or uniform"),
    },
    "odin": {
        "t_grid": (_floats, (1.0, 10.0, 100.0, 1000.0), "temperatures searched"),
        "eta_grid": (_floats, (0.0, 0.001, 0.002, 0.005, 0.01, 0.02), "perturbation sizes searched"),
        "tune_kind": (str, "far", "OOD kind used (with its own seed) as the tuning set"),
        "clamp": (_floats, (), "optional 'lo,hi' clamp applied to perturbed inputs"),
    },
    "ood": {
        "kinds": (_words, ("mask-patch", "mask-patch-heavy", "far", "near", "shift"), "evaluation OOD kinds"),
        "mask_fraction": (float, 0.3, "fraction of coordinates zeroed by mask-patch"),
        "heavy_mask_fraction": (float, 0.7, "fraction zeroed by mask-patch-heavy"),
        "far_distance": (float, 0.0, "far-set mean offset, in overall inlier spreads"),
        "far_noise": (float, 1.0, "far-set std, as a multiple of the inlier per-coordinate std"),
        "near_inflation": (float, 0.5, "covariance inflation of near-OOD clusters"),
        "shift_magnitude": (float, 5.0, "translation length of shift-OOD"),
    },
}


class RunConfig:
    """Resolved configuration: ``cfg["train"]["epochs"]`` style access."""

    def __init__(self, values=None):
        self.values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, kv in (values or {}).items():
            for key, value in kv.items():
                self.set(sec, key, value)

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section, key, value, where=None):
        loc = f"{where}: " if where else ""
        if section not in SCHEMA:
            raise ConfigParseError(f"{loc}unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigParseError(f"{loc}unknown key '{key}' in section [{section}]")
        parser = SCHEMA[section][key][0]
        if isinstance(value, str) or parser in (int, float, str):
            try:
                value = parser(value)
            except (TypeError, ValueError) as exc:
                raise ConfigParseError(f"{loc}bad value for {section}.{key}: {exc}") from None
        self.values[section][key] = value

    def override(self, assignment):
        """Apply a ``section.key=value`` string."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigParseError(f"override must look like section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key.strip(), value.strip(), where="--set")

    def to_text(self):
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, (_, _, doc) in keys.items():
                lines.append(f"# {doc}")
                lines.append(f"{key} = {_fmt(self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_text())

    def derive_seed(self, label, root=None):
        """Stable per-purpose sub-seed from the root seed and a text label."""
        root = self["run"]["seed"] if root is None else root
        digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
        return int.from_bytes(digest[:8], "little")

    def validate(self):
        if self["run"]["split"] not in ("seen", "full"):
            raise ConfigParseError("run.split must be 'seen' or 'full'")
        if self["loss"]["aux"] not in ("contrastive", "mse", "none"):
            raise ConfigParseError("loss.aux must be contrastive, mse or none")
        if self["loss"]["class_weighting"] not in ("inverse", "uniform"):
            raise ConfigParseError("loss.class_weighting must be inverse or uniform")
        if self["run"]["seeds"] < 1:
            raise ConfigParseError("run.seeds must be positive")
        clamp = self["odin"]["clamp"]
        if clamp and len(clamp) != 2:
            raise ConfigParseError("odin.clamp must be empty or 'lo,hi'")
        from .synthdata import OOD_KINDS

        for kind in self["ood"]["kinds"] + (self["odin"]["tune_kind"],):
            if kind not in OOD_KINDS:
                raise ConfigParseError(f"unknown OOD kind '{kind}'")
        return self


def _line_of(text, section, key):
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip() == key:
            return lineno
    return None


def load_config(path=None) -> RunConfig:
    """Parse a config file (or return defaults when ``path`` is None)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigParseError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            lineno = next((i for i, l in enumerate(text.splitlines(), 1) if l.strip() == f"[{section}]"), "?")
            raise ConfigParseError(f"{path}:{lineno}: unknown section [{section}]")
        for key, value in parser.items(section):
            cfg.set(section, key, value, where=f"{path}:{_line_of(text, section, key)}")
    return cfg.validate()


def clamp_range(cfg):
    clamp = cfg["odin"]["clamp"]
    return tuple(clamp) if clamp else None
