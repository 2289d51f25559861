"""Predictor trunk with tap points, and the loss-estimator head fed by the taps.

The predictor is a fully connected ReLU trunk followed by a linear classifier.
The estimator transforms each tapped trunk activation with its own
linear+ReLU layer, concatenates the results, and maps them to one scalar per
sample with a final linear layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Tape


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (64, 64, 64, 64)
    num_classes: int = 8
    tap_layers: tuple[int, ...] = (0, 1, 2, 3)
    tap_embed_dim: int = 32
    dropout: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        self.validate()

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be a nonempty list of positive widths")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.tap_layers:
            raise ConfigError("at least one tap layer is required")
        if len(set(self.tap_layers)) != len(self.tap_layers):
            raise ConfigError(f"tap_layers must be distinct: {self.tap_layers}")
        bad = [t for t in self.tap_layers if not 0 <= t < len(self.hidden_dims)]
        if bad:
            raise ConfigError(f"tap_layers {bad} are not trunk indices 0..{len(self.hidden_dims) - 1}")
        if self.tap_embed_dim < 1:
            raise ConfigError("tap_embed_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def param_shapes(self):
        """Ordered mapping of parameter name to shape."""
        shapes = {}
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes[f"trunk.{i}.W"] = (fan_in, h)
            shapes[f"trunk.{i}.b"] = (h,)
            fan_in = h
        shapes["head.W"] = (fan_in, self.num_classes)
        shapes["head.b"] = (self.num_classes,)
        for t in self.tap_layers:
            shapes[f"tap.{t}.W"] = (self.hidden_dims[t], self.tap_embed_dim)
            shapes[f"tap.{t}.b"] = (self.tap_embed_dim,)
        shapes["est.W"] = (self.tap_embed_dim * len(self.tap_layers), 1)
        shapes["est.b"] = (1,)
        return shapes


def is_estimator_param(name):
    return name.startswith(("tap.", "est."))


@dataclass
class JointModel:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def predictor_params(self):
        return {k: v for k, v in self.params.items() if not is_estimator_param(k)}

    @property
    def estimator_params(self):
        return {k: v for k, v in self.params.items() if is_estimator_param(k)}

    def copy(self):
        return JointModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.seed, dict(self.meta))


def init_model(arch: ArchConfig, seed: int) -> JointModel:
    """He-normal weights (variance 2 / fan-in), zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    return JointModel(arch, params, seed)


def dropout_masks(arch, n, rng):
    """Inverted-dropout masks for each hidden layer (kept units scaled by 1/(1-p))."""
    keep = 1.0 - arch.dropout
    return {f"mask.{i}": (rng.random((n, h)) < keep) / keep for i, h in enumerate(arch.hidden_dims)}


def build_predictor(tape: Tape, arch: ArchConfig, x, dropout=False):
    """Record the trunk and classifier; returns (logits node, tap nodes)."""
    h = x
    taps = {}
    for i in range(len(arch.hidden_dims)):
        h = tape.relu(tape.affine(h, tape.param(f"trunk.{i}.W"), tape.param(f"trunk.{i}.b")))
        if i in arch.tap_layers:
            taps[i] = h
        if dropout and arch.dropout > 0:
            h = tape.mul(h, tape.const(f"mask.{i}"))
    logits = tape.affine(h, tape.param("head.W"), tape.param("head.b"), name="logits")
    return logits, [taps[t] for t in arch.tap_layers]


def build_estimator(tape: Tape, arch: ArchConfig, taps):
    """Record the estimator head over tap nodes; returns the [n] estimate node."""
    if len(taps) != len(arch.tap_layers):
        raise ConfigError(f"estimator expects {len(arch.tap_layers)} taps, got {len(taps)}")
    embeds = [
        tape.relu(tape.affine(node, tape.param(f"tap.{t}.W"), tape.param(f"tap.{t}.b")))
        for t, node in zip(arch.tap_layers, taps)
    ]
    joined = embeds[0] if len(embeds) == 1 else tape.concat(*embeds)
    out = tape.affine(joined, tape.param("est.W"), tape.param("est.b"))
    return tape.reshape(out, shape=("n",), name="loss_estimate")


def _check_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError(f"expected a nonempty [n, {model.arch.input_dim}] batch, got shape {x.shape}")
    if x.shape[1] != model.arch.input_dim:
        raise ConfigError(
            f"input has {x.shape[1]} features but the model expects {model.arch.input_dim}"
        )
    return x


def predictor_forward(model: JointModel, x, train_mode=False, rng=None):
    """Logits [n, K] and the raw tapped trunk activations, in tap order."""
    x = _check_batch(model, x)
    tape = Tape()
    logits, taps = build_predictor(tape, model.arch, tape.input("x"), dropout=train_mode)
    bindings = dict(model.params, x=x)
    if train_mode and model.arch.dropout > 0:
        bindings.update(dropout_masks(model.arch, x.shape[0], rng or np.random.default_rng()))
    tape.forward(bindings)
    return tape.value(logits), [tape.value(t) for t in taps]


def estimator_forward(model: JointModel, taps):
    """Unclamped loss estimates, one per row."""
    arch = model.arch
    if len(taps) != len(arch.tap_layers):
        raise ConfigError(f"estimator expects {len(arch.tap_layers)} taps, got {len(taps)}")
    tape = Tape()
    leaves = [tape.input(f"tap_in.{t}") for t in arch.tap_layers]
    out = build_estimator(tape, arch, leaves)
    bindings = dict(model.estimator_params)
    for t, value in zip(arch.tap_layers, taps):
        bindings[f"tap_in.{t}"] = value
    tape.forward(bindings)
    return tape.value(out)


def joint_forward(model: JointModel, x):
    """Eval-mode logits and loss estimates in one pass."""
    logits, taps = predictor_forward(model, x)
    return logits, estimator_forward(model, taps)
