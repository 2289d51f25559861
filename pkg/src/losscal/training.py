"""Joint training of predictor and loss estimator.

Each step draws a class-balanced batch from the weighted sampler, evaluates
the combined objective on a recorded tape, and applies one Adam update to
every parameter of both networks.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kendalltau

from . import losses, metrics, synthdata
from .diffcore import Tape
from .losses import LossConfig
from .nets import ArchConfig, ConfigError, JointModel, build_estimator, build_predictor, dropout_masks, joint_forward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOSSCAL-CHECKPOINT"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 5e-4
    seed: int = 0
    augment_noise: float = 0.05
    augment_flip_prob: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_lpri: float
    train_laux: float
    val_balacc: float
    val_kendall_tau: float


HISTORY_COLUMNS = ("epoch", "lr", "train_lpri", "train_laux", "val_balacc", "val_kendall_tau")


class TrainHistory(list):
    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self:
                w.writerow([r.epoch, repr(r.lr)] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[2:]])


def weighted_sampler(labels, seed, block=4096):
    """Endless stream of indices, each drawn with probability ∝ 1/count(its class)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    counts = np.bincount(labels)
    p = 1.0 / counts[labels]
    p /= p.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield from rng.choice(labels.size, size=block, p=p).tolist()


def lr_at(epoch, cfg: TrainConfig):
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def init_adam_state(params):
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def _decays(name):
    return not name.endswith(".b")


def adam_step(params, grads, state, lr, cfg: TrainConfig):
    """One bias-corrected Adam update with decoupled weight decay on non-bias params.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    t = state["t"] + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state["m"][name].shape != p.shape:
            raise ValueError(f"shape mismatch for '{name}': param {p.shape}, grad {g.shape}")
        m = b1 * state["m"][name] + (1 - b1) * g
        v = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        if cfg.weight_decay and _decays(name):
            step = step + lr * cfg.weight_decay * p
        new_p[name], new_m[name], new_v[name] = p - step, m, v
    return new_p, {"m": new_m, "v": new_v, "t": t}


def build_training_tape(arch: ArchConfig, loss_cfg: LossConfig, dropout=True):
    tape = Tape()
    logits, taps = build_predictor(tape, arch, tape.input("x"), dropout=dropout)
    ell_hat = build_estimator(tape, arch, taps)
    handles = losses.record_objective(tape, logits, ell_hat, loss_cfg)
    handles.update(logits=logits, ell_hat=ell_hat)
    return tape, handles


def check_compatible(model: JointModel, data: synthdata.LabeledSet):
    arch = model.arch
    if data.x.shape[1] != arch.input_dim:
        raise ConfigError(
            f"checkpoint expects {arch.input_dim} input features but dataset '{data.tag}' has {data.x.shape[1]}"
        )
    if data.labels is not None and data.labels.size and data.labels.max() >= arch.num_classes:
        raise ConfigError(
            f"dataset '{data.tag}' has label {data.labels.max()} but the checkpoint has {arch.num_classes} classes"
        )


def evaluate(model: JointModel, data: synthdata.LabeledSet, class_weights):
    """Eval-mode predictions, per-sample losses and estimates on a labeled set."""
    logits, ell_hat = joint_forward(model, data.x)
    ell, _ = losses.weighted_cross_entropy(logits, data.labels, class_weights)
    pred = logits.argmax(axis=1)
    balacc = metrics.balanced_accuracy(pred, data.labels, model.arch.num_classes)
    tau = kendalltau(ell_hat, ell).statistic
    return {
        "logits": logits,
        "pred": pred,
        "ell": ell,
        "ell_hat": ell_hat,
        "balacc": balacc,
        "kendall_tau": 0.0 if np.isnan(tau) else float(tau),
    }


def _all_finite(params):
    return all(np.isfinite(v).all() for v in params.values())


def train(model: JointModel, train_set, val_set, cfg: TrainConfig):
    """Joint training; returns ``(trained model, TrainHistory)``.

    Raises :class:`NumericalError` on a non-finite loss.
    """
    check_compatible(model, train_set)
    check_compatible(model, val_set)
    arch = model.arch
    loss_cfg = cfg.loss
    class_weights = loss_cfg.class_weights
    if class_weights is None:
        class_weights = losses.inverse_frequency_weights(train_set.labels, arch.num_classes)

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    sampler = weighted_sampler(train_set.labels, seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    pair_rng = np.random.default_rng(seeds[2])
    aug_seeds = np.random.default_rng(seeds[3])

    tape, h = build_training_tape(arch, loss_cfg, dropout=True)
    params = {k: v.copy() for k, v in model.params.items()}
    state = init_adam_state(params)
    steps = math.ceil(len(train_set) / cfg.batch_size)
    history = TrainHistory()
    use_pairs = loss_cfg.aux_kind == "contrastive"

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sum_pri = sum_aux = 0.0
        for step in range(steps):
            idx = np.fromiter((next(sampler) for _ in range(cfg.batch_size)), dtype=np.int64)
            x = synthdata.augment(train_set.x[idx], cfg.augment_noise, aug_seeds.integers(2**63),
                                  cfg.augment_flip_prob)
            bindings = dict(params, x=x)
            if arch.dropout > 0:
                bindings.update(dropout_masks(arch, len(idx), drop_rng))
            bindings.update(losses.loss_bindings(
                train_set.labels[idx], class_weights,
                rng=pair_rng if use_pairs else None,
                all_pairs=use_pairs and loss_cfg.all_pairs,
            ))
            total = float(tape.forward(bindings))
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss {total} at epoch {epoch}, batch {step}")
            grads = tape.backward(1.0)
            params, state = adam_step(params, {k: grads[k] for k in params}, state, lr, cfg)
            sum_pri += float(tape.value(h["l_pri"]))
            if h["l_aux"] is not None:
                sum_aux += float(tape.value(h["l_aux"]))
        if not _all_finite(params):
            raise NumericalError(f"non-finite parameters after epoch {epoch}")
        model = JointModel(arch, params, model.seed, dict(model.meta))
        ev = evaluate(model, val_set, class_weights)
        history.append(EpochRecord(epoch, lr, sum_pri / steps, sum_aux / steps, ev["balacc"], ev["kendall_tau"]))
        log.info("epoch %d lr %.2e lpri %.4f laux %.4f balacc %.4f tau %.4f", epoch, lr,
                 sum_pri / steps, sum_aux / steps, ev["balacc"], ev["kendall_tau"])
    model.meta["class_weights"] = [float(w) for w in class_weights]
    model.meta["aux_kind"] = loss_cfg.aux_kind
    return model, history


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: JointModel, path):
    """Header line with version and arch JSON, then one binary record per parameter."""
    header = {"arch": model.arch.to_json(), "seed": model.seed, "meta": model.meta}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d " % CHECKPOINT_VERSION + json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(b"records %d\n" % len(model.params))
        for name, arr in model.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"param {name} {shape} {arr.nbytes}\n".encode())
            fh.write(arr.tobytes())
        fh.write(b"end\n")


def load_checkpoint(path) -> JointModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def line(what):
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        text = blob[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        return text

    head = line("header")
    parts = head.split(" ", 2)
    if len(parts) != 3 or parts[0].encode() != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if parts[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: format version {parts[1]} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(parts[2])
        arch = ArchConfig.from_json(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    count_line = line("record count").split()
    if len(count_line) != 2 or count_line[0] != "records":
        raise CheckpointError(f"{path}: corrupt record count line")
    expected = arch.param_shapes()
    params = {}
    for i in range(int(count_line[1])):
        rec = line(f"record {i}").split()
        if len(rec) != 4 or rec[0] != "param":
            raise CheckpointError(f"{path}: corrupt record header #{i}")
        name, shape_txt, nbytes = rec[1], rec[2], int(rec[3])
        shape = tuple(int(s) for s in shape_txt.split(",") if s)
        if expected.get(name) != shape or nbytes != 8 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: record '{name}' has shape {shape}, arch expects {expected.get(name)}")
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: record '{name}' truncated")
        params[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if line("end marker") != "end":
        raise CheckpointError(f"{path}: missing end marker")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing records {sorted(missing)}")
    return JointModel(arch, params, int(header.get("seed", 0)), header.get("meta", {}))
