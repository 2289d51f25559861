"""ODIN-style OOD detection: temperature-scaled max-softmax confidence after a
single gradient-sign step on the input."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import metrics
from .diffcore import Tape
from .nets import JointModel, build_predictor

DEFAULT_T_GRID = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_ETA_GRID = (0.0, 0.001, 0.002, 0.005, 0.01, 0.02)


@dataclass
class OdinParams:
    temperature: float = 1.0
    eta: float = 0.0
    tau: float = 0.5
    tuning_metric: float | None = None

    def __post_init__(self):
        if self.temperature < 1:
            raise ValueError(f"temperature must be >= 1, got {self.temperature}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.tau}")

    def save(self, path):
        lines = [f"T = {self.temperature!r}", f"eta = {self.eta!r}", f"tau = {self.tau!r}"]
        if self.tuning_metric is not None:
            lines.append(f"tuning_metric_value = {self.tuning_metric!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        vals = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (p.strip() for p in line.split("=", 1))
                vals[key] = float(value)
        known = {"T", "eta", "tau", "tuning_metric_value"}
        if set(vals) - known:
            raise ValueError(f"{path}: unknown keys {sorted(set(vals) - known)}")
        missing = {"T", "eta", "tau"} - set(vals)
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        return cls(vals["T"], vals["eta"], vals["tau"], vals.get("tuning_metric_value"))


def temperature_score(logits, temperature):
    """Max of softmax(logits / T); works on one logit vector or a batch of rows."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    # max prob = exp(0) / sum exp(z / T) once the max logit is shifted to 0
    return 1.0 / np.exp(z / temperature).sum(axis=-1)


def _log_confidence_tape(model):
    tape = Tape()
    logits, _ = build_predictor(tape, model.arch, tape.input("x"), dropout=False)
    lsm = tape.log_softmax(tape.mul(logits, tape.const("inv_T")))
    tape.sum(tape.pick(lsm, tape.const("cls")))
    return tape, logits


def input_gradient(model: JointModel, x, temperature):
    """Gradient of log S(x, T) w.r.t. each row of ``x``, with S taken at the
    argmax class of the unperturbed input."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tape, logits = _log_confidence_tape(model)
    bindings = dict(model.params, x=x, inv_T=np.asarray(1.0 / temperature), cls=np.zeros(len(x)))
    tape.forward(bindings)
    bindings["cls"] = tape.value(logits).argmax(axis=1).astype(np.float64)
    tape.forward(bindings)
    return tape.backward(1.0)["x"]


def perturb_input(model: JointModel, x, temperature, eta, clamp=None):
    """``x - eta * sign(-grad log S)``; identity when ``eta == 0``."""
    x = np.asarray(x, dtype=np.float64)
    if eta == 0:
        return x.copy()
    grad = input_gradient(model, x, temperature).reshape(x.shape)
    x_hat = x - eta * np.sign(-grad)
    if clamp is not None:
        x_hat = np.clip(x_hat, clamp[0], clamp[1])
    return x_hat


def _logits(model, x):
    tape = Tape()
    build_predictor(tape, model.arch, tape.input("x"), dropout=False)
    return tape.forward(dict(model.params, x=np.atleast_2d(x)))


def odin_score(model: JointModel, x, params: OdinParams, clamp=None):
    """Temperature-scaled confidence of the perturbed input (batched over rows)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = perturb_input(model, x, params.temperature, params.eta, clamp)
    return temperature_score(_logits(model, x_hat), params.temperature)


def detect(score, tau):
    """'inlier' when score >= tau, else 'outlier'."""
    return "inlier" if score >= tau else "outlier"


def _grid_scores(model, x, grad_sign, temperature, eta, clamp):
    x_hat = x + eta * grad_sign if eta else x
    if clamp is not None:
        x_hat = np.clip(x_hat, clamp[0], clamp[1])
    return temperature_score(_logits(model, x_hat), temperature)


def grid_table(model, x_in, x_out, t_grid, eta_grid, clamp=None):
    """FPR@TPR95 for every grid point: ``{(T, eta): (fpr, in_scores)}``."""
    x_in = np.atleast_2d(np.asarray(x_in, dtype=np.float64))
    x_out = np.atleast_2d(np.asarray(x_out, dtype=np.float64))
    table = {}
    for t in t_grid:
        # -sign(-g) == sign(g); the sign is shared by every eta at this T
        s_in = np.sign(input_gradient(model, x_in, t))
        s_out = np.sign(input_gradient(model, x_out, t))
        for eta in eta_grid:
            ins = _grid_scores(model, x_in, s_in, t, eta, clamp)
            outs = _grid_scores(model, x_out, s_out, t, eta, clamp)
            table[(t, eta)] = (metrics.fpr_at_tpr95(ins, outs), ins)
    return table


def tune_hyperparams(model, x_in, x_out, t_grid=DEFAULT_T_GRID, eta_grid=DEFAULT_ETA_GRID, clamp=None):
    """Exhaustive grid search minimising FPR@TPR95 on a tuning OOD set.

    Ties go to the smaller eta, then the smaller T.  The threshold is set at
    the TPR-95 operating point of the chosen configuration's inlier scores.
    """
    t_grid = sorted({float(t) for t in t_grid})
    eta_grid = sorted({float(e) for e in eta_grid})
    if not t_grid or not eta_grid:
        raise ValueError("temperature and eta grids must be nonempty")
    table = grid_table(model, x_in, x_out, t_grid, eta_grid, clamp)
    best = min(table, key=lambda key: (table[key][0], key[1], key[0]))
    fpr, ins = table[best]
    tau = min(max(metrics.tpr95_threshold(ins), np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))
    return OdinParams(best[0], best[1], float(tau), float(fpr))


def write_scores(path, rows):
    """``rows``: iterable of (sample_id, dataset_tag, score, label_or_None)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "dataset_tag", "score", "label_if_known"])
        for sid, tag, score, label in rows:
            w.writerow([sid, tag, repr(float(score)), "" if label is None else label])


def read_scores(path):
    by_tag = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_tag.setdefault(row["dataset_tag"], []).append(float(row["score"]))
    return {k: np.array(v) for k, v in by_tag.items()}
