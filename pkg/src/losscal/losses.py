"""Weighted cross-entropy, the pairwise ranking objective for the loss
estimator, the mse baseline, and the combined objective.

The plain functions work on numpy arrays and are what the metrics, tests and
reports use.  The ``record_*`` builders emit the same computations onto a
:class:`~losscal.diffcore.Tape` so the training loop gets gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

AUX_KINDS = ("contrastive", "mse", "none")


@dataclass
class LossConfig:
    lam: float = 0.5
    margin: float = 0.1
    class_weights: np.ndarray | None = None
    aux_kind: str = "contrastive"
    all_pairs: bool = False

    def __post_init__(self):
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.aux_kind not in AUX_KINDS:
            raise ValueError(f"aux_kind must be one of {AUX_KINDS}, got {self.aux_kind!r}")
        if self.class_weights is not None and np.any(self.class_weights <= 0):
            raise ValueError("class weights must be positive")


@dataclass
class BatchLoss:
    per_sample: np.ndarray
    l_pri: float
    l_aux: float
    l_total: float = field(init=False)
    lam: float = 0.5

    def __post_init__(self):
        self.l_total = total_loss(self.l_pri, self.l_aux, self.lam)


def inverse_frequency_weights(labels, num_classes):
    """Class weights proportional to 1/count, normalised to mean 1 over present classes."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(float)
    w = np.ones(num_classes)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    w[present] *= present.sum() / w[present].sum()
    return w


def _check_labels(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    return labels


def weighted_cross_entropy(logits, labels, class_weights):
    """Per-sample weighted CE and its weighted mean.

    ``l_i = w[y_i] * -log softmax(logits_i)[y_i]`` and
    ``L = sum(l) / sum(w[y])``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    ell = w * (lse - logits[np.arange(len(labels)), labels])
    return ell, float(ell.sum() / w.sum())


def indicator(li, lj):
    """+1 when the first loss is strictly larger, -1 otherwise (ties included)."""
    return 1.0 if li > lj else -1.0


def make_pairs(n, rng, all_pairs=False):
    """Index pairs for the ranking loss.

    Default: shuffle and pair disjointly, ``n // 2`` pairs.  ``all_pairs``
    returns every i < j.
    """
    if n < 2:
        raise ValueError("ranking loss needs at least two samples")
    if all_pairs:
        pi, pj = map(np.array, zip(*combinations(range(n), 2)))
        return pi, pj
    perm = rng.permutation(n)
    half = n // 2
    return perm[:half], perm[half : 2 * half]


def contrastive_rank_loss(ell, ell_hat, margin, pairs):
    """Mean over pairs of ``max(0, -I(l_i, l_j) * (lh_i - lh_j) + margin)``."""
    pi, pj = (np.asarray(p, dtype=np.int64) for p in pairs)
    if pi.size == 0:
        raise ValueError("empty pair set")
    ell = np.asarray(ell, dtype=np.float64)
    ell_hat = np.asarray(ell_hat, dtype=np.float64)
    sign = np.where(ell[pi] > ell[pj], 1.0, -1.0)
    return float(np.maximum(0.0, -sign * (ell_hat[pi] - ell_hat[pj]) + margin).mean())


def mse_aux_loss(ell, ell_hat):
    ell = np.asarray(ell, dtype=np.float64)
    return float(np.mean((np.asarray(ell_hat, dtype=np.float64) - ell) ** 2))


def total_loss(l_pri, l_aux, lam):
    return l_pri + lam * l_aux


# -- tape builders -------------------------------------------------------

def record_weighted_ce(tape, logits):
    """Consts expected at bind time: ``y`` [n], ``w_y`` [n], ``inv_wsum`` scalar."""
    nll = tape.neg(tape.pick(tape.log_softmax(logits), tape.const("y")))
    ell = tape.mul(nll, tape.const("w_y"), name="ell")
    l_pri = tape.mul(tape.sum(ell), tape.const("inv_wsum"), name="l_pri")
    return ell, l_pri


def record_contrastive(tape, ell, ell_hat, margin):
    """Consts expected at bind time: ``pair_i``, ``pair_j``.

    Targets are detached: no gradient reaches the predictor through them.
    """
    pi, pj = tape.const("pair_i"), tape.const("pair_j")
    target = tape.detach(ell)
    sign = tape.indicator(tape.take(target, pi), tape.take(target, pj))
    diff = tape.sub(tape.take(ell_hat, pi), tape.take(ell_hat, pj))
    hinge = tape.relu(tape.shift(tape.neg(tape.mul(sign, diff)), c=float(margin)))
    return tape.mean(hinge, name="l_aux")


def record_mse(tape, ell, ell_hat):
    return tape.mean(tape.square(tape.sub(ell_hat, tape.detach(ell))), name="l_aux")


def record_objective(tape, logits, ell_hat, cfg: LossConfig):
    """Returns node handles ``ell``, ``l_pri``, ``l_aux`` (None for vanilla), ``total``."""
    ell, l_pri = record_weighted_ce(tape, logits)
    if cfg.aux_kind == "contrastive":
        l_aux = record_contrastive(tape, ell, ell_hat, cfg.margin)
    elif cfg.aux_kind == "mse":
        l_aux = record_mse(tape, ell, ell_hat)
    else:
        l_aux = None
    total = l_pri if l_aux is None else tape.add(l_pri, tape.scale(l_aux, c=float(cfg.lam)), name="total")
    tape.set_output(total)
    return {"ell": ell, "l_pri": l_pri, "l_aux": l_aux, "total": total}


def loss_bindings(labels, class_weights, rng=None, all_pairs=False):
    """Const bindings for :func:`record_objective` on one batch."""
    labels = np.asarray(labels, dtype=np.int64)
    w_y = np.asarray(class_weights, dtype=np.float64)[labels]
    out = {"y": labels.astype(np.float64), "w_y": w_y, "inv_wsum": np.asarray(1.0 / w_y.sum())}
    if rng is not None or all_pairs:
        pi, pj = make_pairs(len(labels), rng, all_pairs)
        out["pair_i"] = pi.astype(np.float64)
        out["pair_j"] = pj.astype(np.float64)
    return out
