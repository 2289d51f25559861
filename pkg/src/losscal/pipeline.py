"""End-to-end experiment stages driven by a :class:`~losscal.config.RunConfig`.

All randomness is derived from the root seed through labelled sub-seeds, so
any stage can be rerun on its own and produce the same result.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore, losses, metrics, odin, synthdata
from .config import RunConfig, clamp_range
from .losses import LossConfig
from .nets import ArchConfig, JointModel, dropout_masks, init_model
from .training import TrainConfig, TrainHistory, build_training_tape, evaluate, save_checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class Benchmark:
    full_train: synthdata.LabeledSet
    full_val: synthdata.LabeledSet
    seen_train: synthdata.LabeledSet
    seen_val: synthdata.LabeledSet
    novel: synthdata.LabeledSet
    ood: dict = field(default_factory=dict)
    tune: synthdata.LabeledSet | None = None

    def split(self, name):
        if name == "full":
            return self.full_train, self.full_val
        if name == "seen":
            return self.seen_train, self.seen_val
        raise ValueError(f"unknown split {name!r}")

    def labeled(self, tag):
        sets = {
            "full-train": self.full_train,
            "full-val": self.full_val,
            "seen-train": self.seen_train,
            "seen-val": self.seen_val,
        }
        if tag not in sets:
            raise ValueError(f"unknown dataset tag {tag!r}; choose from {sorted(sets)}")
        return sets[tag]


def ood_params(cfg, kind):
    o = cfg["ood"]
    return {
        "mask-patch": {"fraction": o["mask_fraction"]},
        "mask-patch-heavy": {"fraction": o["heavy_mask_fraction"]},
        "far": {"distance": o["far_distance"], "noise": o["far_noise"]},
        "near": {"inflation": o["near_inflation"]},
        "shift": {"magnitude": o["shift_magnitude"]},
    }[kind]


def build_benchmark(cfg: RunConfig) -> Benchmark:
    d = cfg["data"]
    data = synthdata.gen_inliers(
        d["num_classes"], d["input_dim"], d["n"], d["imbalance_ratio"],
        seed=cfg.derive_seed("data"), separation=d["separation"],
    )
    full_train, full_val = synthdata.stratified_split(data, d["val_fraction"], cfg.derive_seed("split-full"))
    seen, novel = synthdata.split_unseen_classes(data, d["held_out"])
    seen_train, seen_val = synthdata.stratified_split(seen, d["val_fraction"], cfg.derive_seed("split-seen"))
    ood = {}
    for kind in cfg["ood"]["kinds"]:
        spec = synthdata.OodSpec(kind, ood_params(cfg, kind), cfg.derive_seed(f"ood-{kind}"))
        ood[kind] = synthdata.make_ood(seen_val, spec, tag=kind)
    tune_kind = cfg["odin"]["tune_kind"]
    tune_spec = synthdata.OodSpec(tune_kind, ood_params(cfg, tune_kind), cfg.derive_seed("ood-tune"))
    tune = synthdata.make_ood(seen_val, tune_spec, tag=f"{tune_kind}-tune")
    return Benchmark(full_train, full_val, seen_train, seen_val, novel, ood, tune)


def arch_config(cfg: RunConfig, num_classes) -> ArchConfig:
    a = cfg["arch"]
    return ArchConfig(
        input_dim=cfg["data"]["input_dim"],
        hidden_dims=a["hidden_dims"],
        num_classes=num_classes,
        tap_layers=a["tap_layers"],
        tap_embed_dim=a["tap_embed_dim"],
        dropout=a["dropout"],
    )


def train_config(cfg: RunConfig, aux=None, num_classes=None, seed_label="train") -> TrainConfig:
    t, lc = cfg["train"], cfg["loss"]
    weights = np.ones(num_classes) if lc["class_weighting"] == "uniform" and num_classes else None
    loss = LossConfig(lam=lc["lambda"], margin=lc["margin"], class_weights=weights,
                      aux_kind=aux or lc["aux"], all_pairs=lc["all_pairs"])
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
        lr_decay_factor=t["lr_decay_factor"], lr_decay_every=t["lr_decay_every"],
        adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"], adam_epsilon=t["adam_epsilon"],
        weight_decay=t["weight_decay"], seed=cfg.derive_seed(seed_label),
        augment_noise=t["augment_noise"], augment_flip_prob=t["augment_flip_prob"], loss=loss,
    )


def train_model(cfg: RunConfig, bench: Benchmark, split="seen", aux=None) -> tuple[JointModel, TrainHistory]:
    """Train one model.  Vanilla and joint runs share initial weights and
    sampling streams, so they differ only in the objective."""
    train_set, val_set = bench.split(split)
    arch = arch_config(cfg, train_set.num_classes)
    model = init_model(arch, cfg.derive_seed(f"init-{split}"))
    tcfg = train_config(cfg, aux, arch.num_classes, seed_label=f"train-{split}")
    model, history = train(model, train_set, val_set, tcfg)
    model.meta["split"] = split
    return model, history


def model_class_weights(model, labels):
    w = model.meta.get("class_weights")
    if w is not None:
        return np.asarray(w)
    return losses.inverse_frequency_weights(labels, model.arch.num_classes)


def classification_summary(model, data):
    ev = evaluate(model, data, model_class_weights(model, data.labels))
    ev["labels"] = data.labels
    ev["sensitivity"] = metrics.per_class_sensitivity(ev["pred"], data.labels, model.arch.num_classes)
    var_ell = float(np.var(ev["ell"]))
    ev["var_ratio"] = float(np.var(ev["ell_hat"]) / var_ell) if var_ell > 0 else float("nan")
    return ev


def tune_odin(cfg: RunConfig, model, bench: Benchmark) -> odin.OdinParams:
    return odin.tune_hyperparams(
        model, bench.seen_val.x, bench.tune.x,
        cfg["odin"]["t_grid"], cfg["odin"]["eta_grid"], clamp_range(cfg),
    )


def score_sets(cfg, model, bench, params, include_tuning=False):
    """ODIN scores for the inlier validation set and every evaluation OOD set."""
    clamp = clamp_range(cfg)
    scores = {"inliers": odin.odin_score(model, bench.seen_val.x, params, clamp)}
    for kind, data in bench.ood.items():
        scores[kind] = odin.odin_score(model, data.x, params, clamp)
    if include_tuning:
        scores[bench.tune.tag] = odin.odin_score(model, bench.tune.x, params, clamp)
    return scores


def ood_table(scores):
    """[(tag, DetectionReport)] for every non-inlier entry of ``scores``."""
    return [(tag, metrics.detection_report(scores["inliers"], s)) for tag, s in scores.items() if tag != "inliers"]


def novel_report(cfg, model, bench, params):
    clamp = clamp_range(cfg)
    if model.arch.num_classes == cfg["data"]["num_classes"]:
        log.warning("checkpoint was trained on all %d classes; held-out classes are not unseen",
                    model.arch.num_classes)
    ins = odin.odin_score(model, bench.seen_val.x, params, clamp)
    outs = odin.odin_score(model, bench.novel.x, params, clamp)
    return metrics.detection_report(ins, outs), ins, outs


@dataclass
class SeedResult:
    seed: int
    balacc: dict = field(default_factory=dict)        # aux -> val balanced accuracy (full split)
    kendall: dict = field(default_factory=dict)       # aux -> held-out Kendall tau
    var_ratio: dict = field(default_factory=dict)     # aux -> Var(lhat)/Var(l)
    ood_auroc: dict = field(default_factory=dict)     # aux -> {kind: auroc}
    novel_auroc: dict = field(default_factory=dict)   # aux -> auroc
    odin: dict = field(default_factory=dict)          # aux -> OdinParams
    reports: dict = field(default_factory=dict)       # aux -> [(tag, DetectionReport)]
    sensitivity: dict = field(default_factory=dict)   # aux -> per-class recall (full split)
    histories: dict = field(default_factory=dict)     # (split, aux) -> TrainHistory


def write_classification_report(path, summary, class_names):
    """One row per class (sensitivity) plus a balanced-accuracy summary row."""
    sens = summary["sensitivity"]
    labels = summary.get("labels")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "name", "n", "sensitivity"])
        for c, value in enumerate(sens):
            n = int(np.count_nonzero(labels == c)) if labels is not None else ""
            w.writerow([c, class_names[c] if c < len(class_names) else f"class{c}", n,
                        "undefined" if np.isnan(value) else repr(float(value))])
        w.writerow(["balanced_accuracy", "", len(labels) if labels is not None else "", repr(float(summary["balacc"]))])


def write_predictions(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "prediction", "loss", "loss_estimate"])
        for i, (y, p, l, lh) in enumerate(zip(summary["labels"], summary["pred"], summary["ell"], summary["ell_hat"])):
            w.writerow([i, int(y), int(p), repr(float(l)), repr(float(lh))])


def run_seed(cfg: RunConfig, full_aux=("none", "contrastive", "mse"), seen_aux=("none", "contrastive"),
             out_dir=None):
    """Every experiment for one root seed.

    The full split (all classes) gives the generalization comparison
    (accuracy, estimator ranking quality); the seen-class split gives OOD and
    unseen-class detection.  With ``out_dir`` every artifact is written there.
    """
    out = Path(out_dir) if out_dir is not None else None
    bench = build_benchmark(cfg)
    res = SeedResult(cfg["run"]["seed"])
    for aux in full_aux:
        model, hist = train_model(cfg, bench, "full", aux)
        summary = classification_summary(model, bench.full_val)
        res.balacc[aux] = summary["balacc"]
        res.kendall[aux] = summary["kendall_tau"]
        res.var_ratio[aux] = summary["var_ratio"]
        res.sensitivity[aux] = summary["sensitivity"]
        res.histories[("full", aux)] = hist
        if out is not None:
            hist.write_csv(out / f"history-full-{aux}.csv")
            write_classification_report(out / f"eval-full-{aux}.csv", summary, bench.full_val.class_names)
    for aux in seen_aux:
        model, hist = train_model(cfg, bench, "seen", aux)
        res.histories[("seen", aux)] = hist
        params = tune_odin(cfg, model, bench)
        table = ood_table(score_sets(cfg, model, bench, params))
        novel, _, _ = novel_report(cfg, model, bench, params)
        res.odin[aux] = params
        res.ood_auroc[aux] = {tag: rep.auroc for tag, rep in table}
        res.novel_auroc[aux] = novel.auroc
        res.reports[aux] = table + [("novel", novel)]
        if out is not None:
            save_checkpoint(model, out / f"model-seen-{aux}.ckpt")
            hist.write_csv(out / f"history-seen-{aux}.csv")
            params.save(out / f"odin-seen-{aux}.txt")
            metrics.write_table(table, out / f"ood-seen-{aux}.csv")
            metrics.write_table([("novel", novel)], out / f"novel-seen-{aux}.csv")
    return res


def with_seed(cfg: RunConfig, seed) -> RunConfig:
    clone = RunConfig({sec: dict(kv) for sec, kv in cfg.values.items()})
    clone.set("run", "seed", seed)
    return clone


def run_seeds(cfg: RunConfig, n_seeds=5, **kwargs):
    base = cfg["run"]["seed"]
    return [run_seed(with_seed(cfg, base + i), **kwargs) for i in range(n_seeds)]


GRADCHECK_ARCH = ArchConfig(input_dim=5, hidden_dims=(16, 16, 16), num_classes=3,
                            tap_layers=(0, 1, 2), tap_embed_dim=4, dropout=0.4)


def gradient_self_check(seeds=range(5), aux_kinds=("contrastive", "mse"), epsilon=1e-6,
                        arch=GRADCHECK_ARCH, batch=4, min_kink=1e-5, max_attempts=50):
    """Finite-difference check of the full training graph (dropout on).

    Batches whose ReLU or hinge arguments sit within ``min_kink`` of zero are
    redrawn, since the derivative is undefined there.  Returns rows of
    ``(seed, aux, leaf, max_rel_error)``.
    """
    rows = []
    for seed in seeds:
        for aux in aux_kinds:
            model = init_model(arch, seed)
            tape, _ = build_training_tape(arch, LossConfig(aux_kind=aux), dropout=True)
            for attempt in range(max_attempts):
                rng = np.random.default_rng([seed, attempt])
                labels = rng.integers(0, arch.num_classes, batch)
                bindings = dict(model.params, x=rng.normal(size=(batch, arch.input_dim)))
                bindings.update(dropout_masks(arch, batch, rng))
                bindings.update(losses.loss_bindings(labels, rng.uniform(0.5, 2.0, arch.num_classes), rng=rng))
                tape.forward(bindings)
                if tape.kink_distance() >= min_kink:
                    break
            else:
                raise RuntimeError(f"seed {seed}: no kink-free batch in {max_attempts} attempts")
            _, per_leaf = diffcore.grad_check(tape, bindings, epsilon, per_leaf=True)
            rows.extend((seed, aux, leaf, err) for leaf, err in per_leaf.items())
    return rows
