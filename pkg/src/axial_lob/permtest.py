"""Input-permutation robustness experiment.

Starting from one fixed set of weights, retrain once per trial on data
whose 40 feature columns are shuffled by a per-trial random bijection,
then compare held-out F1 against the unpermuted baseline trained from the
same weights.  Trial 0 (when included) uses the identity permutation and
must reproduce the baseline bit-exactly, which pins down full-pipeline
determinism.
"""

from dataclasses import dataclass, field

import numpy as np

from . import evaluation, lob, training
from .configio import fmt_float


@dataclass
class PermutationTrial:
    trial: int
    permutation_seed: int
    f1_base: float
    f1_perm: float

    @property
    def delta(self):
        return self.f1_perm - self.f1_base


@dataclass
class PermutationStudy:
    trials: list = field(default_factory=list)
    mean_delta: float = 0.0
    std_delta: float = 0.0

    def to_csv(self):
        lines = ["trial,permutation_seed,f1_base,f1_perm,delta"]
        for t in self.trials:
            lines.append(
                f"{t.trial},{t.permutation_seed},{fmt_float(t.f1_base)},"
                f"{fmt_float(t.f1_perm)},{fmt_float(t.delta)}"
            )
        lines.append(f"mean,,,,{fmt_float(self.mean_delta)}")
        lines.append(f"std,,,,{fmt_float(self.std_delta)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _train_and_score(start_model, datasets, train_config, permutation=None):
    model = start_model.clone()
    train_ws, val_ws, test_ws = datasets.train, datasets.val, datasets.test
    if permutation is not None:
        train_ws = lob.permute_features(train_ws, permutation)
        val_ws = lob.permute_features(val_ws, permutation)
        test_ws = lob.permute_features(test_ws, permutation)
    training.train(model, train_ws, val_ws, train_config)
    return evaluation.evaluate_model(model, test_ws).macro_f1


def permutation_robustness(start_model, datasets, train_config, trials=5, seed=0,
                           include_identity=True):
    """Changes in test macro-F1 under retraining with permuted features.

    Mean and standard deviation (sample, over the random trials only) of
    F1_permuted - F1_baseline, in F1 points as fractions.  The identity
    trial, when included, is reported as trial 0 with seed -1 and is
    excluded from the summary statistics.
    """
    f1_base = _train_and_score(start_model, datasets, train_config)
    rows = []
    if include_identity:
        f1_id = _train_and_score(
            start_model, datasets, train_config, np.arange(lob.N_FEATURES)
        )
        rows.append(PermutationTrial(0, -1, f1_base, f1_id))
    deltas = []
    for t in range(1, trials + 1):
        perm_seed = seed * 1000 + t
        perm = lob.random_permutation(perm_seed)
        f1_perm = _train_and_score(start_model, datasets, train_config, perm)
        rows.append(PermutationTrial(t, perm_seed, f1_base, f1_perm))
        deltas.append(f1_perm - f1_base)
    deltas = np.asarray(deltas)
    return PermutationStudy(
        trials=rows,
        mean_delta=float(deltas.mean()) if len(deltas) else 0.0,
        std_delta=float(deltas.std(ddof=1)) if len(deltas) > 1 else 0.0,
    )
