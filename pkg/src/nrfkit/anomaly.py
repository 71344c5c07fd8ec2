"""Potential-threshold anomaly detection.

Train on normal-class data only, score test samples by their marginal
potential (higher = more normal), flag the lowest-scoring quantile as
anomalies, and report precision/recall/F1 plus rank AUC.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import models, targets, training
from .evaluation import prf_at_quantile, roc_auc, write_anomaly_csv
from .models import GeneratorNet, PotentialNet, potential
from .samplers import SamplerConfig, rng_stream
from .training import TrainConfig


@dataclass
class AnomalyRecipe:
    train_data: np.ndarray    # normal-class samples only
    test_data: np.ndarray
    test_labels: np.ndarray   # 1 = anomaly
    potential: PotentialNet
    generator: GeneratorNet
    config: TrainConfig
    quantile: float = 0.20


def score(pot: PotentialNet, x):
    """Anomaly score: the marginal potential; lower means more anomalous."""
    return potential(pot, x)


def synthetic_ring_recipe(seed: int = 0, train_n: int = 2000,
                          test_normal: int = 800, test_anomaly: int = 200,
                          iterations: int = 4000, sigma: float = 0.1,
                          alpha_p: float = 0.1) -> AnomalyRecipe:
    """Inner-vs-outer ring recipe: the normal class is the two inner rings
    of the 32-mode layout, anomalies come from the two outer rings."""
    normal_spec = targets.gmm_rings(2, 8, (1.0, 2.0), sigma)
    anomaly_spec = targets.gmm_rings(2, 8, (3.0, 4.0), sigma)
    data_rng = rng_stream(seed, label=3)
    train_x, _ = targets.gmm_sample(normal_spec, train_n, data_rng)
    test_norm, _ = targets.gmm_sample(normal_spec, test_normal, data_rng)
    test_anom, _ = targets.gmm_sample(anomaly_spec, test_anomaly, data_rng)
    test_x = np.vstack([test_norm, test_anom])
    test_y = np.concatenate([np.zeros(test_normal, dtype=int),
                             np.ones(test_anomaly, dtype=int)])

    init_rng = rng_stream(seed, label=2)
    pot = models.potential_mlp(2, hidden=(60, 30, 10), activation="tanh",
                               weight_norm=True, rng=init_rng)
    gen = models.generator_mlp(5, 2, hidden=(32, 32), activation="tanh",
                               batch_norm=True, final_weight_norm=True,
                               sigma=sigma, rng=init_rng)
    cfg = TrainConfig(iterations=iterations, batch_size=100,
                      lr_potential=1e-3, lr_generator=1e-3,
                      adam_beta1=0.5, adam_beta2=0.999,
                      sampler=SamplerConfig(kind="sgld", steps=10, delta=0.01),
                      alpha_p=alpha_p, seed=seed)
    return AnomalyRecipe(train_x, test_x, test_y, pot, gen, cfg,
                         quantile=test_anomaly / (test_normal + test_anomaly))


def load_csv_dataset(path, label_col: int | None = None):
    """One sample per row, feature columns first; label_col (0-based, or -1
    for the last column) selects an optional label column."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    data = np.atleast_2d(data)
    if label_col is None:
        return data, None
    labels = data[:, label_col].astype(int)
    features = np.delete(data, label_col % data.shape[1], axis=1)
    return features, labels


def run_anomaly(recipe: AnomalyRecipe, out_dir=None) -> dict:
    """Train on the normal class, score the test set, report metrics.

    Writes scores.csv (index,score,label) and anomaly.csv (metric,value)
    when out_dir is given.
    """
    if recipe.test_labels.shape[0] != recipe.test_data.shape[0]:
        raise ValueError("test labels do not match test data")
    training.train(recipe.potential, recipe.generator, recipe.train_data,
                   recipe.config, out_dir=out_dir)
    scores = np.asarray(score(recipe.potential, recipe.test_data))
    precision, recall, f1 = prf_at_quantile(scores, recipe.test_labels,
                                            recipe.quantile)
    auc = roc_auc(scores, recipe.test_labels)
    metrics = {"precision": precision, "recall": recall, "f1": f1, "auc": auc}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scores.csv"), "w") as fh:
            fh.write("index,score,label\n")
            for i, (s, y) in enumerate(zip(scores, recipe.test_labels)):
                fh.write(f"{i},{s!r},{int(y)}\n")
        write_anomaly_csv(os.path.join(out_dir, "anomaly.csv"), metrics)
    return metrics
