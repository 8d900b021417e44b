"""Desk-scale experiment drivers on the synthetic clustered corpus."""

from __future__ import annotations

import logging
import time

from .config import TrainConfig
from .ingest import TEST, build_dataset, chrono_split, five_core_filter
from .metrics import evaluate, evaluate_static_scorer, popularity_scores
from .model import Model
from .synth import SynthConfig, generate_checkins

log = logging.getLogger(__name__)


def synthetic_dataset(seed, **overrides):
    """Generate, 5-core filter, and chronologically split a synthetic corpus."""
    records, _, _ = generate_checkins(SynthConfig(seed=seed, **overrides))
    return chrono_split(build_dataset(five_core_filter(records)))


def experiment_config(seed, **overrides):
    """Settings sized for CPU runs: narrower embeddings, a gentler noise
    ceiling (keeps the prototype-anchored reverse walk numerically tame at
    this scale), and a short epoch budget."""
    base = dict(
        embed_dim=32,
        beta_max=2.0,
        step_size=0.01,
        batch_size=32,
        max_epochs=12,
        patience=4,
        dropout=0.1,
        score_hidden=(64,),
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


def train_and_test(dataset, config, label="model", progress=False):
    """Fit one model and report test metrics."""
    t0 = time.time()
    model = Model(dataset, config)
    callback = None
    if progress:
        def callback(entry):
            print(f"  [{label}] epoch {entry['epoch']:2d} "
                  f"loss {entry['train_total']:.3f} "
                  f"valid R@10 {entry.get('valid_recall10', float('nan')):.4f}",
                  flush=True)
    model.fit(progress=callback)
    report = evaluate(model, dataset, TEST)
    return {
        "label": label,
        "model": model,
        "report": report,
        "recall10": report.recall[10],
        "seconds": time.time() - t0,
    }


def run_comparison(seeds=(0, 1, 2), config_overrides=None, synth_overrides=None,
                   progress=False):
    """Full model vs. the no-sampling ablation vs. train-popularity, per seed."""
    config_overrides = config_overrides or {}
    synth_overrides = synth_overrides or {}
    results = {"full": [], "wo_sampling": [], "popularity": []}
    models = {}
    for seed in seeds:
        dataset = synthetic_dataset(seed, **synth_overrides)
        if progress:
            print(f"seed {seed}: {dataset.n_users} users, {dataset.n_pois} POIs, "
                  f"{dataset.n_visits} visits", flush=True)
        full = train_and_test(dataset, experiment_config(seed, **config_overrides),
                              label=f"full/seed{seed}", progress=progress)
        ablated = train_and_test(
            dataset, experiment_config(seed, wo_sampling=True, **config_overrides),
            label=f"wo_sampling/seed{seed}", progress=progress)
        pop = popularity_scores(dataset)
        test_samples = full["model"].eval_samples(TEST)
        pop_recall, _ = evaluate_static_scorer(pop, test_samples)
        results["full"].append(full["recall10"])
        results["wo_sampling"].append(ablated["recall10"])
        results["popularity"].append(pop_recall[10])
        models[seed] = {"full": full["model"], "wo_sampling": ablated["model"],
                        "dataset": dataset}
        if progress:
            print(f"seed {seed}: full {full['recall10']:.4f} "
                  f"wo_sampling {ablated['recall10']:.4f} "
                  f"popularity {pop_recall[10]:.4f} "
                  f"({full['seconds'] + ablated['seconds']:.0f}s)", flush=True)
    summary = {name: sum(vals) / len(vals) for name, vals in results.items()}
    return {"per_seed": results, "mean": summary, "models": models}
