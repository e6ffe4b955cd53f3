"""End-to-end runs of the clustering method and its ablation variants.

Variant dispatch:

* ``KM-raw``   - k-means directly on the raw embeddings (no training).
* ``DAC``/``CDAC``     - pairwise training only; evaluated by fitting
  k-means centroids on the training representations and assigning the
  evaluation split to the nearest centroid.  These variants define no
  inference rule of their own, so the report flags the centroid
  evaluation as an approximation.
* ``DAC-KM``/``CDAC-KM`` - pairwise training, then k-means on the
  training representations.
* ``DAC+``/``CDAC+``   - pairwise training, k-means initialization, KLD
  refinement, then hard assignment.

The ``C`` prefix enables the supervised pass and ground-truth precedence
in the self-labeled matrix; without it the labeled set is treated as
empty.  Every run inside a report redraws its mask and initialization
from seed + run_index, so paired-seed comparisons across configurations
share masks whenever the masked quantities themselves are unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import clusternet, metrics, pairwise, refine
from .clusternet import AdamState, ClusterNetParams
from .dataset import EmbeddedDataset, _round_half_away, make_experiment_mask, subsample_imbalanced
from .errors import ConfigError
from .metrics import MetricsReport
from .pairwise import PairwiseConfig, PairwiseEpoch, ThresholdState
from .refine import RefineConfig, RefineEpoch

VARIANTS = ("KM-raw", "DAC", "DAC-KM", "DAC+", "CDAC", "CDAC-KM", "CDAC+")
SWEEP_AXES = ("cluster_multiplier", "labeled_ratio", "unknown_class_ratio", "gamma")


@dataclass
class RunConfig:
    variant: str = "CDAC+"
    cluster_count: int | None = None  # None reads the ground-truth count
    cluster_multiplier: float = 1.0
    labeled_ratio: float = 0.1
    unknown_class_ratio: float = 0.25
    gamma: float | None = None
    seed: int = 0
    num_runs: int = 1
    learning_rate: float = 1e-3
    refine_learning_rate: float | None = None  # None reuses learning_rate
    eta: float = 0.009
    batch_size: int = 256
    pairwise_epoch_cap: int = 100
    refine_epoch_cap: int = 100
    delta_label: float = 0.001
    dropout_rate: float = 0.1


def uses_constraints(variant: str) -> bool:
    return variant.startswith("C")


def uses_refinement(variant: str) -> bool:
    return variant.endswith("+")


def validate_config(config: RunConfig) -> None:
    if config.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {config.variant!r}; choose from {VARIANTS}")
    if config.cluster_count is not None and config.cluster_count < 2:
        raise ConfigError("cluster_count must be >= 2")
    if config.cluster_multiplier < 1.0:
        raise ConfigError("cluster_multiplier must be >= 1")
    if not (0.0 <= config.labeled_ratio <= 1.0):
        raise ConfigError("labeled_ratio must be in [0, 1]")
    if uses_constraints(config.variant) and config.labeled_ratio == 0.0:
        raise ConfigError(
            f"{config.variant} uses pairwise constraints but labeled_ratio is 0")
    if config.labeled_ratio == 0.0:
        raise ConfigError(
            "labeled_ratio must be positive: the experiment mask always draws "
            "a labeled pool, even when a non-constrained variant ignores it")
    if not (0.0 <= config.unknown_class_ratio < 1.0):
        raise ConfigError("unknown_class_ratio must be in [0, 1)")
    if config.gamma is not None and not (0.0 < config.gamma <= 1.0):
        raise ConfigError("gamma must be in (0, 1]")
    if config.num_runs < 1:
        raise ConfigError("num_runs must be >= 1")
    if config.batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    if config.eta <= 0:
        raise ConfigError("eta must be positive")
    if not (0.0 < config.delta_label < 1.0):
        raise ConfigError("delta_label must be in (0, 1)")


@dataclass
class RunResult:
    run_index: int
    seed: int
    effective_clusters: int
    known_classes: list[str]
    num_labeled: int
    test: MetricsReport
    validation_known: MetricsReport | None
    pairwise_log: list[PairwiseEpoch] = field(default_factory=list)
    refinement_log: list[RefineEpoch] = field(default_factory=list)
    # final model pieces for checkpointing; excluded from serialization
    params: ClusterNetParams | None = None
    lam: float = 0.0
    centroids: np.ndarray | None = None


@dataclass
class ClusteringReport:
    config: RunConfig
    effective_clusters: int
    true_classes: int
    inference_approximation: str | None
    runs: list[RunResult]
    aggregates: dict

    def last_run(self) -> RunResult:
        return self.runs[-1]


def _eval_forward(params: ClusterNetParams, X: np.ndarray) -> np.ndarray:
    I, _ = clusternet.forward(params.eval_view(), X)
    return I


def _labels_at(ds: EmbeddedDataset, idx: np.ndarray) -> list[str]:
    return [ds.labels[i] for i in idx]


def single_run(config: RunConfig, ds: EmbeddedDataset, run_index: int) -> RunResult:
    run_seed = config.seed + run_index
    ds_run = ds
    if config.gamma is not None:
        ds_run = subsample_imbalanced(ds, config.gamma, run_seed)
    mask = make_experiment_mask(ds_run, config.unknown_class_ratio,
                                config.labeled_ratio, run_seed)
    k_true = len(ds_run.class_ids())
    k = config.cluster_count if config.cluster_count is not None else max(
        2, _round_half_away(config.cluster_multiplier * k_true))

    train_idx = ds_run.split_indices("train")
    test_idx = ds_run.split_indices("test")
    val_idx = ds_run.split_indices("validation")

    params = None
    lam = 0.0
    plog: list[PairwiseEpoch] = []
    rlog: list[RefineEpoch] = []

    if config.variant == "KM-raw":
        U, _ = refine.kmeans(ds_run.embeddings[train_idx], k, run_seed)
        test_pred = refine.infer(ds_run.embeddings[test_idx], U)
        val_pred = refine.infer(ds_run.embeddings[val_idx], U) if val_idx.size else None
    else:
        params = clusternet.init_params(ds_run.dim, k, run_seed,
                                        dropout_rate=config.dropout_rate)
        opt = AdamState(config.learning_rate)
        ts = ThresholdState(eta=config.eta)
        train_mask = mask if uses_constraints(config.variant) else None
        params, ts, plog = pairwise.run_pairwise_training(
            ds_run, train_mask, params, opt, ts,
            PairwiseConfig(batch_size=config.batch_size,
                           epoch_cap=config.pairwise_epoch_cap,
                           seed=run_seed))
        lam = ts.lam
        if uses_refinement(config.variant):
            state = refine.init_refinement(ds_run, params, k, run_seed,
                                           delta_label=config.delta_label)
            refine_lr = (config.refine_learning_rate
                         if config.refine_learning_rate is not None
                         else config.learning_rate)
            params, state, _, rlog = refine.run_refinement(
                ds_run, params, AdamState(refine_lr), state,
                RefineConfig(batch_size=config.batch_size,
                             epoch_cap=config.refine_epoch_cap,
                             seed=run_seed))
            U = state.centroids
        else:
            I_train = _eval_forward(params, ds_run.embeddings[train_idx])
            U, _ = refine.kmeans(I_train, k, run_seed)
        test_pred = refine.infer(_eval_forward(params, ds_run.embeddings[test_idx]), U)
        val_pred = (refine.infer(_eval_forward(params, ds_run.embeddings[val_idx]), U)
                    if val_idx.size else None)

    clusters = list(range(k))
    test_report = metrics.evaluate(_labels_at(ds_run, test_idx), test_pred,
                                   clusters=clusters)
    val_report = None
    if val_pred is not None:
        keep = [p for p, i in enumerate(val_idx)
                if ds_run.labels[i] in mask.known_classes]
        if keep:
            val_report = metrics.evaluate(
                [ds_run.labels[val_idx[p]] for p in keep],
                [val_pred[p] for p in keep], clusters=clusters)

    return RunResult(
        run_index=run_index,
        seed=run_seed,
        effective_clusters=k,
        known_classes=sorted(mask.known_classes),
        num_labeled=len(mask.labeled_sample_ids),
        test=test_report,
        validation_known=val_report,
        pairwise_log=plog,
        refinement_log=rlog,
        params=params,
        lam=lam,
        centroids=U,
    )


def _aggregate(reports: list[MetricsReport | None]) -> dict:
    present = [r for r in reports if r is not None]
    if not present:
        return {}
    out = {}
    for name in ("nmi", "ari", "acc"):
        vals = np.array([getattr(r, name) for r in present])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_variant(config: RunConfig, ds: EmbeddedDataset) -> ClusteringReport:
    """Execute num_runs independent repetitions and aggregate their scores."""
    validate_config(config)
    if not ds.has_full_labels():
        raise ConfigError("reports need ground-truth labels on every sample")
    runs = [single_run(config, ds, r) for r in range(config.num_runs)]
    note = None
    if config.variant in ("DAC", "CDAC"):
        note = ("no native inference rule; evaluated by k-means centroid "
                "assignment without refinement (the -KM evaluation)")
    return ClusteringReport(
        config=config,
        effective_clusters=runs[0].effective_clusters,
        true_classes=len(ds.class_ids()),
        inference_approximation=note,
        runs=runs,
        aggregates={
            "test": _aggregate([r.test for r in runs]),
            "validation_known": _aggregate([r.validation_known for r in runs]),
        },
    )


def sweep(config_base: RunConfig, axis: str, values: list[float],
          ds: EmbeddedDataset, jobs: int = 1) -> list[ClusteringReport]:
    """One report per axis value, other parameters fixed, seeds aligned."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    bounds = {
        "cluster_multiplier": (1.0, 4.0),
        "labeled_ratio": (1e-9, 1.0),
        "unknown_class_ratio": (0.0, 1.0 - 1e-9),
        "gamma": (1e-9, 1.0),
    }[axis]
    for v in values:
        if not (bounds[0] <= v <= bounds[1]):
            raise ConfigError(f"{axis} value {v} outside [{bounds[0]}, {bounds[1]}]")
    configs = [dataclasses.replace(config_base, **{axis: v}) for v in values]
    for c in configs:
        validate_config(c)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_variant, configs, [ds] * len(configs)))
    return [run_variant(c, ds) for c in configs]


def sweep_plot_tables(values: list[float],
                      reports: list[ClusteringReport]) -> dict[str, list[tuple]]:
    """Per-metric (axis value, mean, std) rows for external plotting."""
    tables: dict[str, list[tuple]] = {"nmi": [], "ari": [], "acc": []}
    for v, rep in zip(values, reports):
        for name in tables:
            agg = rep.aggregates["test"][name]
            tables[name].append((v, agg["mean"], agg["std"]))
    return tables


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _metrics_jsonable(report: MetricsReport | None):
    if report is None:
        return None
    return {
        "nmi": report.nmi,
        "ari": report.ari,
        "acc": _jsonable(report.acc),
        "alignment": _jsonable(report.alignment),
    }


def report_to_jsonable(report: ClusteringReport) -> dict:
    cfg = dataclasses.asdict(report.config)
    return _jsonable({
        "config": cfg,
        "effective_clusters": report.effective_clusters,
        "true_classes": report.true_classes,
        "inference_approximation": report.inference_approximation,
        "runs": [{
            "run_index": r.run_index,
            "seed": r.seed,
            "known_classes": r.known_classes,
            "num_labeled": r.num_labeled,
            "test": _metrics_jsonable(r.test),
            "validation_known": _metrics_jsonable(r.validation_known),
            "pairwise_log": [dataclasses.asdict(e) for e in r.pairwise_log],
            "refinement_log": [dataclasses.asdict(e) for e in r.refinement_log],
        } for r in report.runs],
        "aggregates": report.aggregates,
    })


def report_to_json(report: ClusteringReport) -> str:
    return json.dumps(report_to_jsonable(report), indent=2, sort_keys=True)
