"""Conceptual sensitivity, TCAV scores and the multi-run significance experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .cav import Cav, CavTrainConfig, UntrainableCavError, activation_matrix, make_random_random_cav, train_cav
from .concepts import ConceptSet, NegativePool
from .diffmodel import ImageSample, LayeredModel, stack_pixels
from .stats import bonferroni_significant, one_sample_ttest_two_sided, welch_ttest_two_sided

log = logging.getLogger(__name__)

# offset separating random-random seeds from concept-run seeds
RANDOM_SEED_OFFSET = 1_000_003


@dataclass
class SensitivityRecord:
    input_index: int
    value: float
    concept_name: str
    class_k: int
    layer_name: str


@dataclass
class ExperimentConfig:
    layers: list
    concepts: list
    class_k: int
    n_runs: int = 10
    negatives_per_run: int = 100
    alpha: float = 0.05
    m: int = 2
    seed: int = 0
    test: str = "welch"  # or "one_sample" (concept scores vs 0.5)
    random_per_side: Optional[int] = None

    def __post_init__(self) -> None:
        if self.n_runs < 2:
            raise ValueError("n_runs must be at least 2 for a t-test")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be a positive integer")
        if self.negatives_per_run < 1:
            raise ValueError("negatives_per_run must be positive")
        if self.test not in ("welch", "one_sample"):
            raise ValueError(f"unknown test {self.test!r}")


@dataclass
class TcavResult:
    concept_name: str
    class_k: int
    layer_name: str
    concept_scores: list
    random_scores: list
    mean_score: float
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    significant: bool
    alpha: float
    m: int
    mean_cav_accuracy: float = float("nan")
    dropped_runs: list = field(default_factory=list)
    testable: bool = True

    @property
    def n_runs(self) -> int:
        return len(self.concept_scores)

    def to_record(self) -> dict:
        return asdict(self)


def directional_derivative(gradient, cav: Union[Cav, np.ndarray]) -> float:
    """S = gradient . direction."""
    g = np.asarray(gradient, dtype=np.float64).reshape(-1)
    v = cav.direction if isinstance(cav, Cav) else np.asarray(cav, dtype=np.float64).reshape(-1)
    if g.size != v.size:
        raise ValueError(f"gradient length {g.size} does not match direction length {v.size}")
    return float(g @ v)


def score_from_sensitivities(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no sensitivities to score")
    return int(np.count_nonzero(values > 0.0)) / values.size


def _class_gradients(model: LayeredModel, images, layer_name: str, class_k: int, batch_size: int = 128):
    x = stack_pixels(images)
    return np.concatenate(
        [model.logit_gradients(x[i : i + batch_size], layer_name, class_k) for i in range(0, len(x), batch_size)]
    )


def conceptual_sensitivities(
    model: LayeredModel, layer_name: str, class_k: int, class_inputs: Sequence[ImageSample], cav: Cav
) -> list[SensitivityRecord]:
    if len(class_inputs) == 0:
        raise ValueError("class inputs are empty")
    if cav.layer_name != layer_name:
        raise ValueError(f"CAV belongs to layer {cav.layer_name!r}, not {layer_name!r}")
    grads = _class_gradients(model, class_inputs, layer_name, class_k)
    if grads.shape[1] != cav.size:
        raise ValueError(f"CAV length {cav.size} does not match layer size {grads.shape[1]}")
    values = grads @ cav.direction
    return [
        SensitivityRecord(i, float(v), cav.concept_name, class_k, layer_name) for i, v in enumerate(values)
    ]


def tcav_score(
    model: LayeredModel, layer_name: str, class_k: int, class_inputs: Sequence[ImageSample], cav: Cav
) -> float:
    """Fraction of ``class_inputs`` whose sensitivity to the CAV is strictly positive."""
    records = conceptual_sensitivities(model, layer_name, class_k, class_inputs, cav)
    return score_from_sensitivities(np.array([r.value for r in records]))


def _test(concept_scores, random_scores, cfg: ExperimentConfig):
    if cfg.test == "one_sample":
        return one_sample_ttest_two_sided(concept_scores, 0.5)
    return welch_ttest_two_sided(concept_scores, random_scores)


def _pool_for(negative_pool, concept_name: str) -> NegativePool:
    if isinstance(negative_pool, NegativePool):
        return negative_pool
    try:
        return negative_pool[concept_name]
    except KeyError:
        raise ValueError(f"no negative pool configured for concept {concept_name!r}") from None


def negative_indices(pool: NegativePool, count: int, seed: int, exclude: str) -> np.ndarray:
    """Indices drawn exactly as ``concepts.sample_negative_set`` draws images."""
    if exclude not in pool.exclusion_tags:
        raise ValueError(f"negative pool does not guarantee absence of concept {exclude!r}")
    if not 1 <= count <= len(pool):
        raise ValueError(f"cannot draw {count} images from a pool of {len(pool)}")
    return np.random.default_rng(seed).permutation(len(pool))[:count]


def run_experiment(
    model: LayeredModel,
    cfg: ExperimentConfig,
    concept_sets: Sequence[ConceptSet],
    negative_pool: Union[NegativePool, Mapping[str, NegativePool]],
    class_inputs: Sequence[ImageSample],
    cav_cfg: CavTrainConfig = CavTrainConfig(),
    cav_sink: Optional[list] = None,
) -> list[TcavResult]:
    """Concept-vs-random and random-vs-random CAV runs for every (concept, layer).

    Run r draws its negative batch with seed ``cfg.seed + r``. Runs whose
    CAV cannot be trained are dropped and listed in ``dropped_runs``; a pair
    with fewer than two valid runs on either side is marked untestable.
    Trained CAVs are appended to ``cav_sink`` when given.
    """
    if len(class_inputs) == 0:
        raise ValueError("class inputs are empty")
    by_name = {cs.concept_name: cs for cs in concept_sets}
    concepts = list(cfg.concepts) or sorted(by_name)
    missing = [c for c in concepts if c not in by_name]
    if missing:
        raise ValueError(f"no concept set for {missing}")
    for layer in cfg.layers:
        model.layer_index(layer)
    if not 0 <= cfg.class_k < model.class_count:
        raise ValueError(f"class index {cfg.class_k} out of range for {model.class_count} classes")

    layer_order = sorted(cfg.layers, key=model.layer_index)
    results = []
    for layer in layer_order:
        grads = _class_gradients(model, class_inputs, layer, cfg.class_k)
        pool_acts: dict[int, np.ndarray] = {}
        random_cache: dict[int, tuple[list, list]] = {}
        for concept in sorted(concepts):
            pool = _pool_for(negative_pool, concept)
            key = id(pool)
            if key not in pool_acts:
                pool_acts[key] = activation_matrix(model, pool.images, layer)
            neg_all = pool_acts[key]
            pos = activation_matrix(model, by_name[concept].images, layer)

            scores, accs, dropped = [], [], []
            for run in range(cfg.n_runs):
                idx = negative_indices(pool, cfg.negatives_per_run, cfg.seed + run, concept)
                run_cfg = replace(cav_cfg, seed=cav_cfg.seed + cfg.seed + run)
                try:
                    cav = train_cav(pos, neg_all[idx], run_cfg, concept_name=concept, run_id=run, layer_name=layer)
                except UntrainableCavError as exc:
                    log.warning("dropping run %d: %s", run, exc)
                    dropped.append(run)
                    continue
                if cav_sink is not None:
                    cav_sink.append(cav)
                scores.append(score_from_sensitivities(grads @ cav.direction))
                accs.append(cav.holdout_accuracy)

            if key not in random_cache:
                random_cache[key] = _random_scores(neg_all, grads, cfg, cav_cfg, layer, cav_sink)
            random_scores, random_dropped = random_cache[key]
            results.append(_summarize(concept, layer, scores, random_scores, accs, dropped, random_dropped, cfg))
    return results


def _random_scores(neg_all, grads, cfg: ExperimentConfig, cav_cfg: CavTrainConfig, layer, cav_sink):
    per_side = cfg.random_per_side or cfg.negatives_per_run
    per_side = min(per_side, len(neg_all) // 2)
    scores, dropped = [], []
    for run in range(cfg.n_runs):
        seed = cfg.seed + RANDOM_SEED_OFFSET + run
        run_cfg = replace(cav_cfg, seed=cav_cfg.seed + seed)
        try:
            cav = make_random_random_cav(neg_all, per_side, run_cfg, seed=seed, run_id=run, layer_name=layer)
        except UntrainableCavError as exc:
            log.warning("dropping random run %d: %s", run, exc)
            dropped.append(run)
            continue
        if cav_sink is not None:
            cav_sink.append(cav)
        scores.append(score_from_sensitivities(grads @ cav.direction))
    return scores, dropped


def _summarize(concept, layer, scores, random_scores, accs, dropped, random_dropped, cfg) -> TcavResult:
    mean_acc = float(np.mean(accs)) if accs else float("nan")
    mean_score = math.fsum(scores) / len(scores) if scores else float("nan")
    enough_random = len(random_scores) >= 2 or cfg.test == "one_sample"
    if len(scores) < 2 or not enough_random:
        log.warning("concept %r at layer %r is untestable (%d valid runs)", concept, layer, len(scores))
        return TcavResult(
            concept, cfg.class_k, layer, scores, random_scores, mean_score, float("nan"), float("nan"),
            1.0, False, cfg.alpha, cfg.m, mean_acc, dropped + [-1 - r for r in random_dropped], testable=False,
        )
    outcome = _test(scores, random_scores, cfg)
    return TcavResult(
        concept_name=concept,
        class_k=cfg.class_k,
        layer_name=layer,
        concept_scores=scores,
        random_scores=random_scores,
        mean_score=mean_score,
        t_statistic=outcome.t_statistic,
        degrees_of_freedom=outcome.degrees_of_freedom,
        p_value=outcome.p_value,
        significant=bonferroni_significant(outcome.p_value, cfg.alpha, cfg.m),
        alpha=cfg.alpha,
        m=cfg.m,
        mean_cav_accuracy=mean_acc,
        dropped_runs=dropped + [-1 - r for r in random_dropped],
    )
