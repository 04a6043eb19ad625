"""Testing with concept activation vectors on a small hand-differentiated CNN."""

from .cav import Cav, CavTrainConfig, collect_activations, make_random_random_cav, train_cav
from .concepts import (
    ConceptSet,
    NegativePool,
    SplitRatios,
    generate_color_concept,
    generate_disease_pattern_concept,
    generate_texture_concept,
    load_image_directory,
    sample_negative_set,
    split_dataset,
)
from .diffmodel import (
    ImageSample,
    LayerActivation,
    LayeredModel,
    TrainConfig,
    forward_to_layer,
    grad_logit_wrt_activation,
    layer_to_logits,
    predict,
    reference_model,
    train_classifier,
)
from .stats import bonferroni_significant, classification_metrics, welch_ttest_two_sided
from .tcav import ExperimentConfig, TcavResult, directional_derivative, run_experiment, tcav_score

__version__ = "0.1.0"
