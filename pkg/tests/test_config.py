import pytest

from tcavlab.config import ConfigError, config_from_dict, load_config


def test_defaults_are_five_colors_of_one_hundred():
    cfg = load_config()
    assert [c.name for c in cfg.concepts] == ["red", "brown", "blue", "yellow", "green"]
    assert all(c.count == 100 and c.kind == "color" for c in cfg.concepts)
    assert cfg.experiment.n_runs == 10 and cfg.experiment.alpha == 0.05 and cfg.experiment.m == 2
    assert cfg.cav.l2_penalty == 0.01 and cfg.cav.epochs == 200


def test_yaml_file_and_seed_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\npaths: {output_dir: results}\ntrain: {epochs: 2}\n")
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.train.epochs == 2
    assert cfg.path("output_dir") == tmp_path / "results"
    assert cfg.effective(10) == 13
    assert load_config(path, seed=7).effective(10) == 17


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"epochz": 3}},
        {"seed": "one"},
        {"concepts": [{"name": "purple", "kind": "color"}]},
        {"concepts": [{"name": "cracked", "kind": "texture"}]},
        {"concepts": [{"name": "red", "kind": "color", "negatives": "nowhere"}]},
        {"experiment": {"concepts": ["teal"]}},
        {"experiment": {"inputs": "holdout"}},
        {"train": {"learning_rate": -1}},
    ],
)
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_texture_concept_with_healthy_pool():
    cfg = config_from_dict(
        {
            "concepts": [{"name": "cracked", "kind": "texture", "negatives": "healthy"}],
            "negatives": [{"name": "healthy", "kind": "healthy_leaves"}],
        }
    )
    assert cfg.pool_spec("healthy").kind == "healthy_leaves"


def test_missing_or_invalid_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
