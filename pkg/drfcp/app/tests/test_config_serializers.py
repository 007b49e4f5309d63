import pytest
from rest_framework.exceptions import ValidationError

from drfcp.app.experiment import Method, derive_seed
from drfcp.app.learning.conformal import QuantileMode
from drfcp.app.learning.nn import TrainSchedule
from drfcp.app.serializers import ExperimentConfigSerializer

from .factories import TinyConfigFactory


def build(payload):
    serializer = ExperimentConfigSerializer(data=payload)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


def errors_of(payload):
    serializer = ExperimentConfigSerializer(data=payload)
    assert not serializer.is_valid()
    return serializer.errors


# -------------------------
# DEFAULTS AND PRESETS
# -------------------------

def test_empty_payload_gets_desk_defaults():
    config = build({})
    assert config.preset == "desk"
    assert config.methods == tuple(Method)
    assert config.confidence_levels == (0.7, 0.8, 0.9)
    assert config.quantile_mode is QuantileMode.FINITE_SAMPLE
    assert config.beta == 0.0
    assert config.ann.layer_sizes == (64, 32, 1)
    assert config.ann.learning_rate == 1e-3
    assert (config.drf.n_trees, config.drf.depth, config.drf.routing_width) == (5, 4, 32)
    assert config.rf.n_trees == 100
    assert config.schedule == TrainSchedule()
    assert config.split.n_partitions == 5
    assert config.data.is_synthetic


def test_full_preset_pins_the_large_architectures():
    config = build({"preset": "full"})
    assert config.ann.layer_sizes == (1500, 1000, 600, 300, 100, 50, 1)
    assert config.ann.learning_rate == 1e-4
    assert config.drf.hidden_layers == (1500, 1000, 600)
    assert (config.drf.n_trees, config.drf.depth, config.drf.routing_width) == (15, 7, 600)
    assert config.drf.use_batchnorm


def test_explicit_values_win_over_the_preset():
    config = build({"preset": "full", "drf": {"n_trees": 3}, "ann": {"hidden_layers": [10]}})
    assert config.drf.n_trees == 3
    assert config.drf.depth == 7
    assert config.ann.layer_sizes == (10, 1)


def test_confidence_levels_are_sorted():
    assert build({"confidence_levels": [0.9, 0.7, 0.8]}).confidence_levels == (0.7, 0.8, 0.9)


def test_seed_feeds_partition_and_component_seeds():
    config = build({"seed": 11})
    assert config.partition_seed(2) == 13
    assert config.ann_for(2).seed == derive_seed(13, "ann")
    assert config.drf_for(2).seed != config.ann_for(2).seed
    assert config.rf_for(0).seed == derive_seed(11, "rf")
    assert config.mcd_seeds(2) == (derive_seed(13, "mcd_cal"), derive_seed(13, "mcd_test"))
    assert len(set(config.mcd_seeds(2))) == 2


def test_method_requirements():
    config = build({"methods": ["ann_cp"]})
    assert config.needs_ann and not config.needs_drf and not config.needs_rf
    config = build({"methods": ["drf_std_ens"]})
    assert config.needs_drf and not config.needs_ann
    assert build({"methods": ["ann_rf"]}).needs_rf


# -------------------------
# VALIDATION
# -------------------------

@pytest.mark.parametrize("payload, field", [
    ({"methods": []}, "methods"),
    ({"methods": ["ann_cp", "ann_cp"]}, "methods"),
    ({"methods": ["bogus"]}, "methods"),
    ({"confidence_levels": []}, "confidence_levels"),
    ({"confidence_levels": [1.0]}, "confidence_levels"),
    ({"confidence_levels": [0.0, 0.5]}, "confidence_levels"),
    ({"confidence_levels": [0.9, 0.9]}, "confidence_levels"),
    ({"split": {"train_fraction": 0.5, "cal_fraction": 0.1, "test_fraction": 0.1}}, "split"),
    ({"drf": {"depth": 4, "routing_width": 8}}, "drf"),
    ({"schedule": {"patience_lr": 5, "patience_stop": 2}}, "schedule"),
    ({"schedule": {"lr_decay_factor": 1.0}}, "schedule"),
    ({"rf": {"max_features": 1.5}}, "rf"),
    ({"data": {"kind": "csv"}}, "data"),
    ({"data": {"kind": "drug_cell", "responses": "r.csv"}}, "data"),
    ({"bins": {"boundaries": [4.0, 2.0]}}, "bins"),
    ({"beta": -0.5}, "beta"),
    ({"quantile_mode": "exact"}, "quantile_mode"),
    ({"preset": "huge"}, "preset"),
])
def test_invalid_payloads_are_rejected(payload, field):
    assert field in errors_of(payload)


def test_non_object_payload_is_rejected():
    assert "non_field_errors" in errors_of([1, 2, 3])


def test_domain_errors_surface_as_validation_errors():
    # passes field validation, but a zero fraction cannot be split on
    serializer = ExperimentConfigSerializer(data={"split": {"train_fraction": 1.0, "cal_fraction": 0.0, "test_fraction": 0.0}})
    assert serializer.is_valid()
    with pytest.raises(ValidationError):
        serializer.save()


# -------------------------
# ROUND TRIP AND HASH
# -------------------------

def test_to_dict_round_trips_through_the_serializer():
    config = build(TinyConfigFactory())
    assert build(config.to_dict()) == config


def test_full_config_round_trips():
    config = build({"preset": "full", "quantile_mode": "plain", "beta": 0.1})
    assert build(config.to_dict()) == config


def test_config_hash_ignores_output_dir():
    first = build(TinyConfigFactory(output_dir="runs/a"))
    second = build(TinyConfigFactory(output_dir="runs/b"))
    assert first.config_hash() == second.config_hash()
    assert len(first.config_hash()) == 64


def test_config_hash_tracks_result_relevant_fields():
    base = build(TinyConfigFactory())
    assert build(TinyConfigFactory(seed=8)).config_hash() != base.config_hash()
    assert build(TinyConfigFactory(beta=0.5)).config_hash() != base.config_hash()
    assert build(TinyConfigFactory(rf__n_trees=6)).config_hash() != base.config_hash()
