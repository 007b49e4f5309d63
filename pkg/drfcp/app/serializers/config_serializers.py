from rest_framework import serializers

from ..exceptions import DrfcpError
from ..experiment import DataSource, ExperimentConfig, Method
from ..learning.conformal import QuantileMode
from ..learning.dataset import SplitSpec
from ..learning.drf import DrfConfig
from ..learning.metrics import BinSpec
from ..learning.nn import ACTIVATIONS, MlpConfig, TrainSchedule
from ..learning.rf import RfConfig


# -------------------------
# PRESETS
# -------------------------

# Values a preset supplies for sections the config file leaves out.
PRESETS = {
    "desk": {
        "ann": {"hidden_layers": [64, 32], "learning_rate": 1e-3},
        "drf": {"hidden_layers": [64, 32], "routing_width": 32, "n_trees": 5, "depth": 4},
    },
    "full": {
        "ann": {"hidden_layers": [1500, 1000, 600, 300, 100, 50], "learning_rate": 1e-4},
        "drf": {
            "hidden_layers": [1500, 1000, 600],
            "routing_width": 600,
            "n_trees": 15,
            "depth": 7,
            "use_batchnorm": True,
            "learning_rate": 1e-4,
        },
    },
}
SECTIONS = ("data", "split", "ann", "drf", "rf", "schedule", "bins")


# -------------------------
# SECTION SERIALIZERS
# -------------------------

class DataSourceSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=["synthetic", "csv", "drug_cell"], default="synthetic")
    n_samples = serializers.IntegerField(min_value=3, default=1000)
    noise_features = serializers.IntegerField(min_value=0, default=8)
    path = serializers.CharField(required=False)
    target_column = serializers.CharField(default="y")
    id_column = serializers.CharField(required=False)
    drug_features = serializers.CharField(required=False)
    cell_features = serializers.CharField(required=False)
    responses = serializers.CharField(required=False)

    def validate(self, attrs):
        kind = attrs["kind"]
        if kind == "csv" and not attrs.get("path"):
            raise serializers.ValidationError({"path": ["A csv data source needs a path."]})
        if kind == "drug_cell":
            missing = [k for k in ("drug_features", "cell_features", "responses") if not attrs.get(k)]
            if missing:
                raise serializers.ValidationError({k: ["Required for a drug_cell data source."] for k in missing})
        return attrs


class SplitSpecSerializer(serializers.Serializer):
    train_fraction = serializers.FloatField(default=0.8)
    cal_fraction = serializers.FloatField(default=0.1)
    test_fraction = serializers.FloatField(default=0.1)
    n_partitions = serializers.IntegerField(min_value=1, default=5)


class AnnConfigSerializer(serializers.Serializer):
    hidden_layers = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[64, 32])
    dropout_prob = serializers.FloatField(min_value=0.0, max_value=0.99, default=0.1)
    use_batchnorm = serializers.BooleanField(default=False)
    learning_rate = serializers.FloatField(min_value=0.0, default=1e-3)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    activation = serializers.ChoiceField(choices=list(ACTIVATIONS), default="relu")


class DrfConfigSerializer(serializers.Serializer):
    n_trees = serializers.IntegerField(min_value=1, default=5)
    depth = serializers.IntegerField(min_value=1, max_value=12, default=4)
    hidden_layers = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[64, 32])
    routing_width = serializers.IntegerField(min_value=1, default=32)
    use_batchnorm = serializers.BooleanField(default=True)
    dropout_prob = serializers.FloatField(min_value=0.0, max_value=0.99, default=0.1)
    learning_rate = serializers.FloatField(min_value=0.0, default=1e-3)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    leaf_iterations = serializers.IntegerField(min_value=0, default=20)
    activation = serializers.ChoiceField(choices=list(ACTIVATIONS), default="relu")

    def validate(self, attrs):
        if attrs["routing_width"] < 2 ** attrs["depth"] - 1:
            raise serializers.ValidationError(
                {"routing_width": [f"Must be at least {2 ** attrs['depth'] - 1} for depth {attrs['depth']}."]}
            )
        return attrs


class RfConfigSerializer(serializers.Serializer):
    n_trees = serializers.IntegerField(min_value=1, default=100)
    max_depth = serializers.IntegerField(min_value=0, default=12)
    min_samples_leaf = serializers.IntegerField(min_value=1, default=5)
    max_features = serializers.FloatField(default=1.0 / 3.0)
    bootstrap = serializers.BooleanField(default=True)

    def validate_max_features(self, value):
        if not 0.0 < value <= 1.0:
            raise serializers.ValidationError("Must lie in (0, 1].")
        return value


class ScheduleSerializer(serializers.Serializer):
    patience_lr = serializers.IntegerField(min_value=1, default=5)
    patience_stop = serializers.IntegerField(min_value=1, default=10)
    lr_decay_factor = serializers.FloatField(default=10.0)
    max_epochs = serializers.IntegerField(min_value=1, default=200)
    min_delta = serializers.FloatField(min_value=0.0, default=1e-6)

    def validate(self, attrs):
        if attrs["patience_stop"] < attrs["patience_lr"]:
            raise serializers.ValidationError({"patience_stop": ["Must not be smaller than patience_lr."]})
        if attrs["lr_decay_factor"] <= 1.0:
            raise serializers.ValidationError({"lr_decay_factor": ["Must exceed 1."]})
        return attrs


class BinSpecSerializer(serializers.Serializer):
    boundaries = serializers.ListField(child=serializers.FloatField(), default=[2.0, 4.0])
    labels = serializers.ListField(child=serializers.CharField(), default=["low", "med", "high"])

    def validate(self, attrs):
        if any(b >= c for b, c in zip(attrs["boundaries"], attrs["boundaries"][1:])):
            raise serializers.ValidationError({"boundaries": ["Must be strictly increasing."]})
        if len(attrs["labels"]) != len(attrs["boundaries"]) + 1:
            raise serializers.ValidationError({"labels": ["Need exactly one more label than boundaries."]})
        return attrs


# -------------------------
# EXPERIMENT CONFIG
# -------------------------

class ExperimentConfigSerializer(serializers.Serializer):
    """
    Validates an experiment JSON document. ``save()`` returns the immutable
    ``ExperimentConfig``; nothing touches the database.
    """

    preset = serializers.ChoiceField(choices=list(PRESETS), default="desk")
    data = DataSourceSerializer(required=False)
    split = SplitSpecSerializer(required=False)
    ann = AnnConfigSerializer(required=False)
    drf = DrfConfigSerializer(required=False)
    rf = RfConfigSerializer(required=False)
    schedule = ScheduleSerializer(required=False)
    bins = BinSpecSerializer(required=False)
    methods = serializers.ListField(
        child=serializers.ChoiceField(choices=[m.value for m in Method]),
        default=[m.value for m in Method],
    )
    confidence_levels = serializers.ListField(child=serializers.FloatField(), default=[0.7, 0.8, 0.9])
    beta = serializers.FloatField(min_value=0.0, default=0.0)
    quantile_mode = serializers.ChoiceField(choices=[m.value for m in QuantileMode], default=QuantileMode.FINITE_SAMPLE.value)
    mcd_passes = serializers.IntegerField(min_value=2, default=50)
    standardize = serializers.BooleanField(default=True)
    output_dir = serializers.CharField(default="runs/default")
    seed = serializers.IntegerField(min_value=0, default=0)

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError({"non_field_errors": ["Config must be a JSON object."]})
        preset = PRESETS.get(data.get("preset", "desk"), {})
        merged = dict(data)
        # nested sections must be present for their field defaults to apply
        for section in SECTIONS:
            given = data.get(section, {})
            defaults = preset.get(section, {})
            merged[section] = {**defaults, **given} if isinstance(given, dict) else given
        return super().to_internal_value(merged)

    def validate_methods(self, value):
        if not value:
            raise serializers.ValidationError("At least one method is required.")
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Methods must not repeat.")
        return value

    def validate_confidence_levels(self, value):
        if not value:
            raise serializers.ValidationError("At least one confidence level is required.")
        if any(not 0.0 < cl < 1.0 for cl in value):
            raise serializers.ValidationError("Confidence levels must lie in (0, 1).")
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Confidence levels must not repeat.")
        return sorted(value)

    def validate_split(self, value):
        total = value["train_fraction"] + value["cal_fraction"] + value["test_fraction"]
        if abs(total - 1.0) > 1e-9:
            raise serializers.ValidationError({"non_field_errors": [f"Fractions must sum to 1, got {total!r}."]})
        return value

    def create(self, validated_data):
        v = validated_data
        ann, drf = v["ann"], v["drf"]
        try:
            return ExperimentConfig(
                data=DataSource(**v["data"]),
                split=SplitSpec(seed=v["seed"], **v["split"]),
                ann=MlpConfig(
                    layer_sizes=tuple(ann["hidden_layers"]) + (1,),
                    dropout_prob=ann["dropout_prob"],
                    use_batchnorm=ann["use_batchnorm"],
                    learning_rate=ann["learning_rate"],
                    batch_size=ann["batch_size"],
                    activation=ann["activation"],
                ),
                drf=DrfConfig(**{**drf, "hidden_layers": tuple(drf["hidden_layers"])}),
                rf=RfConfig(**v["rf"]),
                schedule=TrainSchedule(**v["schedule"]),
                bins=BinSpec(tuple(v["bins"]["boundaries"]), tuple(v["bins"]["labels"])),
                methods=tuple(Method(m) for m in v["methods"]),
                confidence_levels=tuple(v["confidence_levels"]),
                beta=v["beta"],
                quantile_mode=QuantileMode(v["quantile_mode"]),
                mcd_passes=v["mcd_passes"],
                standardize=v["standardize"],
                preset=v["preset"],
                output_dir=v["output_dir"],
                seed=v["seed"],
            )
        except DrfcpError as ex:
            raise serializers.ValidationError({"non_field_errors": [str(ex)]})
