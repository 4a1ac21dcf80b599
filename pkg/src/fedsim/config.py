"""Experiment configuration files: parsing, validation, resolution.

Configs are JSON documents with nested sections (dataset, partition,
agents, sampling, aggregation, model, training, telemetry, optional
pretrain, seed).  Validation is total: a bad config produces the complete
list of problems, never a crash or a partial run, and unknown keys are
rejected so typos cannot silently change an experiment.  Defaults are
filled into the resolved copy so nothing about a run is implicit.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .datamodules import LabeledDataset, load_csv, load_idx, synth_blobs
from .federated import FLConfig
from .numerics import ModelSpec

_MISSING = object()

DEFAULTS = {
    "partition": {"scheme": "iid", "niid_factor": 1},
    "sampling_kind": "random",
    "aggregation": {"kind": "fedavg", "weighting": "by_shard_size"},
    "batch_size": 32,
    "model_mode": "scratch",
    "telemetry": {"format": "jsonl", "rss_sampling": False},
}

_TOP_KEYS = {
    "seed",
    "dataset",
    "partition",
    "agents",
    "sampling",
    "aggregation",
    "model",
    "training",
    "telemetry",
    "pretrain",
}


class ConfigError(ValueError):
    """One or more validation problems; `errors` lists all of them."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ConfigSyntaxError(ConfigError):
    """The file is not valid JSON; message carries line and column."""


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


class _Validator:
    def __init__(self) -> None:
        self.errors: list[str] = []

    def section(self, cfg: dict, name: str, allowed: set[str], required: bool = True):
        if name not in cfg:
            if required:
                self.errors.append(f"{name}: missing required section")
            return None
        value = cfg[name]
        if not isinstance(value, dict):
            self.errors.append(f"{name}: must be an object")
            return None
        for key in value:
            if key not in allowed:
                self.errors.append(f"{name}.{key}: unknown key")
        return value

    def field(self, section, path: str, key: str, check, default=_MISSING):
        if section is None:
            return None if default is _MISSING else default
        if key not in section:
            if default is _MISSING:
                self.errors.append(f"{path}.{key}: missing required field")
                return None
            return default
        value = section[key]
        problem = check(value)
        if problem:
            self.errors.append(f"{path}.{key}: {problem}")
            return None
        return value


def _check_pos_int(v):
    if not _is_int(v) or v < 1:
        return f"must be a positive integer, got {v!r}"
    return None


def _check_int(v):
    if not _is_int(v):
        return f"must be an integer, got {v!r}"
    return None


def _check_nonneg_int(v):
    if not _is_int(v) or v < 0:
        return f"must be a non-negative integer, got {v!r}"
    return None


def _check_nonneg_num(v):
    if not _is_num(v) or v < 0:
        return f"must be a non-negative number, got {v!r}"
    return None


def _check_fraction(v):
    if not _is_num(v) or not 0.0 < v <= 1.0:
        return f"must be a number in (0, 1], got {v!r}"
    return None


def _check_str(v):
    if not isinstance(v, str) or not v:
        return f"must be a non-empty string, got {v!r}"
    return None


def _check_bool(v):
    if not isinstance(v, bool):
        return f"must be true or false, got {v!r}"
    return None


def _check_choice(*choices):
    def check(v):
        if v not in choices:
            return f"must be one of {list(choices)}, got {v!r}"
        return None

    return check


def _check_int_list(v):
    if not isinstance(v, list) or any(not _is_int(h) or h < 1 for h in v):
        return f"must be a list of positive integers, got {v!r}"
    return None


_SOURCE_KEYS = {
    "idx": {"images", "labels"},
    "csv": {"path", "header"},
    "synth": {"num_samples", "num_classes", "num_features", "cluster_spread", "seed"},
}


def _validate_source(v: _Validator, section, path: str, source: str) -> dict | None:
    if section is None:
        return None
    if not isinstance(section, dict):
        v.errors.append(f"{path}: must be an object")
        return None
    for key in section:
        if key not in _SOURCE_KEYS[source]:
            v.errors.append(f"{path}.{key}: unknown key for source {source!r}")
    resolved = {}
    if source == "idx":
        resolved["images"] = v.field(section, path, "images", _check_str)
        resolved["labels"] = v.field(section, path, "labels", _check_str)
    elif source == "csv":
        resolved["path"] = v.field(section, path, "path", _check_str)
        resolved["header"] = v.field(section, path, "header", _check_bool, default=False)
    else:
        resolved["num_samples"] = v.field(section, path, "num_samples", _check_pos_int)
        resolved["num_classes"] = v.field(section, path, "num_classes", _check_pos_int)
        resolved["num_features"] = v.field(section, path, "num_features", _check_pos_int)
        resolved["cluster_spread"] = v.field(
            section, path, "cluster_spread", _check_nonneg_num, default=1.0
        )
        resolved["seed"] = v.field(section, path, "seed", _check_int)
        if (
            resolved["num_samples"] is not None
            and resolved["num_classes"] is not None
            and resolved["num_samples"] < resolved["num_classes"]
        ):
            v.errors.append(f"{path}.num_samples: must be >= num_classes")
    return resolved


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated configuration with every default made explicit."""

    resolved: dict

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    @property
    def telemetry_format(self) -> str:
        return self.resolved["telemetry"]["format"]

    @property
    def rss_sampling(self) -> bool:
        return self.resolved["telemetry"]["rss_sampling"]

    @property
    def pretrain_epochs(self) -> int:
        return self.resolved["pretrain"]["epochs"]

    @property
    def pretrain_lr(self) -> float:
        return self.resolved["pretrain"]["lr"]

    def _load(self, which: str) -> LabeledDataset:
        source = self.resolved["dataset"]["source"]
        section = self.resolved["dataset"][which]
        if source == "idx":
            return load_idx(section["images"], section["labels"])
        if source == "csv":
            return load_csv(section["path"], has_header=section["header"])
        return synth_blobs(
            num_samples=section["num_samples"],
            num_classes=section["num_classes"],
            num_features=section["num_features"],
            cluster_spread=section["cluster_spread"],
            seed=section["seed"],
        )

    def load_train_dataset(self) -> LabeledDataset:
        return self._load("train")

    def load_test_dataset(self) -> LabeledDataset:
        return self._load("test")

    def model_spec(self, train_dataset: LabeledDataset) -> ModelSpec:
        model = self.resolved["model"]
        return ModelSpec(
            kind=model["kind"],
            input_dim=train_dataset.n_features,
            num_classes=train_dataset.num_classes,
            hidden_dims=tuple(model["hidden_dims"]),
        )

    def fl_config(self, train_dataset: LabeledDataset) -> FLConfig:
        r = self.resolved
        return FLConfig(
            num_agents=r["agents"]["count"],
            global_epochs=r["training"]["global_epochs"],
            local_epochs=r["training"]["local_epochs"],
            sample_fraction=r["sampling"]["fraction"],
            lr=r["training"]["lr"],
            model=self.model_spec(train_dataset),
            seed=r["seed"],
            sampler_kind=r["sampling"]["kind"],
            aggregator_kind=r["aggregation"]["kind"],
            weighting=r["aggregation"]["weighting"],
            batch_size=r["training"]["batch_size"],
            mask_mode=r["model"]["mode"],
            pretrained_path=r["model"]["pretrained_path"],
            partition_scheme=r["partition"]["scheme"],
            niid_factor=r["partition"]["niid_factor"],
        )


def validate_config(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a parsed JSON object, collecting every problem before
    raising.  Returns the config with all defaults resolved."""
    v = _Validator()
    if not isinstance(raw, dict):
        raise ConfigError(["top level: must be a JSON object"])
    for key in raw:
        if key not in _TOP_KEYS:
            v.errors.append(f"{key}: unknown key")

    resolved: dict = {}
    if seed_override is not None:
        resolved["seed"] = seed_override
    elif "seed" not in raw:
        v.errors.append("seed: missing required field")
    else:
        problem = _check_int(raw["seed"])
        if problem:
            v.errors.append(f"seed: {problem}")
        else:
            resolved["seed"] = raw["seed"]

    dataset = v.section(raw, "dataset", {"source", "train", "test"})
    source = v.field(dataset, "dataset", "source", _check_choice("idx", "csv", "synth"))
    if dataset is not None and source is not None:
        train_sec = dataset.get("train")
        test_sec = dataset.get("test")
        if train_sec is None:
            v.errors.append("dataset.train: missing required section")
        if test_sec is None:
            v.errors.append("dataset.test: missing required section")
        resolved["dataset"] = {
            "source": source,
            "train": _validate_source(v, train_sec, "dataset.train", source),
            "test": _validate_source(v, test_sec, "dataset.test", source),
        }

    partition = v.section(raw, "partition", {"scheme", "niid_factor"}, required=False)
    scheme = v.field(
        partition,
        "partition",
        "scheme",
        _check_choice("iid", "niid"),
        default=DEFAULTS["partition"]["scheme"],
    )
    niid_factor = v.field(
        partition,
        "partition",
        "niid_factor",
        _check_pos_int,
        default=DEFAULTS["partition"]["niid_factor"],
    )
    resolved["partition"] = {"scheme": scheme, "niid_factor": niid_factor}

    agents = v.section(raw, "agents", {"count"})
    resolved["agents"] = {"count": v.field(agents, "agents", "count", _check_pos_int)}

    sampling = v.section(raw, "sampling", {"fraction", "kind"})
    resolved["sampling"] = {
        "fraction": v.field(sampling, "sampling", "fraction", _check_fraction),
        "kind": v.field(
            sampling, "sampling", "kind", _check_choice("random"), default="random"
        ),
    }

    aggregation = v.section(raw, "aggregation", {"kind", "weighting"}, required=False)
    resolved["aggregation"] = {
        "kind": v.field(
            aggregation,
            "aggregation",
            "kind",
            _check_choice("fedavg", "fedsgd"),
            default=DEFAULTS["aggregation"]["kind"],
        ),
        "weighting": v.field(
            aggregation,
            "aggregation",
            "weighting",
            _check_choice("uniform", "by_shard_size"),
            default=DEFAULTS["aggregation"]["weighting"],
        ),
    }

    model = v.section(raw, "model", {"kind", "hidden_dims", "mode", "pretrained_path"})
    model_kind = v.field(model, "model", "kind", _check_choice("linear", "mlp"))
    hidden_dims = v.field(model, "model", "hidden_dims", _check_int_list, default=[])
    mode = v.field(
        model,
        "model",
        "mode",
        _check_choice("scratch", "finetune", "feature_extract"),
        default=DEFAULTS["model_mode"],
    )
    pretrained_path = None
    if model is not None and model.get("pretrained_path") is not None:
        pretrained_path = v.field(model, "model", "pretrained_path", _check_str)
    resolved["model"] = {
        "kind": model_kind,
        "hidden_dims": hidden_dims,
        "mode": mode,
        "pretrained_path": pretrained_path,
    }

    training = v.section(raw, "training", {"global_epochs", "local_epochs", "batch_size", "lr"})
    resolved["training"] = {
        "global_epochs": v.field(training, "training", "global_epochs", _check_pos_int),
        "local_epochs": v.field(training, "training", "local_epochs", _check_pos_int),
        "batch_size": v.field(
            training, "training", "batch_size", _check_pos_int, default=DEFAULTS["batch_size"]
        ),
        "lr": v.field(training, "training", "lr", _check_nonneg_num),
    }

    telemetry = v.section(raw, "telemetry", {"format", "rss_sampling"}, required=False)
    resolved["telemetry"] = {
        "format": v.field(
            telemetry,
            "telemetry",
            "format",
            _check_choice("jsonl", "csv"),
            default=DEFAULTS["telemetry"]["format"],
        ),
        "rss_sampling": v.field(
            telemetry,
            "telemetry",
            "rss_sampling",
            _check_bool,
            default=DEFAULTS["telemetry"]["rss_sampling"],
        ),
    }

    pretrain_sec = v.section(raw, "pretrain", {"epochs", "lr"}, required=False)
    resolved["pretrain"] = {
        "epochs": v.field(
            pretrain_sec,
            "pretrain",
            "epochs",
            _check_nonneg_int,
            default=resolved["training"]["global_epochs"],
        ),
        "lr": v.field(
            pretrain_sec, "pretrain", "lr", _check_nonneg_num, default=resolved["training"]["lr"]
        ),
    }

    # Cross-field checks (only meaningful once the fields themselves parsed).
    if (
        resolved["aggregation"]["kind"] == "fedsgd"
        and resolved["training"]["local_epochs"] is not None
        and resolved["training"]["local_epochs"] != 1
    ):
        v.errors.append("aggregation.kind: fedsgd requires local_epochs=1")
    if mode in ("finetune", "feature_extract") and not pretrained_path:
        v.errors.append(f"model.pretrained_path: required when model.mode={mode}")
    if model_kind == "linear" and hidden_dims:
        v.errors.append("model.hidden_dims: must be empty for a linear model")
    if model_kind == "mlp" and hidden_dims is not None and not hidden_dims:
        v.errors.append("model.hidden_dims: mlp needs at least one hidden layer")
    if (
        resolved["partition"]["scheme"] == "niid"
        and resolved.get("dataset", {}).get("source") == "synth"
        and resolved["agents"]["count"] is not None
        and niid_factor is not None
    ):
        train = resolved["dataset"]["train"]
        if train and train.get("num_samples") is not None:
            blocks = resolved["agents"]["count"] * niid_factor
            if blocks > train["num_samples"]:
                v.errors.append(
                    f"partition.niid_factor: num_agents * niid_factor = {blocks} "
                    f"exceeds {train['num_samples']} training samples"
                )
    if (
        resolved.get("dataset", {}).get("source") == "synth"
        and resolved["agents"]["count"] is not None
    ):
        train = resolved["dataset"].get("train")
        if train and train.get("num_samples") is not None:
            if resolved["agents"]["count"] > train["num_samples"]:
                v.errors.append(
                    f"agents.count: {resolved['agents']['count']} exceeds "
                    f"{train['num_samples']} training samples"
                )

    if v.errors:
        raise ConfigError(sorted(v.errors))
    return ExperimentConfig(resolved=copy.deepcopy(resolved))


def parse_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    """Read, parse and fully validate a config file.

    Raises ConfigSyntaxError (with line/column) for malformed JSON and
    ConfigError listing every semantic problem otherwise.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(
            [f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"]
        ) from None
    return validate_config(raw, seed_override=seed_override)
