"""Run configuration: flat dotted keys in a YAML file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from tarac.decoding import Sampler, SequenceLayout
from tarac.intervention import TaracConfig
from tarac.model import ModelConfig, Weights, init_weights, load_weights


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# key -> (default, help); None default means "unset"
SCHEMA: dict[str, tuple[Any, str]] = {
    "model.weights": (None, "path to a TTWT weight file; excludes model.seed and model dimensions"),
    "model.seed": (0, "weight-init seed (SplitMix64 streams)"),
    "model.n_layers": (8, "decoder layers"),
    "model.n_heads": (8, "attention heads per layer"),
    "model.d_model": (256, "model width, a multiple of n_heads"),
    "model.vocab_size": (1024, "vocabulary size"),
    "model.max_seq_len": (256, "KV-cache capacity"),
    "model.image_vocab": (256, "ids reserved for image tokens (top of vocabulary)"),
    "layout.n_image_tokens": (64, "image tokens in the prompt"),
    "layout.n_prompt_tokens": (16, "non-image prompt tokens, BOS included"),
    "layout.image_offset": (1, "position of the first image token"),
    "tarac.enabled": (True, "apply the intervention"),
    "tarac.alpha": (0.5, "memory update factor in [0, 1]"),
    "tarac.beta": (0.5, "injection scale, >= 0"),
    "tarac.layers": ("2:6", "half-open zero-based layer range lo:hi"),
    "tarac.head_reducer": ("max", "max | mean"),
    "tarac.renorm_mode": ("rowsum", "rowsum | softmax-diagnostic"),
    "tarac.update_rule": ("ema", "ema | two-step-literal"),
    "run.max_new_tokens": (64, "tokens to generate"),
    "run.sampler": ("greedy", "greedy | temperature"),
    "run.temperature": (1.0, "sampling temperature"),
    "run.seed": (0, "seed for prompt synthesis and sampling"),
    "run.trace_out": (None, "trace output path (JSON lines)"),
    "run.tokens_out": (None, "write generated token ids here"),
    "run.record_layers": ("intervened", "intervened | all"),
    "run.record_profile": (True, "record per-image-token attention in the trace"),
    "bench.repeats": (10, "timed repeats per arm"),
}

_MODEL_DIMS = [k for k in SCHEMA if k.startswith("model.") and k != "model.weights"]


def template() -> str:
    lines = ["# Run configuration. Every key can be overridden on the command line as --<key> VALUE."]
    section = None
    for key, (default, help_) in SCHEMA.items():
        sec = key.split(".")[0]
        if sec != section:
            lines.append("")
            section = sec
        lines.append(f"# {help_}")
        value = yaml.safe_dump(default, default_flow_style=True).strip().removesuffix("...").strip()
        prefix = "# " if default is None else ""
        lines.append(f"{prefix}{key}: {value if default is not None else ''}".rstrip())
    return "\n".join(lines) + "\n"


def _coerce(key: str, value: Any) -> Any:
    default = SCHEMA[key][0]
    if value is None:
        return None
    if isinstance(value, str) and not isinstance(default, str) and default is not None:
        value = yaml.safe_load(value)
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}") from None
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any]
    explicit: set[str]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def effective(self) -> dict[str, Any]:
        return dict(self.values)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**{k.split(".", 1)[1]: self.values[k] for k in _MODEL_DIMS})
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None

    def weights(self) -> Weights:
        path = self.values["model.weights"]
        if path:
            return load_weights(path)
        return init_weights(self.model_config())

    def layout(self) -> SequenceLayout:
        try:
            return SequenceLayout(
                self.values["layout.n_image_tokens"],
                self.values["layout.n_prompt_tokens"],
                self.values["layout.image_offset"],
            )
        except ValueError as exc:
            raise ConfigError("layout", str(exc)) from None

    def tarac(self, force: bool = False) -> Optional[TaracConfig]:
        if not (force or self.values["tarac.enabled"]):
            return None
        try:
            layers = TaracConfig.parse_layers(self.values["tarac.layers"])
        except ValueError as exc:
            raise ConfigError("tarac.layers", str(exc)) from None
        for key in ("tarac.alpha", "tarac.beta", "tarac.head_reducer", "tarac.renorm_mode", "tarac.update_rule"):
            try:
                TaracConfig(**{key.split(".")[1]: self.values[key], "layer_range": layers})
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        return TaracConfig(
            alpha=self.values["tarac.alpha"],
            beta=self.values["tarac.beta"],
            layer_range=layers,
            head_reducer=self.values["tarac.head_reducer"],
            renorm_mode=self.values["tarac.renorm_mode"],
            update_rule=self.values["tarac.update_rule"],
        )

    def sampler(self) -> Sampler:
        try:
            return Sampler(self.values["run.sampler"], self.values["run.temperature"], self.values["run.seed"])
        except ValueError as exc:
            raise ConfigError("run.sampler", str(exc)) from None


def load_config(path: Optional[str], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("--config", f"file not found: {path}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"cannot parse: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("--config", "expected a mapping of dotted keys")
        raw.update(loaded)
    raw.update(overrides or {})
    values = {k: d for k, (d, _) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value)
    cfg = RunConfig(values, set(raw))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["model.weights"]:
        clash = sorted(k for k in _MODEL_DIMS if k in cfg.explicit)
        if clash:
            raise ConfigError(clash[0], "cannot be combined with model.weights")
        if not Path(v["model.weights"]).is_file():
            raise ConfigError("model.weights", f"file not found: {v['model.weights']}")
    else:
        cfg.model_config()
    cfg.layout()
    cfg.tarac(force=True)
    cfg.sampler()
    if v["run.max_new_tokens"] < 0:
        raise ConfigError("run.max_new_tokens", "must be >= 0")
    if v["bench.repeats"] < 1:
        raise ConfigError("bench.repeats", "must be >= 1")
    if v["run.record_layers"] not in ("intervened", "all"):
        raise ConfigError("run.record_layers", "expected intervened or all")
