"""Flat ``section.key`` configuration with a typed key registry.

Every tunable of the pipeline is registered here with its default and a
one-line description.  Config files are JSON objects using the same flat
keys; unknown keys and values of the wrong type are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from . import approximators as apx
from .model import ModelConfig
from .plasticity import PlasticityConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    help: str

    @property
    def kind(self) -> type:
        return type(self.default)


def _keys() -> list[Key]:
    m = ModelConfig()
    p = PlasticityConfig()
    a = apx.DEFAULTS
    keys = [
        Key("seed", 0, "root seed; every module derives its own stream from it"),
        Key("data.corpus", "", "path of a UTF-8 text corpus; empty uses the built-in synthetic text"),
        Key("data.synthetic_bytes", 100_000, "size of the synthetic corpus"),
        Key("data.eval_fraction", 0.1, "tail fraction of the corpus held out for evaluation"),
        Key("model.d_model", m.d_model, "embedding width"),
        Key("model.n_heads", m.n_heads, "attention heads"),
        Key("model.n_layers", m.n_layers, "transformer blocks"),
        Key("model.d_ff", m.d_ff, "hidden width of the gated MLP"),
        Key("model.max_seq_len", m.max_seq_len, "context length (also the training window)"),
        Key("model.bits", m.bits, "quantizer bit width b; levels are -(2^(b-1)-1)..2^(b-1)-1"),
        Key("model.rmsnorm_eps", m.rmsnorm_eps, "RMSNorm epsilon"),
        Key("model.attention_norm", m.attention_norm, "'linear' (shift-and-divide, matches the spiking form) or 'softmax'"),
        Key("model.quant_mode", m.quant_mode, "'symmetric' or 'asymmetric' (asymmetric cannot be converted)"),
        Key("train.epochs", 3, "passes over the training windows"),
        Key("train.lr", 0.05, "learning rate"),
        Key("train.batch_size", 16, "windows per step"),
        Key("train.optimizer", "sgd", "'sgd' (momentum) or 'adam'"),
        Key("train.momentum", 0.9, "SGD momentum"),
        Key("train.grad_clip", 1.0, "global gradient-norm clip; 0 disables"),
        Key("train.ema", 0.9, "EMA factor of the running quantizer ranges"),
        Key("train.eval_windows", 16, "held-out windows used for evaluation and calibration"),
        Key("train.max_steps", 0, "stop after this many optimizer steps in this run; 0 means no limit"),
        Key("train.resume", "", "checkpoint to resume training from (weights and optimizer state)"),
        Key("approx.steps", a["steps"], "time steps of each approximation neuron"),
        Key("approx.sample_count", a["sample_count"], "fit samples per segment"),
        Key("approx.square_interval", list(a["square_interval"]), "domain of the square bank"),
        Key("approx.square_segments", a["square_segments"], "segments of the square bank"),
        Key("approx.square_power", a["square_power"], "power-law spacing exponent of the square segments"),
        Key("approx.sqrt_interval", list(a["sqrt_interval"]), "domain of the sqrt bank (log spaced)"),
        Key("approx.sqrt_segments", a["sqrt_segments"], "segments of the sqrt bank"),
        Key("approx.silu_pos_edges", list(a["silu_pos_edges"]), "segment edges of the SiLU bank for x >= 0"),
        Key("approx.silu_neg_edges", list(a["silu_neg_edges"]), "segment edges of the SiLU bank for x < 0"),
        Key("approx.square_mse_ceiling", a["square_mse_ceiling"], "gate on the square bank MSE"),
        Key("approx.silu_mse_ceiling", a["silu_mse_ceiling"], "gate on the SiLU MSE over [-6, 4]"),
        Key("approx.sqrt_rel_ceiling", a["sqrt_rel_ceiling"], "gate on the sqrt relative error above 10 x_start"),
        Key("convert.checkpoint", "", "ANN checkpoint to convert"),
        Key("convert.banks", "", "approximator bank file; empty fits fresh banks"),
        Key("convert.T", 0, "time steps of the spiking model; 0 ties T to the bit width"),
        Key("audit.ann", "", "ANN checkpoint"),
        Key("audit.snn", "", "converted checkpoint"),
        Key("audit.tokens", 1024, "length of the evaluation stream (taken from the held-out text)"),
        Key("audit.seq_len", 64, "window length the stream is cut into"),
        Key("stdp.checkpoint", "", "converted checkpoint to fine-tune"),
        Key("stdp.steps", 200, "plasticity steps"),
        Key("stdp.batch_size", 2, "windows per plasticity step"),
        Key("generate.checkpoint", "", "checkpoint to decode from"),
        Key("generate.prompt", "", "prompt text"),
        Key("generate.n_new", 64, "tokens to generate"),
        Key("generate.temperature", 0.0, "sampling temperature; 0 is greedy"),
        Key("generate.mode", "", "'ann', 'snn', or empty for the checkpoint's own mode"),
    ]
    for f in fields(PlasticityConfig):
        if f.name == "loss_weights":
            for g in fields(p.loss_weights):
                keys.append(Key(f"stdp.{g.name}", getattr(p.loss_weights, g.name), "composite-loss weight"))
            continue
        keys.append(Key(f"stdp.{f.name}", getattr(p, f.name), _STDP_HELP[f.name]))
    return keys


_STDP_HELP = {
    "a_plus": "STDP amplitude for post-after-pre pairs",
    "a_minus": "STDP amplitude for pre-after-post pairs",
    "tau_plus": "STDP time constant (steps) for post-after-pre pairs",
    "tau_minus": "STDP time constant (steps) for pre-after-post pairs",
    "beta_mod": "slope of the global modulation sigmoid",
    "window": "task losses averaged into the modulation baseline",
    "s_target_frac": "spike-count target as a fraction of T",
    "v_target": "target mean membrane potential (threshold growth)",
    "v_rest": "resting membrane potential (decay rate)",
    "eta_w": "synaptic learning rate",
    "eta_theta": "homeostatic rate of the base threshold",
    "eta_theta_task": "task-gradient rate of the base threshold",
    "eta_alpha": "homeostatic rate of the threshold growth",
    "eta_alpha_task": "task-gradient rate of the threshold growth",
    "eta_r": "homeostatic rate of the decay rate",
    "eta_r_task": "task-gradient rate of the decay rate",
    "ema": "EMA factor of the spike-count, membrane and activity averages",
    "tag_threshold": "synapses update only where the tag reaches this value",
    "t_target_frac": "expected first-spike target as a fraction of T",
    "lambda_scale": "surrogate sigmoid width in input units; 0 means one count level (1/T)",
    "task_gradient": "'descent', 'as_written' or 'off' for the task-gradient terms of the neuron updates",
    "homeostatic_sign_flip": "negate the threshold's (S_target - S_bar) term",
    "loss_ema": "EMA factor of the reported task loss",
}

KEYS: dict[str, Key] = {k.name: k for k in _keys()}


def defaults() -> dict:
    return {k: (list(v.default) if isinstance(v.default, list) else v.default) for k, v in KEYS.items()}


def _coerce(key: Key, value):
    kind = key.kind
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return [float(v) for v in value]
    raise ConfigError(f"{key.name}: expected {kind.__name__}, got {value!r}")


def resolve(overrides: dict | None = None) -> dict:
    """Defaults updated with ``overrides``; rejects unknown keys and bad types."""
    cfg = defaults()
    for name, value in (overrides or {}).items():
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        cfg[name] = _coerce(KEYS[name], value)
    return cfg


def load(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def parse_assignment(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    return name.strip(), value


def require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if cfg.get(n) in ("", None)]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")


def section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**section(cfg, "model"))


def plasticity_config(cfg: dict) -> PlasticityConfig:
    from .plasticity import CompositeLossWeights

    s = section(cfg, "stdp")
    lw = {f.name: s.pop(f.name) for f in fields(CompositeLossWeights)}
    for k in ("checkpoint", "steps", "batch_size"):
        s.pop(k)
    return PlasticityConfig(**s, loss_weights=CompositeLossWeights(**lw))


def approx_settings(cfg: dict) -> dict:
    out = {}
    for k, v in section(cfg, "approx").items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def help_text() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["configuration keys (JSON file via --config, or --set KEY=VALUE):"]
    for k in KEYS.values():
        lines.append(f"  {k.name:<{width}}  {k.help} [default: {json.dumps(k.default)}]")
    return "\n".join(lines)
