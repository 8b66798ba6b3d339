"""ANN-to-SNN conversion and the equivalence audit.

Conversion keeps every weight, turns each calibrated quantizer site into
an EI_IF population whose scaling factor is the site's absmax (so one
spike is worth one quantizer step) and attaches the approximator banks
that replace softmax, SiLU and RMSNorm.  The audit runs both modes on the
same tokens and measures, component by component, how far the spiking
version drifts from the quantized one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import approximators as apx
from .attention import outer_accumulate, snn_softmax
from .model import (
    LanguageModel,
    _heads_t,
    _strided,
    ann_forward,
    default_neurons,
    encode_site,
    linear_sites,
    quant_sites,
    rmsnorm_fwd,
    snn_forward,
    snn_linear,
    snn_norm,
)
from .tensor import Rng

REPORT_VERSION = 1


class ConversionError(ValueError):
    pass


class AuditError(ValueError):
    pass


def site_map(model: LanguageModel) -> list[tuple[str, str]]:
    """QSynapsis to Synapsis correspondence, one pair per linear map."""
    return [(f"qsynapsis:{s.name}", f"synapsis:{s.name}") for s in linear_sites(model.config)]


def convert(ann: LanguageModel, banks: dict | None = None, *, T: int | None = None,
            rng: Rng | None = None) -> LanguageModel:
    """Spiking copy of a trained quantized model.

    ``T`` overrides the step count; by default it is tied to the bit width so
    spike counts and quantizer levels coincide.  Banks are fitted with
    defaults when not supplied.
    """
    cfg = ann.config
    if cfg.mode != "ann":
        raise ConversionError("source model must be in ann mode")
    if cfg.quant_mode != "symmetric":
        raise ConversionError(
            f"cannot convert a {cfg.quant_mode!r} checkpoint: spike counts have no zero point, "
            "only symmetric quantization converts"
        )
    for site in quant_sites(cfg):
        try:
            ann.absmax(site)
        except KeyError:
            raise ConversionError(f"missing calibration scale for site {site!r}") from None
    if T is not None and T < 1:
        raise ConversionError("T must be >= 1")
    snn = ann.copy()
    snn.config.mode = "snn"
    snn.config.T = 0 if T is None or T == cfg.n_levels else int(T)
    snn.neurons = default_neurons(snn.config)
    snn.banks = dict(banks) if banks is not None else apx.fit_default_banks(rng or Rng(0))
    return snn


@dataclass
class SiteGap:
    site: str
    kind: str
    max_gap: float
    mean_gap: float
    bound: float | None = None

    @property
    def within_bound(self) -> bool:
        return self.bound is None or self.max_gap <= self.bound


@dataclass
class EquivalenceReport:
    T: int
    bits: int
    matched: bool
    n_tokens: int
    sites: list[SiteGap]
    logits_max_gap: float
    logits_mean_gap: float
    argmax_agreement: float
    spike_counts: dict[str, int]
    spikes_per_token: float
    encoder_elements_per_token: int
    attention_norm: str = "linear"
    version: int = REPORT_VERSION

    @property
    def linear_gate_passed(self) -> bool:
        return all(s.within_bound for s in self.sites if s.kind == "synapsis")

    def gaps(self, kind: str) -> dict[str, float]:
        return {s.site: s.max_gap for s in self.sites if s.kind == kind}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = [{**asdict(s), "within_bound": s.within_bound} for s in self.sites]
        d["linear_gate_passed"] = self.linear_gate_passed
        return d


_NUM = {"type": "number"}
_SITE_SCHEMA = {
    "type": "object",
    "required": ["site", "kind", "max_gap", "mean_gap", "bound", "within_bound"],
    "properties": {
        "site": {"type": "string"},
        "kind": {"enum": ["encoder", "synapsis", "head", "snn_matmul", "softmax", "silu", "rmsnorm"]},
        "max_gap": {"type": "number", "minimum": 0},
        "mean_gap": {"type": "number", "minimum": 0},
        "bound": {"type": ["number", "null"], "minimum": 0},
        "within_bound": {"type": "boolean"},
    },
    "additionalProperties": False,
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EquivalenceReport",
    "type": "object",
    "required": [
        "version", "T", "bits", "matched", "n_tokens", "sites", "logits_max_gap", "logits_mean_gap",
        "argmax_agreement", "spike_counts", "spikes_per_token", "encoder_elements_per_token",
        "attention_norm", "linear_gate_passed",
    ],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "T": {"type": "integer", "minimum": 1},
        "bits": {"type": "integer", "minimum": 2},
        "matched": {"type": "boolean"},
        "n_tokens": {"type": "integer", "minimum": 1},
        "sites": {"type": "array", "items": _SITE_SCHEMA},
        "logits_max_gap": {"type": "number", "minimum": 0},
        "logits_mean_gap": {"type": "number", "minimum": 0},
        "argmax_agreement": {"type": "number", "minimum": 0, "maximum": 1},
        "spike_counts": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
        "spikes_per_token": {"type": "number", "minimum": 0},
        "encoder_elements_per_token": {"type": "integer", "minimum": 0},
        "attention_norm": {"enum": ["softmax", "linear"]},
        "linear_gate_passed": {"type": "boolean"},
    },
    "additionalProperties": False,
}


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def _gap(a, b, kind, site, bound=None) -> SiteGap:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return SiteGap(site, kind, float(d.max()), float(d.mean()), bound)


def _check_pair(ann: LanguageModel, snn: LanguageModel) -> None:
    a, s = ann.config.to_dict(), snn.config.to_dict()
    if a["mode"] != "ann" or s["mode"] != "snn":
        raise AuditError("audit needs an ann-mode and an snn-mode model")
    for key in a:
        if key not in ("mode", "T") and a[key] != s[key]:
            raise AuditError(f"configs differ in {key!r}: {a[key]!r} vs {s[key]!r}")


def audit_equivalence(ann: LanguageModel, snn: LanguageModel, eval_tokens) -> EquivalenceReport:
    """Compare the two modes on ``eval_tokens`` (one sequence or a batch).

    Each component gets the ANN's own input at that point, so a gap is the
    component's local error and does not include drift from earlier layers.
    Synapsis sites are bounded by one quantizer step of their output site.
    The end-to-end numbers (logit gaps, argmax agreement, spike counts) come
    from an independent full SNN pass.
    """
    _check_pair(ann, snn)
    cfg = snn.config
    tok = np.asarray(eval_tokens)
    tok = tok[None, :] if tok.ndim == 1 else tok
    taps: dict = {}
    ann_logits = ann_forward(ann, tok, taps=taps)
    gaps: list[SiteGap] = []

    for site in quant_sites(cfg):
        train, unit = encode_site(snn, site, taps[f"{site}:input"])
        gaps.append(_gap(train.accumulated * unit, taps[site], "encoder", site, ann.scale(site)))

    for ls in linear_sites(cfg):
        train, unit = encode_site(snn, ls.in_site, taps[f"{ls.in_site}:input"])
        y = snn_linear(snn, ls, train, unit)
        if ls.out_site is None:
            gaps.append(_gap(y, ann_logits, "head", ls.name))
        else:
            out, u_out = encode_site(snn, ls.out_site, y)
            gaps.append(_gap(out.accumulated * u_out, taps[ls.out_site], "synapsis", ls.name, ann.scale(ls.out_site)))

    H, T = cfg.n_heads, cfg.steps
    L = tok.shape[1]
    mask = np.tril(np.ones((L, L), dtype=bool))
    for i in range(cfg.n_layers):
        p = f"L{i}"
        tq, uq = encode_site(snn, f"{p}.q", taps[f"{p}.q:input"])
        tk, uk = encode_site(snn, f"{p}.k", taps[f"{p}.k:input"])
        A = outer_accumulate(_strided(_heads_t(tq.spikes, H), T), _strided(_heads_t(tk.spikes, H), T))
        S = A * (uq * uk / math.sqrt(cfg.head_dim))
        gaps.append(_gap(np.where(mask, S, 0), np.where(mask, taps[f"{p}.scores"], 0), "snn_matmul", f"{p}.scores"))
        gaps.append(_gap(snn_softmax(A, mask), taps[f"{p}.probs:input"], "softmax", f"{p}.probs"))
        gate = taps[f"{p}.gate"]
        gaps.append(_gap(apx.silu_approx(snn.banks["silu_pos"], snn.banks["silu_neg"], gate),
                         taps[f"{p}.silu"], "silu", f"{p}.silu"))
    for norm in [f"L{i}.{n}" for i in range(cfg.n_layers) for n in ("attn_norm", "mlp_norm")] + ["final_norm"]:
        x = taps[f"{norm}:input"]
        exact, _ = rmsnorm_fwd(x, ann.params[norm].astype(np.float64), cfg.rmsnorm_eps)
        gaps.append(_gap(snn_norm(snn, norm, x), exact, "rmsnorm", norm))

    run = snn_forward(snn, tok, record=True)
    diff = np.abs(run.logits - ann_logits)
    agree = float(np.mean(np.argmax(run.logits, -1) == np.argmax(ann_logits, -1)))
    counts = {site: int(np.abs(tr.counts).sum()) for site, tr in run.traces.items()}
    n_tokens = int(tok.size)
    elements = sum(int(np.prod(tr.counts.shape)) for tr in run.traces.values()) // n_tokens
    return EquivalenceReport(
        T=T, bits=cfg.bits, matched=cfg.equivalent, n_tokens=n_tokens, sites=gaps,
        logits_max_gap=float(diff.max()), logits_mean_gap=float(diff.mean()), argmax_agreement=agree,
        spike_counts=counts, spikes_per_token=run.spike_total / n_tokens,
        encoder_elements_per_token=elements, attention_norm=cfg.attention_norm,
    )


def agreement(ann: LanguageModel, snn: LanguageModel, tokens) -> float:
    """Fraction of positions where both modes pick the same next token."""
    tok = np.asarray(tokens)
    a = ann_forward(ann, tok)
    s = snn_forward(snn, tok).logits
    return float(np.mean(np.argmax(a, -1) == np.argmax(s, -1)))
