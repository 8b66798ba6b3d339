"""Byte-level transformer that runs either as a quantized ANN or as a spiking network.

Layout per block: RMSNorm, multi-head causal attention, RMSNorm, gated MLP
with SiLU, each sub-block added back onto the residual stream.  Every
activation that enters or leaves a linear map or an attention product goes
through a named quantizer *site*.  In ANN mode a site is a narrow symmetric
quantizer with a calibrated scale; in SNN mode the same site is a population
of EI_IF neurons whose spike counts equal the quantizer levels.

All arithmetic runs in float64.  A linear map is always evaluated as
``(levels @ W.T) * s + b`` so the SNN path, which accumulates weight
columns spike by spike, reproduces the ANN result bit for bit.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import approximators as apx
from .attention import outer_accumulate, retime, snn_softmax
from .neuron import SpikeTrain, run_ei_if
from .quantization import QuantSpec, round_half_away
from .synapsis import spike_accumulate
from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

BOS = 256
BYTE_VOCAB = 257
ATTENTION_NORMS = ("softmax", "linear")


class InputError(ValueError):
    """Token ids or sequence length outside what the model accepts."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: "LanguageModel | None" = None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class ModelConfig:
    vocab_size: int = BYTE_VOCAB
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 64
    bits: int = 8
    T: int = 0  # 0 means "tie to bits": T = 2**(bits-1) - 1
    mode: str = "ann"
    rmsnorm_eps: float = 1e-5
    attention_norm: str = "linear"
    quant_mode: str = "symmetric"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in ("ann", "snn"):
            raise ValueError(f"mode must be 'ann' or 'snn', got {self.mode!r}")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ValueError(f"attention_norm must be one of {ATTENTION_NORMS}")
        if self.T < 0:
            raise ValueError("T must be >= 1 (or 0 to tie it to bits)")
        if not self.rmsnorm_eps > 0:
            raise ValueError("rmsnorm_eps must be positive")
        QuantSpec(self.bits, self.quant_mode)

    @property
    def n_levels(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def steps(self) -> int:
        return self.T or self.n_levels

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def equivalent(self) -> bool:
        """True when spike counts and quantizer levels share one grid."""
        return self.steps == self.n_levels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LinearSite:
    """A linear map between two quantizer sites (``out_site`` None for the head)."""

    name: str
    weight: str
    bias: str | None
    in_site: str
    out_site: str | None


def linear_sites(cfg: ModelConfig) -> list[LinearSite]:
    out = []
    for i in range(cfg.n_layers):
        p = f"L{i}"
        out += [
            LinearSite(f"{p}.q", f"{p}.wq", f"{p}.bq", f"{p}.attn.in", f"{p}.q"),
            LinearSite(f"{p}.k", f"{p}.wk", f"{p}.bk", f"{p}.attn.in", f"{p}.k"),
            LinearSite(f"{p}.v", f"{p}.wv", f"{p}.bv", f"{p}.attn.in", f"{p}.v"),
            LinearSite(f"{p}.o", f"{p}.wo", f"{p}.bo", f"{p}.ctx", f"{p}.o"),
            LinearSite(f"{p}.gate", f"{p}.wg", f"{p}.bg", f"{p}.mlp.in", f"{p}.gate"),
            LinearSite(f"{p}.up", f"{p}.wu", f"{p}.bu", f"{p}.mlp.in", f"{p}.up"),
            LinearSite(f"{p}.down", f"{p}.wd", f"{p}.bd", f"{p}.act", f"{p}.down"),
        ]
    out.append(LinearSite("head", "head", None, "head.in", None))
    return out


def quant_sites(cfg: ModelConfig) -> list[str]:
    """Every activation site that becomes an EI_IF population after conversion."""
    names = []
    for i in range(cfg.n_layers):
        p = f"L{i}"
        names += [f"{p}.attn.in", f"{p}.q", f"{p}.k", f"{p}.v", f"{p}.probs", f"{p}.ctx", f"{p}.o",
                  f"{p}.mlp.in", f"{p}.gate", f"{p}.up", f"{p}.act", f"{p}.down"]
    names.append("head.in")
    return names


def norm_sites(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names += [f"L{i}.attn_norm", f"L{i}.mlp_norm"]
    return names + ["final_norm"]


def site_width(cfg: ModelConfig, site: str) -> int:
    """Channel count of a site (per-channel neuron parameters use this)."""
    tail = site.split(".", 1)[1] if site.startswith("L") else site
    if tail in ("gate", "up", "act"):
        return cfg.d_ff
    if tail == "probs":
        return cfg.max_seq_len
    return cfg.d_model


FIXED_ABSMAX = {"probs": 1.0}


def _fixed_absmax(site: str) -> float | None:
    return FIXED_ABSMAX.get(site.rsplit(".", 1)[-1])


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, D), "pos_emb": (cfg.max_seq_len, D)}
    for i in range(cfg.n_layers):
        p = f"L{i}"
        shapes.update({
            f"{p}.attn_norm": (D,),
            f"{p}.wq": (D, D), f"{p}.bq": (D,),
            f"{p}.wk": (D, D), f"{p}.bk": (D,),
            f"{p}.wv": (D, D), f"{p}.bv": (D,),
            f"{p}.wo": (D, D), f"{p}.bo": (D,),
            f"{p}.mlp_norm": (D,),
            f"{p}.wg": (F, D), f"{p}.bg": (F,),
            f"{p}.wu": (F, D), f"{p}.bu": (F,),
            f"{p}.wd": (D, F), f"{p}.bd": (D,),
        })
    shapes["final_norm"] = (D,)
    shapes["head"] = (cfg.vocab_size, D)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            params[name] = np.ones(shape, DTYPE)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape, DTYPE)
        elif name in ("tok_emb", "pos_emb"):
            params[name] = rng.child(name).normal(shape, 1.0)
        else:
            # fan-in scaling keeps activations O(1) through the quantizers
            std = 1.0 / math.sqrt(shape[1])
            if leaf in ("wo", "wd"):
                std /= math.sqrt(2 * cfg.n_layers)
            params[name] = rng.child(name).normal(shape, std)
    return params


@dataclass
class LanguageModel:
    """Weights plus everything conversion attaches.

    ``calibration`` maps a site (or norm) name to the absolute maximum seen
    during calibration, stored as float32.  ``banks`` and ``neurons`` are
    filled by conversion; ``neurons`` holds per-channel EI_IF parameters
    ``(T * theta_base, T * alpha, attenuation)`` for every spiking site.
    Storing thresholds in units of ``1/T`` keeps the rate schedule
    ``(-1/2, 1)`` exact in float32.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    calibration: dict[str, float] = field(default_factory=dict)
    banks: dict[str, apx.ApproximatorBank] = field(default_factory=dict)
    neurons: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng) -> "LanguageModel":
        return cls(cfg, init_params(cfg, rng))

    def copy(self) -> "LanguageModel":
        return copy.deepcopy(self)

    def scale(self, site: str) -> float:
        """Quantizer step of a site: ``absmax / (2**(b-1) - 1)``."""
        return float(np.float32(self.absmax(site))) / self.config.n_levels

    def absmax(self, site: str) -> float:
        fixed = _fixed_absmax(site)
        if fixed is not None:
            return fixed
        try:
            m = self.calibration[site]
        except KeyError:
            raise KeyError(f"no calibration scale recorded for site {site!r}") from None
        return float(np.float32(m)) if m > 0 else 1.0

    def norm_input_scale(self, norm: str) -> float:
        """Power of two bringing the norm's calibrated input range into the square bank's domain."""
        m = self.calibration.get(f"{norm}.x", 0.0)
        if not m > 0:
            return 1.0
        top = self.banks["square"].hi if "square" in self.banks else 4.0
        return float(2.0 ** math.ceil(math.log2(m / top)))


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] < 1:
        raise InputError(f"tokens must be a non-empty sequence or batch of sequences, got shape {tok.shape}")
    if not np.issubdtype(tok.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tok.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {tok.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    return tok.astype(np.int64)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def rmsnorm_fwd(x, g, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * g, r


def rmsnorm_bwd(dy, x, r, g):
    dg = (dy * x * r).reshape(-1, x.shape[-1]).sum(0)
    dyg = dy * g
    dx = r * dyg - x * r**3 * np.mean(dyg * x, axis=-1, keepdims=True)
    return dx, dg


def softmax_fwd(S, mask):
    S = np.where(mask, S, -np.inf)
    S = S - S.max(-1, keepdims=True)
    e = np.exp(S)
    return e / e.sum(-1, keepdims=True)


def softmax_bwd(dP, P):
    return P * (dP - (dP * P).sum(-1, keepdims=True))


def linnorm_fwd(S, mask):
    """Shift by the unmasked row minimum, divide by the row sum (uniform if the sum is 0)."""
    return snn_softmax(S, mask)


def linnorm_bwd(dP, S, P, mask):
    Sm = np.where(mask, S, np.inf)
    amin = np.argmin(Sm, axis=-1)
    m = np.take_along_axis(Sm, amin[..., None], -1)
    Z = np.where(mask, S - m, 0.0).sum(-1, keepdims=True)
    safe = np.where(Z > 0, Z, 1.0)
    du = np.where(mask & (Z > 0), (dP - (dP * P).sum(-1, keepdims=True)) / safe, 0.0)
    dS = du.copy()
    np.put_along_axis(dS, amin[..., None], np.take_along_axis(dS, amin[..., None], -1) - du.sum(-1, keepdims=True), -1)
    return dS


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def split_heads(x, H):
    B, L, D = x.shape
    return x.reshape(B, L, H, D // H).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, H, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * d)


def task_loss(logits, targets) -> float:
    """Mean negative log-likelihood of ``targets`` under ``logits`` (log-sum-exp form)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if z.shape[:-1] != t.shape:
        raise ValueError(f"logits {z.shape} and targets {t.shape} disagree")
    m = z.max(-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(z, t[..., None], -1)[..., 0]
    return float(np.mean(lse - picked))


def _loss_and_grad(logits, targets):
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(-1, keepdims=True)
    n = targets.size
    loss = float(np.mean(np.log(e.sum(-1)) - np.take_along_axis(z, targets[..., None], -1)[..., 0]))
    d = p
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
    return loss, d / n


# ---------------------------------------------------------------------------
# ANN mode
# ---------------------------------------------------------------------------


class _Quant:
    """Quantizer-site behaviour for one ANN pass.

    ``ema`` (training) updates the site's running absmax before quantizing;
    ``enabled=False`` turns every site into the identity (gradient checks).
    """

    def __init__(self, model: LanguageModel, *, ema: float | None = None, collect: bool = False,
                 enabled: bool = True, taps: dict | None = None):
        self.model = model
        self.n = model.config.n_levels
        self.ema = ema
        self.collect = collect
        self.enabled = enabled
        self.taps = taps

    def __call__(self, site: str, x: np.ndarray):
        """Returns ``(levels, scale, ste_mask)``; ``levels * scale`` is the quantized value."""
        if self.taps is not None:
            self.taps[f"{site}:input"] = x
        if not self.enabled:
            return x, 1.0, None
        self._observe(site, x)
        if site in self.model.calibration or _fixed_absmax(site) is not None:
            s = self.model.scale(site)
        else:
            # uncalibrated: derive the scale from this tensor, like a plain quantizer
            m = float(np.float32(np.max(np.abs(x))))
            s = (m if m > 0 else 1.0) / self.n
        r = x / s
        levels = np.clip(round_half_away(r), -self.n, self.n)
        if self.taps is not None:
            self.taps[site] = levels * s
        return levels, s, np.abs(r) <= self.n

    def _observe(self, key: str, x: np.ndarray):
        if _fixed_absmax(key) is not None or (self.ema is None and not self.collect):
            return
        cal = self.model.calibration
        batch = float(np.max(np.abs(x)))
        prev = cal.get(key)
        if prev is None:
            new = batch
        elif self.collect:
            new = max(prev, batch)
        else:
            new = self.ema * prev + (1 - self.ema) * batch
        cal[key] = float(np.float32(new))

    def norm_input(self, norm: str, x: np.ndarray):
        if self.taps is not None:
            self.taps[f"{norm}:input"] = x
        self._observe(f"{norm}.x", x)


def _lin(levels, s, W, b):
    y = (levels @ W.T) * s
    return y if b is None else y + b


def ann_forward(model: LanguageModel, tokens, *, quantize: bool = True, ema: float | None = None,
                collect: bool = False, taps: dict | None = None, keep_cache: bool = False):
    """Quantized-ANN logits ``(B, L, V)``; with ``keep_cache`` also the backward cache."""
    cfg = model.config
    tok = check_tokens(cfg, tokens)
    B, L = tok.shape
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    q = _Quant(model, ema=ema, collect=collect, enabled=quantize, taps=taps)
    mask = causal_mask(L)
    H = cfg.n_heads
    cache: dict = {"tok": tok, "layers": []}
    x = P["tok_emb"][tok] + P["pos_emb"][:L]
    for i in range(cfg.n_layers):
        p = f"L{i}"
        c: dict = {}
        c["x0"] = x
        q.norm_input(f"{p}.attn_norm", x)
        a, c["r1"] = rmsnorm_fwd(x, P[f"{p}.attn_norm"], cfg.rmsnorm_eps)
        la, sa, c["m_a"] = q(f"{p}.attn.in", a)
        c["va"] = la * sa
        proj = {}
        for nm, w, b in (("q", "wq", "bq"), ("k", "wk", "bk"), ("v", "wv", "bv")):
            y = _lin(la, sa, P[f"{p}.{w}"], P[f"{p}.{b}"])
            lv, sv, c[f"m_{nm}"] = q(f"{p}.{nm}", y)
            proj[nm] = (split_heads(lv, H), sv)
        (lq, sq), (lk, sk), (lv, sv) = proj["q"], proj["k"], proj["v"]
        c["vq"], c["vk"], c["vv"] = lq * sq, lk * sk, lv * sv
        A = lq @ lk.swapaxes(-1, -2)
        c["factor"] = sq * sk / math.sqrt(cfg.head_dim)
        S = A * c["factor"]
        if taps is not None:
            taps[f"{p}.scores"] = S
        if cfg.attention_norm == "softmax":
            Pr = softmax_fwd(S, mask)
        else:
            # scale-free, so normalise the integer product exactly as the spiking path does
            Pr = linnorm_fwd(A, mask)
        c["A"], c["P"] = A, Pr
        lp, sp, _ = q(f"{p}.probs", Pr)
        c["vp"] = lp * sp
        ctx = merge_heads((lp @ lv) * (sp * sv))
        lc, sc, c["m_ctx"] = q(f"{p}.ctx", ctx)
        c["vc"] = lc * sc
        o = _lin(lc, sc, P[f"{p}.wo"], P[f"{p}.bo"])
        lo, so, c["m_o"] = q(f"{p}.o", o)
        x = x + lo * so

        c["x1"] = x
        q.norm_input(f"{p}.mlp_norm", x)
        m, c["r2"] = rmsnorm_fwd(x, P[f"{p}.mlp_norm"], cfg.rmsnorm_eps)
        lm, sm, c["m_m"] = q(f"{p}.mlp.in", m)
        c["vm"] = lm * sm
        g = _lin(lm, sm, P[f"{p}.wg"], P[f"{p}.bg"])
        lg, sg, c["m_g"] = q(f"{p}.gate", g)
        u = _lin(lm, sm, P[f"{p}.wu"], P[f"{p}.bu"])
        lu, su, c["m_u"] = q(f"{p}.up", u)
        c["vg"], c["vu"] = lg * sg, lu * su
        act = apx.silu(c["vg"]) * c["vu"]
        if taps is not None:
            taps[f"{p}.silu"] = apx.silu(c["vg"])
        lact, sact, c["m_act"] = q(f"{p}.act", act)
        c["vact"] = lact * sact
        d = _lin(lact, sact, P[f"{p}.wd"], P[f"{p}.bd"])
        ld, sd, c["m_d"] = q(f"{p}.down", d)
        x = x + ld * sd
        cache["layers"].append(c)
    cache["xf"] = x
    q.norm_input("final_norm", x)
    f, cache["rf"] = rmsnorm_fwd(x, P["final_norm"], cfg.rmsnorm_eps)
    lf, sf, cache["m_f"] = q("head.in", f)
    cache["vf"] = lf * sf
    logits = _lin(lf, sf, P["head"], None)
    if keep_cache:
        return logits, cache
    return logits


def _ste(g, m):
    return g if m is None else np.where(m, g, 0.0)


def ann_backward(model: LanguageModel, cache: dict, dlogits: np.ndarray,
                 site_grads: dict | None = None) -> dict[str, np.ndarray]:
    """Gradients of every parameter; quantizers pass gradients straight through
    inside their clip range and block them outside.

    ``site_grads``, when given, receives the loss gradient with respect to
    each site's quantized value.
    """
    cfg = model.config
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    H = cfg.n_heads
    grads = {k: np.zeros(v.shape) for k, v in P.items()}
    L = cache["tok"].shape[1]
    mask = causal_mask(L)

    def lin_back(dy, v_in, w, b):
        flat_dy = dy.reshape(-1, dy.shape[-1])
        grads[w] += flat_dy.T @ v_in.reshape(-1, v_in.shape[-1])
        if b is not None:
            grads[b] += flat_dy.sum(0)
        return dy @ P[w]

    def cap(site, g):
        if site_grads is not None:
            site_grads[site] = g
        return g

    df = _ste(cap("head.in", lin_back(dlogits, cache["vf"], "head", None)), cache["m_f"])
    dx, grads["final_norm"] = rmsnorm_bwd(df, cache["xf"], cache["rf"], P["final_norm"])
    for i in reversed(range(cfg.n_layers)):
        p = f"L{i}"
        c = cache["layers"][i]
        # MLP
        dd = _ste(cap(f"{p}.down", dx), c["m_d"])
        dact = _ste(cap(f"{p}.act", lin_back(dd, c["vact"], f"{p}.wd", f"{p}.bd")), c["m_act"])
        dg = _ste(cap(f"{p}.gate", dact * c["vu"] * silu_grad(c["vg"])), c["m_g"])
        du = _ste(cap(f"{p}.up", dact * apx.silu(c["vg"])), c["m_u"])
        dm = lin_back(dg, c["vm"], f"{p}.wg", f"{p}.bg") + lin_back(du, c["vm"], f"{p}.wu", f"{p}.bu")
        dm = _ste(cap(f"{p}.mlp.in", dm), c["m_m"])
        dn, gn = rmsnorm_bwd(dm, c["x1"], c["r2"], P[f"{p}.mlp_norm"])
        grads[f"{p}.mlp_norm"] += gn
        dx = dx + dn
        # attention
        do = _ste(cap(f"{p}.o", dx), c["m_o"])
        dctx = _ste(cap(f"{p}.ctx", lin_back(do, c["vc"], f"{p}.wo", f"{p}.bo")), c["m_ctx"])
        dctx = split_heads(dctx, H)
        dPq = cap(f"{p}.probs", dctx @ c["vv"].swapaxes(-1, -2))
        dv = c["vp"].swapaxes(-1, -2) @ dctx
        if cfg.attention_norm == "softmax":
            dS = softmax_bwd(dPq, c["P"])
        else:
            dS = linnorm_bwd(dPq, c["A"], c["P"], mask) / c["factor"]
        dS = np.where(mask, dS, 0.0) / math.sqrt(cfg.head_dim)
        dq = dS @ c["vk"]
        dk = dS.swapaxes(-1, -2) @ c["vq"]
        da = np.zeros_like(c["va"])
        for nm, w, b, dh in (("q", "wq", "bq", dq), ("k", "wk", "bk", dk), ("v", "wv", "bv", dv)):
            dy = _ste(cap(f"{p}.{nm}", merge_heads(dh)), c[f"m_{nm}"])
            da += lin_back(dy, c["va"], f"{p}.{w}", f"{p}.{b}")
        da = _ste(cap(f"{p}.attn.in", da), c["m_a"])
        dn, gn = rmsnorm_bwd(da, c["x0"], c["r1"], P[f"{p}.attn_norm"])
        grads[f"{p}.attn_norm"] += gn
        dx = dx + dn
    tok = cache["tok"]
    np.add.at(grads["tok_emb"], tok.ravel(), dx.reshape(-1, dx.shape[-1]))
    grads["pos_emb"][:L] += dx.sum(0)
    return grads


# ---------------------------------------------------------------------------
# SNN mode
# ---------------------------------------------------------------------------


@dataclass
class SiteTrace:
    """What an EI_IF population did during one SNN forward (``mean_v`` in count units)."""

    counts: np.ndarray
    first_spike: np.ndarray
    mean_v: np.ndarray
    T: int
    x_scaled: np.ndarray | None = None


@dataclass
class SnnRun:
    logits: np.ndarray
    spike_total: int
    traces: dict[str, SiteTrace] = field(default_factory=dict)
    site_values: dict[str, np.ndarray] = field(default_factory=dict)


def default_neurons(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Rate-code parameters for every site, one ``(T theta_base, T alpha, attenuation)`` row per channel."""
    # T theta_base = -1/2 and T alpha = 1 for every T
    row = np.array([-0.5, 1.0, 1.0], DTYPE)
    return {s: np.tile(row, (site_width(cfg, s), 1)) for s in quant_sites(cfg)}


class _Spiking:
    """Per-pass helper that encodes sites into spike trains."""

    def __init__(self, model: LanguageModel, record: bool, taps: dict | None = None):
        self.model = model
        self.T = model.config.steps
        self.record = record
        self.traces: dict[str, SiteTrace] = {}
        self.values: dict[str, np.ndarray] = {}
        self.taps = taps
        self.spike_total = 0

    def encode(self, site: str, x: np.ndarray) -> tuple[SpikeTrain, float]:
        """Encode ``x`` at ``site``; returns the spike train and the value of one count."""
        if self.taps is not None:
            self.taps[f"{site}:input"] = x
        train, unit = encode_site(self.model, site, x, record=self.record, traces=self.traces)
        self.spike_total += int(np.abs(train.accumulated).sum())
        self.values[site] = train.accumulated * unit
        if self.taps is not None:
            self.taps[site] = self.values[site]
        return train, unit


def encode_site(model: LanguageModel, site: str, x: np.ndarray, *, record: bool = False,
                traces: dict | None = None) -> tuple[SpikeTrain, float]:
    """Run the site's EI_IF population on ``x / absmax``; inputs past the range saturate."""
    cfg = model.config
    T = cfg.steps
    neurons = model.neurons.get(site)
    if neurons is None:
        th, al, at = -0.5, 1.0, 1.0
    else:
        n = x.shape[-1]
        th, al, at = (neurons[:n, j].astype(np.float64) for j in range(3))
    absmax = model.absmax(site)
    # the population runs in count units: current T x / absmax against T theta(t)
    trace = run_ei_if(x / absmax * T, T, th, al, at, record_v=False)
    if traces is not None and record:
        traces[site] = SiteTrace(trace.train.accumulated, trace.train.first_spike_times(), trace.mean_v, T, x / absmax)
    return trace.train, float(np.float32(absmax)) / T


def snn_linear(model: LanguageModel, site: LinearSite, train: SpikeTrain, unit: float) -> np.ndarray:
    """Synapsis: per-step signed accumulation of weight columns, then ``H * unit + b``."""
    W = model.params[site.weight]
    H = spike_accumulate(W, train.spikes)
    y = H * unit
    if site.bias is not None:
        y = y + model.params[site.bias].astype(np.float64)
    return y


def snn_norm(model: LanguageModel, norm: str, x: np.ndarray) -> np.ndarray:
    b = model.banks
    return apx.snn_rmsnorm(x, model.params[norm].astype(np.float64), model.config.rmsnorm_eps,
                           b["square"], b["sqrt"], input_scale=model.norm_input_scale(norm))


def snn_forward(model: LanguageModel, tokens, *, record: bool = False, taps: dict | None = None) -> SnnRun:
    """Spiking forward pass.  Needs banks (attached by conversion)."""
    cfg = model.config
    missing = {"square", "sqrt", "silu_pos", "silu_neg"} - set(model.banks)
    if missing:
        raise KeyError(f"SNN mode needs approximator banks; missing {sorted(missing)}")
    tok = check_tokens(cfg, tokens)
    B, L = tok.shape
    H, T = cfg.n_heads, cfg.steps
    mask = causal_mask(L)
    sites = {s.name: s for s in linear_sites(cfg)}
    sp = _Spiking(model, record, taps)
    P = model.params
    x = P["tok_emb"].astype(np.float64)[tok] + P["pos_emb"].astype(np.float64)[:L]
    for i in range(cfg.n_layers):
        p = f"L{i}"
        if taps is not None:
            taps[f"{p}.attn_norm:input"] = x
        a = snn_norm(model, f"{p}.attn_norm", x)
        ta, ua = sp.encode(f"{p}.attn.in", a)
        enc = {}
        for nm in ("q", "k", "v"):
            y = snn_linear(model, sites[f"{p}.{nm}"], ta, ua)
            enc[nm] = sp.encode(f"{p}.{nm}", y)
        (tq, uq), (tk, uk), (tv, uv) = enc["q"], enc["k"], enc["v"]
        # (T, B, L, D) -> (T, B, H, L, dh)
        hq = _heads_t(tq.spikes, H)
        hk = _heads_t(tk.spikes, H)
        A = outer_accumulate(_strided(hq, T), _strided(hk, T))
        S = A * (uq * uk / math.sqrt(cfg.head_dim))
        if taps is not None:
            taps[f"{p}.scores"] = S
        Pr = snn_softmax(A, mask)
        tp, up = sp.encode(f"{p}.probs", Pr)
        hv = _heads_t(tv.spikes, H)
        # context = P @ V from the two spike trains
        C = outer_accumulate(_strided(tp.spikes, T), _strided(np.swapaxes(hv, -1, -2), T))
        ctx = merge_heads(C * (up * uv))
        tc, uc = sp.encode(f"{p}.ctx", ctx)
        o = snn_linear(model, sites[f"{p}.o"], tc, uc)
        sp.encode(f"{p}.o", o)
        x = x + sp.values[f"{p}.o"]

        if taps is not None:
            taps[f"{p}.mlp_norm:input"] = x
        m = snn_norm(model, f"{p}.mlp_norm", x)
        tm, um = sp.encode(f"{p}.mlp.in", m)
        sp.encode(f"{p}.gate", snn_linear(model, sites[f"{p}.gate"], tm, um))
        sp.encode(f"{p}.up", snn_linear(model, sites[f"{p}.up"], tm, um))
        gate_v = sp.values[f"{p}.gate"]
        s_act = apx.silu_approx(model.banks["silu_pos"], model.banks["silu_neg"], gate_v)
        if taps is not None:
            taps[f"{p}.silu"] = s_act
        tact, uact = sp.encode(f"{p}.act", s_act * sp.values[f"{p}.up"])
        d = snn_linear(model, sites[f"{p}.down"], tact, uact)
        sp.encode(f"{p}.down", d)
        x = x + sp.values[f"{p}.down"]
    if taps is not None:
        taps["final_norm:input"] = x
    f = snn_norm(model, "final_norm", x)
    tf, uf = sp.encode("head.in", f)
    logits = snn_linear(model, sites["head"], tf, uf)
    return SnnRun(logits, sp.spike_total, sp.traces, sp.values)


def _heads_t(spikes: np.ndarray, H: int) -> np.ndarray:
    T, B, L, D = spikes.shape
    return spikes.reshape(T, B, L, H, D // H).transpose(0, 1, 3, 2, 4)


def _strided(spikes: np.ndarray, T: int) -> np.ndarray:
    """Spread each element's spikes evenly over the window before a spike product."""
    return retime(SpikeTrain(spikes), "strided").spikes


# ---------------------------------------------------------------------------
# front door
# ---------------------------------------------------------------------------


def forward(model: LanguageModel, tokens, mode: str | None = None) -> np.ndarray:
    """Logits ``(seq, vocab)`` for one sequence or ``(batch, seq, vocab)`` for a batch."""
    mode = mode or model.config.mode
    tok = np.asarray(tokens)
    if mode == "ann":
        logits = ann_forward(model, tok)
    elif mode == "snn":
        logits = snn_forward(model, tok).logits
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logits = logits.astype(DTYPE)
    return logits[0] if tok.ndim == 1 else logits


# ---------------------------------------------------------------------------
# data, training, calibration
# ---------------------------------------------------------------------------


def encode_text(text) -> np.ndarray:
    """Byte token ids for ``str`` (UTF-8) or ``bytes`` input."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_tokens(tokens) -> str:
    return bytes(int(t) for t in tokens if 0 <= int(t) < 256).decode("utf-8", errors="replace")


def split_corpus(data: np.ndarray, eval_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(data) * (1.0 - eval_fraction))
    return data[:cut], data[cut:]


def windows(data: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``(inputs, targets)`` windows of ``seq_len`` tokens."""
    n = (len(data) - 1) // seq_len
    if n < 1:
        raise InputError(f"corpus of {len(data)} tokens is shorter than one window of {seq_len + 1}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len)[None, :]
    return data[idx], data[idx + 1]


def evaluate_loss(model: LanguageModel, inputs, targets, mode: str = "ann", batch_size: int = 16) -> float:
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch_size):
        x, y = inputs[i:i + batch_size], targets[i:i + batch_size]
        logits = ann_forward(model, x) if mode == "ann" else snn_forward(model, x).logits
        total += task_loss(logits, y) * y.size
        count += y.size
    return total / count


def calibrate(model: LanguageModel, inputs, batch_size: int = 16) -> dict[str, float]:
    """Freeze every site's scale at the absolute maximum seen on ``inputs``."""
    model.calibration.clear()
    for i in range(0, len(inputs), batch_size):
        ann_forward(model, inputs[i:i + batch_size], collect=True)
    return dict(model.calibration)


@dataclass
class TrainState:
    """Optimizer position; enough to resume a run exactly."""

    step: int = 0
    epoch: int = 0
    batch: int = 0
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    # running absmax of every site while training (float32 values)
    ema: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainReport:
    losses: list[tuple[int, float]]
    initial_eval_loss: float
    final_eval_loss: float
    calibration: dict[str, float]
    state: TrainState
    seconds: float = 0.0

    @property
    def relative_improvement(self) -> float:
        return 1.0 - self.final_eval_loss / self.initial_eval_loss


OPTIMIZERS = ("sgd", "adam")


def _apply_update(model, grads, state: TrainState, lr, optimizer, momentum, betas=(0.9, 0.999), eps=1e-8):
    for name, g in grads.items():
        p64 = model.params[name].astype(np.float64)
        if optimizer == "sgd":
            buf = state.slots.get(f"{name}.m")
            buf = g if buf is None else momentum * buf.astype(np.float64) + g
            state.slots[f"{name}.m"] = buf.astype(DTYPE)
            p64 -= lr * buf
        else:
            m = state.slots.get(f"{name}.m", np.zeros(g.shape, DTYPE)).astype(np.float64)
            v = state.slots.get(f"{name}.v", np.zeros(g.shape, DTYPE)).astype(np.float64)
            m = betas[0] * m + (1 - betas[0]) * g
            v = betas[1] * v + (1 - betas[1]) * g * g
            state.slots[f"{name}.m"] = m.astype(DTYPE)
            state.slots[f"{name}.v"] = v.astype(DTYPE)
            t = state.step + 1
            mh = m / (1 - betas[0] ** t)
            vh = v / (1 - betas[1] ** t)
            p64 -= lr * mh / (np.sqrt(vh) + eps)
        model.params[name] = p64.astype(DTYPE)


def train_ann(
    model: LanguageModel,
    corpus,
    epochs: int = 3,
    lr: float = 0.05,
    rng: Rng | int = 0,
    *,
    batch_size: int = 16,
    optimizer: str = "sgd",
    momentum: float = 0.9,
    grad_clip: float = 1.0,
    ema: float = 0.9,
    eval_data=None,
    eval_windows: int = 16,
    state: TrainState | None = None,
    max_steps: int | None = None,
    on_step=None,
) -> TrainReport:
    """Next-token training of the quantized ANN with straight-through gradients.

    The batch order of every epoch is a permutation drawn from
    ``derive_seed(seed, "epoch<k>")``, so a run resumed from ``state``
    continues exactly where it stopped.  Quantizers train on running
    (EMA) absmax scales kept in ``state``; before and after training every
    site is calibrated to the absolute maximum over the evaluation windows,
    and the model keeps that frozen calibration.
    """
    import time

    if model.config.mode != "ann":
        raise ValueError("train_ann needs a model in ann mode")
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
    root = rng if isinstance(rng, Rng) else Rng(int(rng))
    data = corpus if isinstance(corpus, np.ndarray) else encode_text(corpus)
    if len(data) == 0:
        raise InputError("corpus is empty")
    L = model.config.max_seq_len
    X, Y = windows(data, L)
    if eval_data is None:
        EX, EY = X[:eval_windows], Y[:eval_windows]
    else:
        EX, EY = windows(eval_data, L)
        EX, EY = EX[:eval_windows], EY[:eval_windows]

    state = state if state is not None else TrainState()
    t0 = time.perf_counter()
    if not model.calibration:
        calibrate(model, EX)
    initial = evaluate_loss(model, EX, EY)
    if not state.ema:
        state.ema = dict(model.calibration)
    frozen = model.calibration
    model.calibration = dict(state.ema)
    losses: list[tuple[int, float]] = []
    n_batches = math.ceil(len(X) / batch_size)
    while state.epoch < epochs:
        order = root.child(f"epoch{state.epoch}").permutation(len(X))
        while state.batch < n_batches:
            if max_steps is not None and len(losses) >= max_steps:
                break
            idx = order[state.batch * batch_size:(state.batch + 1) * batch_size]
            before = model.copy() if not losses or state.step % 50 == 0 else None
            logits, cache = ann_forward(model, X[idx], ema=ema, keep_cache=True)
            loss, dlogits = _loss_and_grad(logits, Y[idx])
            if not math.isfinite(loss):
                if before is not None:
                    before.calibration = frozen
                raise TrainingError(f"loss became {loss} at step {state.step}", last_good=before, step=state.step)
            grads = ann_backward(model, cache, dlogits)
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if grad_clip and norm > grad_clip:
                grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
            if lr != 0:
                _apply_update(model, grads, state, lr, optimizer, momentum)
            losses.append((state.step, loss))
            if on_step is not None:
                on_step(state.step, loss)
            state.step += 1
            state.batch += 1
        if max_steps is not None and len(losses) >= max_steps and state.batch < n_batches:
            break
        state.epoch += 1
        state.batch = 0
    state.ema = dict(model.calibration)
    model.calibration = frozen
    calibrate(model, EX)
    final = evaluate_loss(model, EX, EY)
    return TrainReport(losses, initial, final, dict(model.calibration), state, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass
class Generation:
    tokens: list[int]
    text: str
    tokens_per_second: float
    spike_total: int = 0


def generate(model: LanguageModel, prompt, n_new: int = 32, *, mode: str | None = None,
             temperature: float = 0.0, rng: Rng | None = None) -> Generation:
    """Autoregressive decoding over the last ``max_seq_len`` tokens; greedy at temperature 0."""
    import time

    mode = mode or model.config.mode
    cfg = model.config
    toks = list(encode_text(prompt)) if isinstance(prompt, (str, bytes)) else [int(t) for t in prompt]
    if not toks:
        toks = [BOS]
    check_tokens(cfg, np.array(toks[-cfg.max_seq_len:]))
    rng = rng if rng is not None else Rng(0)
    spikes = 0
    start = len(toks)
    t0 = time.perf_counter()
    for _ in range(n_new):
        window = np.array(toks[-cfg.max_seq_len:])[None, :]
        if mode == "snn":
            run = snn_forward(model, window)
            logits, spikes = run.logits, spikes + run.spike_total
        else:
            logits = ann_forward(model, window)
        z = logits[0, -1]
        if temperature <= 0:
            nxt = int(np.argmax(z))
        else:
            pz = np.exp((z - z.max()) / temperature)
            cdf = np.cumsum(pz / pz.sum())
            nxt = int(min(np.searchsorted(cdf, rng.uniform(1)[0], side="right"), len(z) - 1))
        toks.append(nxt)
    dt = max(time.perf_counter() - t0, 1e-9)
    new = toks[start:]
    return Generation(new, decode_tokens(new), n_new / dt, spikes)
