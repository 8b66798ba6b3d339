"""Small shared builders for the test modules."""

import contextlib
import hashlib
import io
import json

from snnlm.cli import main
from snnlm.model import LanguageModel, ModelConfig, calibrate
from snnlm.tensor import Rng


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_layers=2, d_ff=32, max_seq_len=16, bits=4)
    base.update(kw)
    return ModelConfig(**base)


def calibrated_tiny(seed: int = 0, **kw) -> LanguageModel:
    cfg = tiny_config(**kw)
    m = LanguageModel.init(cfg, Rng(seed))
    toks = Rng(seed + 1000).integers(256, 8 * cfg.max_seq_len).reshape(8, cfg.max_seq_len)
    calibrate(m, toks)
    return m


TINY = {
    "model.d_model": 16, "model.n_heads": 2, "model.d_ff": 32, "model.max_seq_len": 16, "model.bits": 4,
    "data.synthetic_bytes": 6000, "train.epochs": 1, "train.eval_windows": 4,
    "audit.tokens": 64, "audit.seq_len": 16, "stdp.steps": 3, "generate.n_new": 8,
}
# a cheap bank fit: coarse, so its gates may fail, which the pipeline tolerates
CHEAP_BANKS = ["approx.square_segments=4", "approx.sqrt_segments=12", "approx.steps=32"]


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def sets(items):
    return [x for item in items for x in ("--set", item)]


def pipeline(d):
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    codes = {}
    codes["fit"] = run("fit-approximators", "--config", cfg, "--out", d / "banks.btsf", *sets(CHEAP_BANKS))[0]
    codes["train"] = run("train-ann", "--config", cfg, "--out", d / "ann.btsf")[0]
    codes["convert"] = run("convert", d / "ann.btsf", "--config", cfg, "--out", d / "snn.btsf",
                           "--set", f"convert.banks={d / 'banks.btsf'}")[0]
    codes["audit"] = run("audit", d / "ann.btsf", d / "snn.btsf", "--config", cfg, "--out", d / "report.json")[0]
    codes["stdp"] = run("stdp", d / "snn.btsf", "--config", cfg, "--out", d / "stdp.btsf")[0]
    codes["generate"], text, _ = run("generate", d / "snn.btsf", "--config", cfg, "--prompt", "the ",
                                     "--out", d / "gen.json")
    return codes, text


def digests(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}
