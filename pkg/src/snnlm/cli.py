"""Command-line pipeline: fit approximators, train, convert, audit, fine-tune, generate.

Exit codes: 0 success, 1 input or configuration error, 2 a quality gate
failed, 3 internal error.  Artifacts never contain timings, so rerunning a
command with the same seed reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import approximators as apx
from . import checkpoint as ckpt
from . import config as C
from .conversion import AuditError, ConversionError, audit_equivalence, convert, site_map, validate_report
from .corpus import synthetic_corpus
from .model import (
    InputError,
    LanguageModel,
    TrainingError,
    encode_text,
    generate,
    split_corpus,
    train_ann,
    windows,
)
from .plasticity import finetune
from .tensor import Rng

log = logging.getLogger("snnlm")

EXIT_OK, EXIT_INPUT, EXIT_GATE, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULT_OUT = {
    "fit-approximators": "banks.btsf",
    "train-ann": "ann.btsf",
    "convert": "snn.btsf",
    "stdp": "stdp.btsf",
}


class GateFailure(RuntimeError):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _corpus(cfg: dict) -> np.ndarray:
    path = cfg["data.corpus"]
    if path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"corpus {p} not found")
        data = encode_text(p.read_bytes())
    else:
        data = encode_text(synthetic_corpus(cfg["data.synthetic_bytes"], 0))
    if len(data) == 0:
        raise InputError("corpus is empty")
    return data


def _split(cfg: dict):
    data = _corpus(cfg)
    train, held = split_corpus(data, cfg["data.eval_fraction"])
    if len(held) < 2 or len(train) < 2:
        raise InputError("corpus too short to split into training and held-out parts")
    return train, held


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit_approximators(cfg: dict, out: Path, args) -> int:
    settings = C.approx_settings(cfg)
    rng = Rng(cfg["seed"]).child("approx")
    report = {"passed": False, "failed": None, "banks": {}}
    try:
        banks = apx.fit_default_banks(rng, settings, check=False)
    except apx.FitError as exc:
        report["failed"] = exc.diagnostics.get("kind")
        report["error"] = str(exc)
        _sidecar(out, ".report.json").write_text(_dump_json(report))
        raise GateFailure(str(exc)) from None
    ckpt.save_banks(out, banks)
    report["banks"] = {k: {"mse": b.mse, "segments": int(len(b.bounds) - 1), "neurons": int(len(b.params))}
                       for k, b in sorted(banks.items())}
    report.update(apx.bank_metrics(banks))
    try:
        apx.check_banks(banks, settings)
        report["passed"] = True
    except apx.FitError as exc:
        report["failed"] = exc.diagnostics.get("kind")
        report["error"] = str(exc)
    _sidecar(out, ".report.json").write_text(_dump_json(report))
    print(_dump_json(report), end="")
    if not report["passed"]:
        raise GateFailure(report["error"])
    return EXIT_OK


def cmd_train_ann(cfg: dict, out: Path, args) -> int:
    train, held = _split(cfg)
    state = None
    if cfg["train.resume"]:
        model, state, _ = ckpt.load_model(cfg["train.resume"])
        if model.config.mode != "ann":
            raise InputError("can only resume an ann-mode checkpoint")
        if model.config.to_dict() != C.model_config(cfg).to_dict():
            raise InputError("resume checkpoint was trained with a different model config")
    else:
        model = LanguageModel.init(C.model_config(cfg), Rng(cfg["seed"]).child("init"))
    log_path = _sidecar(out, ".losses.jsonl")
    lines = []

    def on_step(step, loss):
        lines.append(json.dumps({"step": step, "loss": loss}))
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, loss)

    report = train_ann(
        model, train, cfg["train.epochs"], cfg["train.lr"], Rng(cfg["seed"]).child("train"),
        batch_size=cfg["train.batch_size"], optimizer=cfg["train.optimizer"], momentum=cfg["train.momentum"],
        grad_clip=cfg["train.grad_clip"], ema=cfg["train.ema"], eval_data=held,
        eval_windows=cfg["train.eval_windows"], state=state, max_steps=cfg["train.max_steps"] or None,
        on_step=on_step,
    )
    summary = {"initial_eval_loss": report.initial_eval_loss, "final_eval_loss": report.final_eval_loss,
               "relative_improvement": report.relative_improvement, "steps": report.state.step}
    ckpt.save_model(out, model, report.state, {"train": summary})
    log_path.write_text("".join(line + "\n" for line in lines))
    log.info("trained in %.1fs", report.seconds)
    print(_dump_json(summary), end="")
    return EXIT_OK


def cmd_convert(cfg: dict, out: Path, args) -> int:
    C.require(cfg, "convert.checkpoint")
    ann, _, _ = ckpt.load_model(cfg["convert.checkpoint"])
    banks = ckpt.load_banks(cfg["convert.banks"]) if cfg["convert.banks"] else None
    if banks is None:
        banks = apx.fit_default_banks(Rng(cfg["seed"]).child("approx"), C.approx_settings(cfg))
    snn = convert(ann, banks, T=cfg["convert.T"] or None)
    ckpt.save_model(out, snn)
    pairs = site_map(snn)
    summary = {
        "linear_layers": len(pairs),
        "sites_replaced": len(pairs),
        "spiking_populations": len(snn.neurons),
        "T": snn.config.steps,
        "bits": snn.config.bits,
        "matched": snn.config.equivalent,
        "map": [f"{a} -> {b}" for a, b in pairs],
    }
    print(_dump_json(summary), end="")
    return EXIT_OK


def cmd_audit(cfg: dict, out: Path | None, args) -> int:
    C.require(cfg, "audit.ann", "audit.snn")
    ann, _, _ = ckpt.load_model(cfg["audit.ann"])
    snn, _, _ = ckpt.load_model(cfg["audit.snn"])
    if not snn.banks:
        raise InputError("the spiking checkpoint carries no approximator banks")
    _, held = _split(cfg)
    L = min(cfg["audit.seq_len"], ann.config.max_seq_len)
    X, _ = windows(held, L)
    n = max(1, cfg["audit.tokens"] // L)
    if len(X) < n:
        raise InputError(f"held-out text has {len(X)} windows, the audit needs {n}")
    report = audit_equivalence(ann, snn, X[:n])
    doc = report.to_dict()
    validate_report(doc)
    text = _dump_json(doc)
    if out is not None:
        out.write_text(text)
    print(text, end="")
    if not report.linear_gate_passed and (report.matched or args.strict):
        raise GateFailure("synapsis gap exceeds one output quantizer step")
    return EXIT_OK


def cmd_stdp(cfg: dict, out: Path, args) -> int:
    C.require(cfg, "stdp.checkpoint")
    model, state, extra = ckpt.load_model(cfg["stdp.checkpoint"])
    if model.config.mode != "snn":
        raise InputError("stdp needs a converted (snn-mode) checkpoint")
    missing = {"square", "sqrt", "silu_pos", "silu_neg"} - set(model.banks)
    if missing:
        raise InputError(f"checkpoint lacks approximator banks {sorted(missing)}")
    train, _ = _split(cfg)
    X, Y = windows(train, model.config.max_seq_len)
    pcfg = C.plasticity_config(cfg)
    metrics_path = _sidecar(out, ".metrics.jsonl")
    lines = []

    def on_step(m):
        lines.append(json.dumps(m.to_record(), sort_keys=True))
        if m.step % 10 == 0:
            log.info("step %d L_task %.4f ema %.4f G %.3f", m.step, m.l_task, m.l_task_ema, m.g)

    _, history = finetune(model, X, Y, cfg["stdp.steps"], Rng(cfg["seed"]).child("stdp"),
                          batch_size=cfg["stdp.batch_size"], config=pcfg, on_step=on_step)
    # the input's metadata is carried over untouched, so a no-op run reproduces it byte for byte
    ckpt.save_model(out, model, state, extra)
    metrics_path.write_text("".join(line + "\n" for line in lines))
    if history:
        summary = {"steps": len(history), "l_task_first": history[0].l_task, "l_task_ema_final": history[-1].l_task_ema,
                   "G_min": min(m.g for m in history), "G_max": max(m.g for m in history)}
        print(_dump_json(summary), end="")
    return EXIT_OK


def cmd_generate(cfg: dict, out: Path | None, args) -> int:
    C.require(cfg, "generate.checkpoint")
    model, _, _ = ckpt.load_model(cfg["generate.checkpoint"])
    mode = cfg["generate.mode"] or model.config.mode
    if mode not in ("ann", "snn"):
        raise InputError(f"generate.mode must be 'ann' or 'snn', got {mode!r}")
    if mode == "snn" and model.config.mode != "snn":
        raise InputError("snn decoding needs a converted checkpoint")
    g = generate(model, cfg["generate.prompt"], cfg["generate.n_new"], mode=mode,
                 temperature=cfg["generate.temperature"], rng=Rng(cfg["seed"]).child("generate"))
    doc = {"prompt": cfg["generate.prompt"], "mode": mode, "tokens": g.tokens, "text": g.text}
    if mode == "snn":
        doc["spike_total"] = g.spike_total
    if out is not None:
        out.write_text(_dump_json(doc))
    print(g.text)
    extra = f", {g.spike_total} spikes" if mode == "snn" else ""
    print(f"{g.tokens_per_second:.1f} tokens/s{extra}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "fit-approximators": (cmd_fit_approximators, "fit the square, sqrt and SiLU neuron banks and write a fit report", []),
    "train-ann": (cmd_train_ann, "train the quantized byte-level model", [("corpus", "data.corpus")]),
    "convert": (cmd_convert, "convert a trained checkpoint into a spiking one", [("checkpoint", "convert.checkpoint")]),
    "audit": (cmd_audit, "compare a trained and a converted checkpoint component by component",
              [("ann", "audit.ann"), ("snn", "audit.snn")]),
    "stdp": (cmd_stdp, "plasticity fine-tuning of a converted checkpoint", [("checkpoint", "stdp.checkpoint")]),
    "generate": (cmd_generate, "decode text from a checkpoint", [("checkpoint", "generate.checkpoint")]),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file of flat config keys")
    common.add_argument("--seed", type=int, help="root seed (overrides the 'seed' key)")
    common.add_argument("--strict", action="store_true", help="treat gate failures of mismatched runs as errors")
    common.add_argument("--out", metavar="PATH", help="primary output file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(
        prog="snnlm", description="Quantized transformer to spiking network pipeline.",
        epilog=C.help_text(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text, positionals) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text, epilog=C.help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        for arg, key in positionals:
            p.add_argument(arg, nargs="?", help=f"sets {key}")
        if name == "generate":
            p.add_argument("--prompt", help="sets generate.prompt")
    return parser


def _settings(args, positionals) -> dict:
    overrides = C.load(args.config) if args.config else {}
    for item in args.set:
        k, v = C.parse_assignment(item)
        overrides[k] = v
    for arg, key in positionals:
        value = getattr(args, arg, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "prompt", None) is not None:
        overrides["generate.prompt"] = args.prompt
    if args.seed is not None:
        overrides["seed"] = args.seed
    return C.resolve(overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    fn, _, positionals = COMMANDS[args.command]
    try:
        cfg = _settings(args, positionals)
        out = Path(args.out) if args.out else (Path(DEFAULT_OUT[args.command]) if args.command in DEFAULT_OUT else None)
        return fn(cfg, out, args)
    except GateFailure as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (TrainingError, apx.FitError) as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (C.ConfigError, InputError, ConversionError, AuditError, ckpt.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())
