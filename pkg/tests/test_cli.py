import json

import numpy as np
import pytest

from snnlm import checkpoint as ckpt
from snnlm import config as C
from snnlm.cli import build_parser
from snnlm.model import ann_forward, encode_text, generate, snn_forward, split_corpus
from snnlm.corpus import synthetic_corpus

from helpers import TINY, digests, pipeline, run, sets

@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return (a, *pipeline(a)), (b, *pipeline(b))


def test_pipeline_exit_codes(runs):
    codes = runs[0][1]
    assert codes["fit"] in (0, 2)
    assert {k: v for k, v in codes.items() if k != "fit"} == dict.fromkeys(("train", "convert", "audit", "stdp", "generate"), 0)


def test_every_artifact_hash_identical(runs):
    (a, _, ta), (b, _, tb) = runs
    da, db = digests(a), digests(b)
    names = {"banks.btsf", "banks.report.json", "ann.btsf", "ann.losses.jsonl", "snn.btsf", "report.json",
             "stdp.btsf", "stdp.metrics.jsonl", "gen.json", "tiny.json"}
    assert set(da) == names and da == db and ta == tb


def test_audit_report_validates_and_linear_gaps_zero(runs):
    from snnlm.conversion import validate_report

    doc = json.loads((runs[0][0] / "report.json").read_text())
    validate_report(doc)
    assert doc["matched"] and doc["linear_gate_passed"]
    assert all(s["max_gap"] == 0 for s in doc["sites"] if s["kind"] == "synapsis")


def test_train_log_finite_and_improving(runs):
    lines = [json.loads(x) for x in (runs[0][0] / "ann.losses.jsonl").read_text().splitlines()]
    assert lines and all(np.isfinite(r["loss"]) for r in lines)
    _, _, extra = ckpt.load_model(runs[0][0] / "ann.btsf")
    assert extra["train"]["final_eval_loss"] < extra["train"]["initial_eval_loss"]


def test_stdp_metrics_fields(runs):
    recs = [json.loads(x) for x in (runs[0][0] / "stdp.metrics.jsonl").read_text().splitlines()]
    assert len(recs) == TINY["stdp.steps"]
    for r in recs:
        assert {"step", "l_task", "l_task_ema", "G", "baseline", "mean_abs_dw", "loss_total"} <= set(r)
        assert 0 < r["G"] < 1


def test_convert_prints_bijection(runs, tmp_path):
    d = runs[0][0]
    code, out, _ = run("convert", d / "ann.btsf", "--config", d / "tiny.json", "--out", tmp_path / "s.btsf",
                       "--set", f"convert.banks={d / 'banks.btsf'}")
    doc = json.loads(out)
    assert code == 0 and doc["linear_layers"] == doc["sites_replaced"] == 15 and len(doc["map"]) == 15


def test_stdp_zero_rates_is_byte_identical(runs, tmp_path):
    d = runs[0][0]
    zero = [f"stdp.{k}=0" for k in ("eta_w", "eta_theta", "eta_theta_task", "eta_alpha", "eta_alpha_task",
                                     "eta_r", "eta_r_task")]
    code, _, _ = run("stdp", d / "snn.btsf", "--config", d / "tiny.json", "--out", tmp_path / "z.btsf", *sets(zero))
    assert code == 0
    assert (tmp_path / "z.btsf").read_bytes() == (d / "snn.btsf").read_bytes()


def test_audit_mismatched_steps_and_strict(runs, tmp_path):
    d = runs[0][0]
    cfg = d / "tiny.json"
    run("convert", d / "ann.btsf", "--config", cfg, "--out", tmp_path / "t.btsf",
        "--set", f"convert.banks={d / 'banks.btsf'}", "--set", "convert.T=3")
    code, out, _ = run("audit", d / "ann.btsf", tmp_path / "t.btsf", "--config", cfg)
    doc = json.loads(out)
    assert not doc["matched"] and doc["T"] == 3
    assert not doc["linear_gate_passed"] and code == 0
    code, out, _ = run("audit", d / "ann.btsf", tmp_path / "t.btsf", "--config", cfg, "--strict")
    assert code == 2 and json.loads(out)["T"] == 3


def test_generate_temperature_zero_is_greedy(runs):
    d = runs[0][0]
    model, _, _ = ckpt.load_model(d / "snn.btsf")
    doc = json.loads((d / "gen.json").read_text())
    assert doc["tokens"] == generate(model, "the ", 8, temperature=0.0).tokens
    code, text, err = run("generate", d / "snn.btsf", "--config", d / "tiny.json", "--prompt", "the ",
                          "--set", "generate.temperature=0")
    assert code == 0 and text == runs[0][2] and "tokens/s" in err and "spikes" in err


def test_generate_rejects_out_of_range_prompt(runs):
    d = runs[0][0]
    code, _, err = run("generate", d / "ann.btsf", "--config", d / "tiny.json", "--prompt", "x" * 40,
                       "--set", "generate.mode=snn")
    assert code == 1 and "error" in err


def test_help_documents_every_key():
    text = build_parser().format_help()
    for key in C.KEYS:
        assert key in text
    for cmd in ("fit-approximators", "train-ann", "convert", "audit", "stdp", "generate"):
        assert cmd in text
    sub = build_parser()._subparsers._group_actions[0].choices["audit"].format_help()
    for flag in ("--config", "--seed", "--strict", "--out"):
        assert flag in sub


def test_config_errors_exit_one(tmp_path):
    assert run("train-ann", "--set", "model.width=3")[0] == 1
    assert run("train-ann", "--set", "model.bits=eight")[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("convert", "--config", bad)[0] == 1
    code, _, err = run("convert", "--out", tmp_path / "x.btsf")
    assert code == 1 and "convert.checkpoint" in err
    assert run("train-ann", tmp_path / "missing.txt")[0] == 1
    assert run("convert", tmp_path / "missing.btsf")[0] == 1


def test_internal_error_exit_three(monkeypatch, tmp_path):
    import snnlm.cli as cli

    def boom(cfg, out, args):
        raise ZeroDivisionError("x")

    monkeypatch.setitem(cli.COMMANDS, "convert", (boom, "", []))
    assert run("convert", "--out", tmp_path / "x")[0] == 3


def test_single_segment_banks_degrade(tmp_path):
    code, _, _ = run("fit-approximators", "--out", tmp_path / "b.btsf",
                     *sets(["approx.square_segments=1", "approx.sqrt_segments=4", "approx.steps=16"]))
    report = json.loads((tmp_path / "b.report.json").read_text())
    assert code == 2 and report["passed"] is False and report["failed"] in ("square", "sqrt", "silu")
    assert report["square_mse"] > 1e-2


def test_resume_reproduces_losses(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({**TINY, "train.epochs": 2}))
    assert run("train-ann", "--config", cfg, "--out", tmp_path / "full.btsf")[0] == 0
    assert run("train-ann", "--config", cfg, "--out", tmp_path / "half.btsf", "--set", "train.max_steps=5")[0] == 0
    assert run("train-ann", "--config", cfg, "--out", tmp_path / "rest.btsf",
               "--set", f"train.resume={tmp_path / 'half.btsf'}")[0] == 0
    read = lambda n: [json.loads(x) for x in (tmp_path / n).read_text().splitlines()]
    assert read("half.losses.jsonl") + read("rest.losses.jsonl") == read("full.losses.jsonl")
    full, _, _ = ckpt.load_model(tmp_path / "full.btsf")
    rest, _, _ = ckpt.load_model(tmp_path / "rest.btsf")
    assert all(full.params[k].tobytes() == rest.params[k].tobytes() for k in full.params)


@pytest.mark.slow
def test_greedy_continuations_agree_across_modes(toy_run, toy_snn):
    """First greedy token of 500 held-out prompts, ann vs snn decoding."""
    _, held = split_corpus(encode_text(synthetic_corpus(100_000, 0)), 0.1)
    starts = np.linspace(0, len(held) - 17, 500).astype(int)
    prompts = np.stack([held[s:s + 16] for s in starts])
    ann = np.argmax(ann_forward(toy_run[0], prompts)[:, -1], -1)
    snn = np.concatenate([np.argmax(snn_forward(toy_snn, prompts[i:i + 100]).logits[:, -1], -1)
                          for i in range(0, 500, 100)])
    assert np.mean(ann == snn) >= 0.8
    # the batched argmax is what generate() emits as its first token
    for i in (0, 250, 499):
        assert generate(toy_snn, prompts[i], 1).tokens == [int(snn[i])]
