import json
from pathlib import Path

import pytest

from voxmix.cli import (
    ExperimentSpec,
    LoraSpec,
    PhasePlanSpec,
    StrategyCell,
    all_cells,
    cell_dir,
    cmd_decode,
    cmd_eval,
    cmd_finetune,
    cmd_gen_data,
    cmd_grid,
    cmd_pretrain,
    corpus_path,
    default_spec,
    load_spec,
    main,
    save_spec,
    spec_from_doc,
    spec_to_doc,
    transcript_path,
)
from voxmix.decoding import DecodeConfig
from voxmix.losses import LossConfig
from voxmix.model import ModelConfig
from voxmix.synthdata import GenConfig, load_corpus


def micro_spec(out_dir: str) -> ExperimentSpec:
    """Small enough to run an end-to-end grid in a few seconds."""
    return ExperimentSpec(
        out_dir=out_dir,
        seeds=[0, 1],
        gen=GenConfig(),
        pretrain_gen_overrides={"jitter": 0.25, "gain_range": [0.0, 0.0]},
        corpus_songs={"pretrain": 10, "train": 10, "dev": 2, "test": 4},
        model=ModelConfig(),
        lora=LoraSpec(),
        pretrain=PhasePlanSpec(peak_lr=3e-3, total_steps=40, batch_size=8, seed=0),
        finetune=PhasePlanSpec(peak_lr=1e-3, total_steps=20, batch_size=8),
        strategies=[
            StrategyCell("voc", LossConfig(strategy="voc")),
            StrategyCell("cns_l2_w1.0", LossConfig(strategy="cns", cns_kind="L2", weight=1.0)),
        ],
        decode=DecodeConfig(max_tokens=24, window_frames=64),
    )


def test_default_spec_matches_reported_grid():
    spec = default_spec()
    ids = [c.cell_id for c in spec.strategies]
    assert ids[:4] == ["voc", "mix", "random", "both"]
    assert len(ids) == 10  # 4 baselines + 2 kinds x 3 weights
    assert len(spec.seeds) == 5
    assert spec.pretrain.total_steps == 2000
    assert spec.finetune.total_steps == 1000


def test_spec_round_trip(tmp_path):
    spec = micro_spec(str(tmp_path / "out"))
    path = tmp_path / "spec.json"
    save_spec(spec, path)
    again = load_spec(path)
    assert again == spec


def test_spec_rejects_unknown_fields(tmp_path):
    doc = spec_to_doc(micro_spec("x"))
    doc["gpu"] = True
    with pytest.raises(ValueError, match="gpu"):
        spec_from_doc(doc)
    doc2 = spec_to_doc(micro_spec("x"))
    doc2["model"]["layers"] = 3
    with pytest.raises(ValueError, match="layers"):
        spec_from_doc(doc2)


def test_spec_rejects_duplicate_strategy_ids(tmp_path):
    spec = micro_spec("x")
    with pytest.raises(ValueError, match="duplicate"):
        ExperimentSpec(
            **{
                **{f: getattr(spec, f) for f in spec.__dataclass_fields__},
                "strategies": [spec.strategies[0], spec.strategies[0]],
            }
        )


def test_gen_data_is_deterministic_and_split_disjoint(tmp_path):
    out = tmp_path / "out"
    spec = micro_spec(str(out))
    cmd_gen_data(spec, out)
    first = {s: corpus_path(out, s).read_bytes() for s in ("pretrain", "train", "dev", "test")}
    cmd_gen_data(spec, out)
    for split, blob in first.items():
        assert corpus_path(out, split).read_bytes() == blob

    _, train = load_corpus(corpus_path(out, "train"))
    _, test = load_corpus(corpus_path(out, "test"))
    assert not ({s.seed for s in train} & {s.seed for s in test})


def test_gen_data_test_split_has_both_conditions(tmp_path):
    out = tmp_path / "out"
    spec = micro_spec(str(out))
    cmd_gen_data(spec, out)
    _, test = load_corpus(corpus_path(out, "test"))
    import numpy as np

    # voc condition is interference-free by construction; mix carries gain > 0
    assert all(s.gain >= spec.gen.gain_range[0] for s in test)
    assert any(not np.array_equal(s.x_v, s.x_m) for s in test)


def test_finetune_requires_pretrain_checkpoint(tmp_path):
    out = tmp_path / "out"
    spec = micro_spec(str(out))
    cmd_gen_data(spec, out)
    with pytest.raises(SystemExit, match="pretrain"):
        cmd_finetune(spec, out, "voc", seed=0)


def test_finetune_rejects_unknown_cell_and_seed(tmp_path):
    out = tmp_path / "out"
    spec = micro_spec(str(out))
    with pytest.raises(SystemExit, match="unknown strategy"):
        cmd_finetune(spec, out, "nope", seed=0)
    with pytest.raises(SystemExit, match="seeds list"):
        cmd_finetune(spec, out, "voc", seed=99)


def test_eval_lists_missing_cells(tmp_path):
    out = tmp_path / "out"
    spec = micro_spec(str(out))
    cmd_gen_data(spec, out)
    with pytest.raises(SystemExit, match="cns_l2_w1.0_s1"):
        cmd_eval(spec, out)


@pytest.fixture(scope="module")
def grid_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid") / "out"
    spec = micro_spec(str(out))
    cmd_grid(spec, out, jobs=1)
    return spec, out


def test_grid_emits_every_cell(grid_out):
    spec, out = grid_out
    for cell in spec.strategies:
        for seed in spec.seeds:
            d = cell_dir(out, cell.cell_id, seed)
            assert (d / "checkpoint.json").exists()
            assert (d / "metrics.jsonl").exists()
    for cell in all_cells(spec):
        for cond in ("mix", "voc"):
            assert transcript_path(out, cell, cond).exists()
    assert (out / "reports" / "summary.md").exists()


def test_summary_has_one_row_per_strategy_plus_pretrained(grid_out):
    spec, out = grid_out
    lines = (out / "reports" / "summary.md").read_text().strip().split("\n")
    assert len(lines) == 2 + 1 + len(spec.strategies)  # header, rule, pretrained, strategies
    assert lines[2].startswith("| pretrained |")
    csv_lines = (out / "reports" / "summary.csv").read_text().strip().split("\n")
    subsets = len(spec.gen.languages) + 1
    assert len(csv_lines) == 1 + (1 + len(spec.strategies)) * subsets * 2


def test_grid_cell_rerun_is_byte_identical(grid_out):
    spec, out = grid_out
    cell = cell_dir(out, "cns_l2_w1.0", 1)
    before = {
        "ckpt": (cell / "checkpoint.json").read_bytes(),
        "metrics": (cell / "metrics.jsonl").read_bytes(),
        "mix": transcript_path(out, "cns_l2_w1.0_s1", "mix").read_bytes(),
        "summary": (out / "reports" / "summary.md").read_bytes(),
    }
    cmd_finetune(spec, out, "cns_l2_w1.0", seed=1)
    cmd_decode(spec, out, only=["cns_l2_w1.0_s1"])
    cmd_eval(spec, out)
    assert (cell / "checkpoint.json").read_bytes() == before["ckpt"]
    assert (cell / "metrics.jsonl").read_bytes() == before["metrics"]
    assert transcript_path(out, "cns_l2_w1.0_s1", "mix").read_bytes() == before["mix"]
    assert (out / "reports" / "summary.md").read_bytes() == before["summary"]


def test_transcript_schema(grid_out):
    spec, out = grid_out
    path = transcript_path(out, "pretrained", "voc")
    _, test = load_corpus(corpus_path(out, "test"))
    lines = path.read_text().strip().split("\n")
    assert len(lines) == len(test)
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"sample_id", "condition", "text"}
        assert rec["condition"] == "voc"


def test_parallel_grid_matches_serial(tmp_path):
    serial_out = tmp_path / "serial"
    parallel_out = tmp_path / "parallel"
    cmd_grid(micro_spec(str(serial_out)), serial_out, jobs=1)
    cmd_grid(micro_spec(str(parallel_out)), parallel_out, jobs=2)
    for rel in (
        "reports/summary.md",
        "cells/voc_s0/metrics.jsonl",
        "cells/cns_l2_w1.0_s1/checkpoint.json",
        "transcripts/pretrained/mix.jsonl",
    ):
        assert (serial_out / rel).read_bytes() == (parallel_out / rel).read_bytes()


def test_main_cli_round_trip(tmp_path):
    out = tmp_path / "cli_out"
    spec_path = tmp_path / "spec.json"
    save_spec(micro_spec(str(out)), spec_path)
    assert main(["gen-data", "--spec", str(spec_path)]) == 0
    assert main(["pretrain", "--spec", str(spec_path)]) == 0
    assert main(["finetune", "voc", "--seed", "0", "--spec", str(spec_path)]) == 0
    with pytest.raises(SystemExit):
        main(["finetune", "voc", "--seed", "7", "--spec", str(spec_path)])
