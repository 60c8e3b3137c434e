"""Experiment driver: spec-file-driven corpus generation, training,
decoding, and WER reporting over a strategy x seed grid.

Subcommands: gen-data, pretrain, finetune, decode, eval, and grid (runs
everything). A single JSON spec file pins every knob so a rerun
reproduces all emitted files byte for byte; grid cells are independent
jobs and may run in parallel worker processes.
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from voxmix.decoding import DecodeConfig, transcribe_batch
from voxmix.evaluation import aggregate, comparison_markdown, report_csv, wer
from voxmix.losses import LossConfig
from voxmix.model import (
    ModelConfig,
    attach_adapters,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from voxmix.synthdata import (
    GenConfig,
    build_corpus,
    detokenize,
    load_corpus,
    split_config,
    write_corpus,
)
from voxmix.training import TrainPlan, run_experiment

SPLITS = ("pretrain", "train", "dev", "test")
PRETRAINED_CELL = "pretrained"


@dataclass
class StrategyCell:
    cell_id: str
    loss: LossConfig


@dataclass
class LoraSpec:
    rank: int = 4
    alpha: float = 4.0
    dropout: float = 0.1


@dataclass
class PhasePlanSpec:
    peak_lr: float
    total_steps: int
    batch_size: int
    seed: int = 0
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ExperimentSpec:
    out_dir: str
    seeds: list[int]
    gen: GenConfig
    pretrain_gen_overrides: dict
    corpus_songs: dict[str, int]
    model: ModelConfig
    lora: LoraSpec
    pretrain: PhasePlanSpec
    finetune: PhasePlanSpec
    strategies: list[StrategyCell]
    decode: DecodeConfig

    def __post_init__(self):
        ids = [c.cell_id for c in self.strategies]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate strategy ids in spec: {ids}")
        if PRETRAINED_CELL in ids:
            raise ValueError(f"strategy id {PRETRAINED_CELL!r} is reserved")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be a non-empty list of distinct ints: {self.seeds}")
        if self.pretrain.seed not in self.seeds:
            raise ValueError(
                f"pretrain seed {self.pretrain.seed} is not in the seeds list {self.seeds}"
            )
        missing = set(SPLITS) - set(self.corpus_songs)
        if missing:
            raise ValueError(f"corpus_songs missing splits: {sorted(missing)}")


def default_spec(out_dir: str = "runs/default") -> ExperimentSpec:
    """The paper-shaped strategy grid at toy scale."""
    strategies = [
        StrategyCell("voc", LossConfig(strategy="voc")),
        StrategyCell("mix", LossConfig(strategy="mix")),
        StrategyCell("random", LossConfig(strategy="random")),
        StrategyCell("both", LossConfig(strategy="both")),
    ]
    for kind in ("L1", "L2"):
        for weight in (0.1, 1.0, 10.0):
            strategies.append(
                StrategyCell(
                    f"cns_{kind.lower()}_w{weight}",
                    LossConfig(strategy="cns", cns_kind=kind, weight=weight),
                )
            )
    return ExperimentSpec(
        out_dir=out_dir,
        seeds=[0, 1, 2, 3, 4],
        gen=GenConfig(),
        pretrain_gen_overrides={"jitter": 0.25, "gain_range": [0.0, 0.0]},
        corpus_songs={"pretrain": 64, "train": 64, "dev": 8, "test": 12},
        model=ModelConfig(),
        lora=LoraSpec(),
        pretrain=PhasePlanSpec(peak_lr=3e-3, total_steps=2000, batch_size=16, seed=0),
        finetune=PhasePlanSpec(peak_lr=1e-3, total_steps=1000, batch_size=8),
        decode=DecodeConfig(max_tokens=24, window_frames=64),
        strategies=strategies,
    )


# ---------------------------------------------------------------------------
# spec (de)serialization with strict keys
# ---------------------------------------------------------------------------


def _strict(cls, doc: dict, where: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown fields in {where}: {sorted(unknown)}")
    return cls(**doc)


def spec_to_doc(spec: ExperimentSpec) -> dict:
    doc = asdict(spec)
    doc["strategies"] = [
        {"id": c.cell_id, **asdict(c.loss)} for c in spec.strategies
    ]
    return doc


def spec_from_doc(doc: dict) -> ExperimentSpec:
    doc = dict(doc)
    known = set(ExperimentSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown fields in spec: {sorted(unknown)}")
    cells = []
    for entry in doc.pop("strategies"):
        entry = dict(entry)
        cell_id = entry.pop("id")
        cells.append(StrategyCell(cell_id, _strict(LossConfig, entry, f"strategy {cell_id}")))
    return ExperimentSpec(
        out_dir=doc["out_dir"],
        seeds=list(doc["seeds"]),
        gen=_strict(GenConfig, doc["gen"], "gen"),
        pretrain_gen_overrides=dict(doc["pretrain_gen_overrides"]),
        corpus_songs=dict(doc["corpus_songs"]),
        model=_strict(ModelConfig, doc["model"], "model"),
        lora=_strict(LoraSpec, doc["lora"], "lora"),
        pretrain=_strict(PhasePlanSpec, doc["pretrain"], "pretrain"),
        finetune=_strict(PhasePlanSpec, doc["finetune"], "finetune"),
        strategies=cells,
        decode=_strict(DecodeConfig, doc["decode"], "decode"),
    )


def load_spec(path) -> ExperimentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_doc(json.load(fh))


def save_spec(spec: ExperimentSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(spec_to_doc(spec), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# paths and prerequisites
# ---------------------------------------------------------------------------


def corpus_path(out: Path, split: str) -> Path:
    return out / "corpora" / f"{split}.jsonl"


def pretrain_checkpoint_path(out: Path) -> Path:
    return out / "checkpoints" / "pretrain.json"


def cell_name(cell_id: str, seed: int) -> str:
    return f"{cell_id}_s{seed}"


def cell_dir(out: Path, cell_id: str, seed: int) -> Path:
    return out / "cells" / cell_name(cell_id, seed)


def transcript_path(out: Path, cell: str, condition: str) -> Path:
    return out / "transcripts" / cell / f"{condition}.jsonl"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise SystemExit(f"missing prerequisite: {path} ({hint})")
    return path


def _split_seed_base(spec: ExperimentSpec, split: str) -> int:
    return SPLITS.index(split) * 10_000 * len(spec.gen.languages)


def _split_gen(spec: ExperimentSpec, split: str) -> GenConfig:
    if split == "pretrain":
        return split_config(spec.gen, **spec.pretrain_gen_overrides)
    return spec.gen


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(spec: ExperimentSpec, out: Path) -> None:
    (out / "corpora").mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        cfg = _split_gen(spec, split)
        samples = build_corpus(cfg, spec.corpus_songs[split], _split_seed_base(spec, split))
        write_corpus(corpus_path(out, split), cfg, samples)


def cmd_pretrain(spec: ExperimentSpec, out: Path) -> None:
    _, corpus = load_corpus(_require(corpus_path(out, "pretrain"), "run gen-data first"))
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    model = build_model(spec.model, seed=spec.pretrain.seed)
    plan = TrainPlan(
        phase="pretrain",
        loss=LossConfig(strategy="voc"),
        peak_lr=spec.pretrain.peak_lr,
        total_steps=spec.pretrain.total_steps,
        batch_size=spec.pretrain.batch_size,
        warmup_frac=spec.pretrain.warmup_frac,
        beta1=spec.pretrain.beta1,
        beta2=spec.pretrain.beta2,
        eps=spec.pretrain.eps,
        seed=spec.pretrain.seed,
    )
    run_experiment(
        plan,
        corpus,
        model,
        out / "checkpoints" / "pretrain_metrics.jsonl",
        pretrain_checkpoint_path(out),
        seed_lineage={"init_seed": spec.pretrain.seed, "plan_seed": spec.pretrain.seed},
    )


def _cell(spec: ExperimentSpec, cell_id: str) -> StrategyCell:
    for cell in spec.strategies:
        if cell.cell_id == cell_id:
            return cell
    known = [c.cell_id for c in spec.strategies]
    raise SystemExit(f"unknown strategy id {cell_id!r}; spec defines {known}")


def cmd_finetune(spec: ExperimentSpec, out: Path, cell_id: str, seed: int) -> None:
    if seed not in spec.seeds:
        raise SystemExit(f"seed {seed} is not in the spec seeds list {spec.seeds}")
    cell = _cell(spec, cell_id)
    _, corpus = load_corpus(_require(corpus_path(out, "train"), "run gen-data first"))
    model, _ = load_checkpoint(_require(pretrain_checkpoint_path(out), "run pretrain first"))

    adapter_seed = int(np.random.SeedSequence([seed, zlib.crc32(cell_id.encode())]).generate_state(1)[0])
    attach_adapters(model, spec.lora.rank, spec.lora.alpha, spec.lora.dropout, seed=adapter_seed)
    plan = TrainPlan(
        phase="finetune",
        loss=cell.loss,
        peak_lr=spec.finetune.peak_lr,
        total_steps=spec.finetune.total_steps,
        batch_size=spec.finetune.batch_size,
        warmup_frac=spec.finetune.warmup_frac,
        beta1=spec.finetune.beta1,
        beta2=spec.finetune.beta2,
        eps=spec.finetune.eps,
        seed=seed,
    )
    cdir = cell_dir(out, cell_id, seed)
    cdir.mkdir(parents=True, exist_ok=True)
    run_experiment(
        plan,
        corpus,
        model,
        cdir / "metrics.jsonl",
        cdir / "checkpoint.json",
        seed_lineage={"pretrain_seed": spec.pretrain.seed, "cell": cell_id, "seed": seed,
                      "adapter_seed": adapter_seed},
    )


def _decode_model_to_files(spec: ExperimentSpec, out: Path, cell: str, model) -> None:
    _, test = load_corpus(_require(corpus_path(out, "test"), "run gen-data first"))
    tdir = out / "transcripts" / cell
    tdir.mkdir(parents=True, exist_ok=True)
    for condition in ("mix", "voc"):
        windows = [s.x_m if condition == "mix" else s.x_v for s in test]
        token_rows = transcribe_batch(model, windows, spec.decode)
        with open(transcript_path(out, cell, condition), "w", encoding="utf-8") as fh:
            for sample, tokens in zip(test, token_rows):
                rec = {"sample_id": sample.sample_id, "condition": condition,
                       "text": detokenize(tokens)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def all_cells(spec: ExperimentSpec) -> list[str]:
    return [PRETRAINED_CELL] + [
        cell_name(c.cell_id, seed) for c in spec.strategies for seed in spec.seeds
    ]


def cmd_decode(spec: ExperimentSpec, out: Path, only: list[str] | None = None) -> None:
    for cell in only or all_cells(spec):
        if cell == PRETRAINED_CELL:
            ckpt = _require(pretrain_checkpoint_path(out), "run pretrain first")
        else:
            cell_id, seed = cell.rsplit("_s", 1)
            ckpt = _require(
                cell_dir(out, cell_id, int(seed)) / "checkpoint.json",
                f"run finetune {cell_id} --seed {seed} first",
            )
        model, _ = load_checkpoint(ckpt)
        _decode_model_to_files(spec, out, cell, model)


def _load_transcripts(out: Path, cell: str) -> dict[tuple[str, str], str]:
    hyps = {}
    for condition in ("mix", "voc"):
        with open(transcript_path(out, cell, condition), "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                hyps[(rec["sample_id"], rec["condition"])] = rec["text"]
    return hyps


def cmd_eval(spec: ExperimentSpec, out: Path) -> None:
    _, test = load_corpus(_require(corpus_path(out, "test"), "run gen-data first"))
    missing = [
        cell
        for cell in all_cells(spec)
        for cond in ("mix", "voc")
        if not transcript_path(out, cell, cond).exists()
    ]
    if missing:
        raise SystemExit(f"missing transcripts for cells: {sorted(set(missing))}")

    refs = {s.sample_id: s.text for s in test}
    subset_map = {s.sample_id: s.language for s in test}
    subsets = list(dict.fromkeys(s.language for s in test)) + ["overall"]

    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    pooled_by_cell = {}
    for cell in all_cells(spec):
        hyps = _load_transcripts(out, cell)
        details = {
            (sid, cond): wer(refs[sid], text) for (sid, cond), text in sorted(hyps.items())
        }
        report = aggregate(details, subset_map)
        (rdir / f"{cell}.csv").write_text(report_csv(report), encoding="utf-8")
        pooled_by_cell[cell] = {key: d.wer for key, d in report.pooled.items()}

    rows = [(PRETRAINED_CELL, pooled_by_cell[PRETRAINED_CELL])]
    for cell in spec.strategies:
        per_key: dict[tuple[str, str], float] = {}
        for key in pooled_by_cell[cell_name(cell.cell_id, spec.seeds[0])]:
            values = [pooled_by_cell[cell_name(cell.cell_id, s)][key] for s in spec.seeds]
            per_key[key] = float(np.median(values))
        rows.append((cell.cell_id, per_key))

    (rdir / "summary.md").write_text(comparison_markdown(rows, subsets), encoding="utf-8")
    lines = ["strategy,subset,condition,wer_median"]
    for name, cells in rows:
        for (subset, condition) in sorted(cells):
            lines.append(f"{name},{subset},{condition},{cells[(subset, condition)]:.6f}")
    (rdir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# grid orchestration
# ---------------------------------------------------------------------------


def _finetune_worker(spec_doc: dict, out_dir: str, cell_id: str, seed: int) -> str:
    cmd_finetune(spec_from_doc(spec_doc), Path(out_dir), cell_id, seed)
    return cell_name(cell_id, seed)


def _decode_worker(spec_doc: dict, out_dir: str, cell: str) -> str:
    cmd_decode(spec_from_doc(spec_doc), Path(out_dir), only=[cell])
    return cell


def cmd_grid(spec: ExperimentSpec, out: Path, jobs: int = 1) -> None:
    cmd_gen_data(spec, out)
    cmd_pretrain(spec, out)
    units = [(c.cell_id, seed) for c in spec.strategies for seed in spec.seeds]
    if jobs <= 1:
        for cell_id, seed in units:
            cmd_finetune(spec, out, cell_id, seed)
        cmd_decode(spec, out)
    else:
        doc = spec_to_doc(spec)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_finetune_worker, *zip(*[(doc, str(out), c, s) for c, s in units])))
            cells = all_cells(spec)
            list(pool.map(_decode_worker, *zip(*[(doc, str(out), c) for c in cells])))
    cmd_eval(spec, out)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxmix",
        description="dual-domain LoRA fine-tuning experiments on synthetic paired audio",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", type=Path, default=None, help="experiment spec JSON (default: built-in)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: spec out_dir)")

    common(sub.add_parser("gen-data", help="generate train/dev/test corpora"))
    common(sub.add_parser("pretrain", help="train the base model"))
    ft = sub.add_parser("finetune", help="fine-tune one strategy cell")
    common(ft)
    ft.add_argument("strategy_id", help="strategy id from the spec grid")
    ft.add_argument("--seed", type=int, required=True, help="fine-tuning seed (from the spec seeds)")
    dec = sub.add_parser("decode", help="transcribe the test split with all available models")
    common(dec)
    common(sub.add_parser("eval", help="compute WER reports and the summary table"))
    grid = sub.add_parser("grid", help="run the full pipeline")
    common(grid)
    grid.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = load_spec(args.spec) if args.spec else default_spec()
    out = Path(args.out) if args.out else Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "gen-data":
        cmd_gen_data(spec, out)
    elif args.command == "pretrain":
        cmd_pretrain(spec, out)
    elif args.command == "finetune":
        cmd_finetune(spec, out, args.strategy_id, args.seed)
    elif args.command == "decode":
        cmd_decode(spec, out)
    elif args.command == "eval":
        cmd_eval(spec, out)
    elif args.command == "grid":
        cmd_grid(spec, out, jobs=args.jobs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
