"""Pretraining and fine-tuning loops: Adam with a linear warmup/decay
schedule, input-selection strategies over paired samples, and the
per-step combined loss.

Strategies: voc / mix / random train on a single domain per sample;
both and cns run the paired vocal and mixture inputs through the shared
model (stacked into one batch for speed) and average the two
transcription losses, with cns adding the weighted encoder-consistency
term. One backward pass on the combined loss per step, then one Adam
update of that phase's trainable parameters.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from voxmix import numerics as nm
from voxmix.losses import LossBreakdown, LossConfig, alt_loss, combined_loss, consistency_loss
from voxmix.model import TranscriberModel, decode_batch, encode_batch, save_checkpoint, set_trainable
from voxmix.numerics import Tensor, backward, zero_grads
from voxmix.synthdata import PAD_ID, PairedSample

PHASES = ("pretrain", "finetune")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class TrainPlan:
    phase: str
    loss: LossConfig
    peak_lr: float
    total_steps: int
    batch_size: int = 8
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}, expected one of {PHASES}")
        if not 0 < self.warmup_frac < 1:
            raise ValueError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 2:
            raise ValueError(f"total_steps must be >= 2, got {self.total_steps}")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["loss"] = asdict(self.loss)
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainPlan":
        doc = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainPlan fields: {sorted(unknown)}")
        loss_doc = doc.pop("loss", {})
        loss_unknown = set(loss_doc) - set(LossConfig.__dataclass_fields__)
        if loss_unknown:
            raise ValueError(f"unknown LossConfig fields: {sorted(loss_unknown)}")
        return cls(loss=LossConfig(**loss_doc), **doc)


def make_schedule(total_steps: int, peak_lr: float, warmup_frac: float = 0.1):
    """Linear warmup to peak at step W = ceil(warmup_frac * T), linear decay to 0 at T."""
    if total_steps < 2:
        raise ValueError(f"total_steps must be >= 2, got {total_steps}")
    warmup = math.ceil(warmup_frac * total_steps)

    def lr_at(step: int) -> float:
        if step <= warmup:
            return peak_lr * step / warmup
        return peak_lr * (total_steps - step) / (total_steps - warmup)

    return lr_at


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_optimizer(params: list[Tensor]) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(p.values) for p in params],
        v=[np.zeros_like(p.values) for p in params],
    )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} grads for {len(params)} params")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"parameter {i} has no gradient")
        if not np.isfinite(g).all():
            raise ValueError(
                f"non-finite gradient in parameter {i} "
                f"(shape {g.shape}) at optimizer step {state.step + 1}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# strategy input selection and batch assembly
# ---------------------------------------------------------------------------


def select_inputs(strategy: str, sample: PairedSample, rng: np.random.Generator):
    """Which domain(s) of a paired sample this strategy trains on."""
    if strategy == "voc":
        return [("v", sample.x_v)]
    if strategy == "mix":
        return [("m", sample.x_m)]
    if strategy == "random":
        return [("v", sample.x_v)] if rng.random() < 0.5 else [("m", sample.x_m)]
    if strategy in ("both", "cns"):
        return [("v", sample.x_v), ("m", sample.x_m)]
    raise ValueError(f"unknown strategy {strategy!r}")


def pad_batch(samples: list[PairedSample]):
    """Stack variable-length samples into padded arrays plus validity masks."""
    bsz = len(samples)
    t_max = max(s.duration_frames for s in samples)
    l_max = max(len(s.tokens) - 1 for s in samples)
    feat = samples[0].x_v.shape[1]

    x_v = np.zeros((bsz, t_max, feat))
    x_m = np.zeros((bsz, t_max, feat))
    frame_mask = np.zeros((bsz, t_max), dtype=bool)
    y_in = np.full((bsz, l_max), PAD_ID, dtype=np.int64)
    y_out = np.full((bsz, l_max), PAD_ID, dtype=np.int64)
    for i, s in enumerate(samples):
        t = s.duration_frames
        x_v[i, :t] = s.x_v
        x_m[i, :t] = s.x_m
        frame_mask[i, :t] = True
        toks = np.asarray(s.tokens, dtype=np.int64)
        y_in[i, : toks.size - 1] = toks[:-1]
        y_out[i, : toks.size - 1] = toks[1:]
    return x_v, x_m, frame_mask, y_in, y_out


@dataclass
class TrainMetrics:
    step: int
    lr: float
    breakdown: LossBreakdown
    wall_time: float
    avg_total: float


@dataclass
class TrainState:
    params: list[Tensor]
    optimizer: OptimizerState
    schedule: object
    domain_rng: np.random.Generator
    dropout_rng: np.random.Generator
    step: int = 0
    total_seen: float = 0.0


def make_train_state(model: TranscriberModel, plan: TrainPlan) -> TrainState:
    if plan.phase == "finetune" and not model.adapters:
        raise ValueError("finetune phase needs a model with adapters attached")
    params = set_trainable(model, plan.phase)
    seqs = np.random.SeedSequence(plan.seed).spawn(3)
    return TrainState(
        params=params,
        optimizer=init_optimizer(params),
        schedule=make_schedule(plan.total_steps, plan.peak_lr, plan.warmup_frac),
        domain_rng=np.random.default_rng(seqs[1]),
        dropout_rng=np.random.default_rng(seqs[2]),
    )


def data_rng_for(plan: TrainPlan) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(plan.seed).spawn(3)[0])


def _dual_losses(model, samples, plan, state):
    """One stacked forward over [vocal | mixture] halves of the paired batch."""
    bsz = len(samples)
    x_v, x_m, frame_mask, y_in, y_out = pad_batch(samples)
    x2 = np.concatenate([x_v, x_m], axis=0)
    mask2 = np.concatenate([frame_mask, frame_mask], axis=0)
    yin2 = np.concatenate([y_in, y_in], axis=0)

    enc = encode_batch(model, x2, mask2, True, state.dropout_rng)
    logits = decode_batch(model, enc, mask2, yin2, True, state.dropout_rng)
    l_v = alt_loss(nm.narrow(logits, 0, bsz), y_out)
    l_m = alt_loss(nm.narrow(logits, bsz, 2 * bsz), y_out)

    if plan.loss.strategy == "cns":
        e_v = nm.narrow(enc, 0, bsz)
        e_m = nm.narrow(enc, bsz, 2 * bsz)
        l_cns = consistency_loss(e_v, e_m, plan.loss.cns_kind, frame_mask)
        weight = plan.loss.weight
    else:
        l_cns = Tensor(0.0)
        weight = 0.0
    total = combined_loss(l_v, l_m, l_cns, weight)
    breakdown = LossBreakdown(
        l_alt_v=l_v.item(),
        l_alt_m=l_m.item(),
        l_cns=l_cns.item() if plan.loss.strategy == "cns" else None,
        l_total=total.item(),
    )
    return total, breakdown


def _single_domain_losses(model, samples, plan, state):
    """Forward over per-sample selected domains, grouped as [vocal | mixture]."""
    picks = [select_inputs(plan.loss.strategy, s, state.domain_rng)[0] for s in samples]
    v_idx = [i for i, (tag, _) in enumerate(picks) if tag == "v"]
    m_idx = [i for i, (tag, _) in enumerate(picks) if tag == "m"]
    ordered = [samples[i] for i in v_idx] + [samples[i] for i in m_idx]
    n_v = len(v_idx)

    x_v, x_m, frame_mask, y_in, y_out = pad_batch(ordered)
    x = np.concatenate([x_v[:n_v], x_m[n_v:]], axis=0)
    enc = encode_batch(model, x, frame_mask, True, state.dropout_rng)
    logits = decode_batch(model, enc, frame_mask, y_in, True, state.dropout_rng)

    tokens_v = int((y_out[:n_v] != PAD_ID).sum())
    tokens_m = int((y_out[n_v:] != PAD_ID).sum())
    l_v = alt_loss(nm.narrow(logits, 0, n_v), y_out[:n_v]) if n_v else None
    l_m = alt_loss(nm.narrow(logits, n_v, len(ordered)), y_out[n_v:]) if n_v < len(ordered) else None

    if l_v is not None and l_m is not None:
        total_tokens = tokens_v + tokens_m
        total = nm.add(
            nm.scale(l_v, tokens_v / total_tokens), nm.scale(l_m, tokens_m / total_tokens)
        )
    else:
        total = l_v if l_v is not None else l_m
    breakdown = LossBreakdown(
        l_alt_v=l_v.item() if l_v is not None else None,
        l_alt_m=l_m.item() if l_m is not None else None,
        l_cns=None,
        l_total=total.item(),
    )
    return total, breakdown


def train_step(
    model: TranscriberModel,
    batch: list[PairedSample],
    plan: TrainPlan,
    state: TrainState,
) -> TrainMetrics:
    """Zero grads, one forward/backward on the strategy loss, one Adam update."""
    t0 = time.perf_counter()
    step = state.step + 1
    lr = state.schedule(step)

    zero_grads(state.params)
    if plan.loss.strategy in ("both", "cns"):
        total, breakdown = _dual_losses(model, batch, plan, state)
    else:
        total, breakdown = _single_domain_losses(model, batch, plan, state)

    if not np.isfinite(breakdown.l_total):
        raise NonFiniteLossError(step, breakdown.l_total)
    backward(total)
    adam_step(
        state.params,
        [p.grad for p in state.params],
        state.optimizer,
        lr,
        plan.beta1,
        plan.beta2,
        plan.eps,
    )
    state.step = step
    state.total_seen += breakdown.l_total
    return TrainMetrics(
        step=step,
        lr=lr,
        breakdown=breakdown,
        wall_time=time.perf_counter() - t0,
        avg_total=state.total_seen / step,
    )


def _batches(corpus, batch_size, rng):
    while True:
        order = rng.permutation(len(corpus))
        for i in range(0, len(order), batch_size):
            yield [corpus[j] for j in order[i : i + batch_size]]


def metrics_record(metrics: TrainMetrics) -> dict:
    """The deterministic per-step log row (wall time deliberately excluded)."""
    b = metrics.breakdown
    return {
        "step": metrics.step,
        "lr": metrics.lr,
        "l_v": b.l_alt_v,
        "l_m": b.l_alt_m,
        "l_cns": b.l_cns,
        "l_total": b.l_total,
    }


def run_experiment(
    plan: TrainPlan,
    corpus: list[PairedSample],
    model: TranscriberModel,
    metrics_path,
    checkpoint_path=None,
    seed_lineage: dict | None = None,
) -> list[TrainMetrics]:
    """Run one training phase to completion; deterministic given plan and corpus.

    Emits a JSON-lines metrics log, and a final checkpoint when a path is given.
    A non-finite loss aborts with a pointer to the last good checkpoint.
    """
    if not corpus:
        raise ValueError("empty corpus")
    state = make_train_state(model, plan)
    batches = _batches(corpus, plan.batch_size, data_rng_for(plan))
    history = []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for _ in range(plan.total_steps):
            try:
                metrics = train_step(model, next(batches), plan, state)
            except NonFiniteLossError as err:
                last_good = str(checkpoint_path) if checkpoint_path else "none saved"
                raise RuntimeError(
                    f"{err}; resume from last good checkpoint: {last_good}"
                ) from err
            history.append(metrics)
            fh.write(json.dumps(metrics_record(metrics), sort_keys=True) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, seed_lineage or {"plan_seed": plan.seed})
    return history
