"""Toy training: AdamW with linear warmup/decay, loss traces, checkpoints.

Deliberately single threaded and deterministic: batches cycle through the
encoded corpus in order and all sampling comes from one counter-based
stream, so the same seed reproduces a bit-identical loss trace.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NumericError, Rng, Tape, Tensor, add, mul
from .corpus import Batch, EncodedLine, Vocab, build_vocab, encode_corpus
from .model import FunnelModel, ModelConfig, generator_config
from .objectives import (DISC_LOSS_WEIGHT, GENERATOR_SIZE_MULTIPLIER, electra_step,
                         mlm_loss, sample_mask_single, sample_mask_span)


class TrainingDiverged(ArithmeticError):
    """Loss became non-finite; carries the failing step index."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"loss is not finite at step {step}")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_steps: int = 20


@dataclass
class TrainSettings:
    """Knobs of the toy loop, loadable from the same JSON as the model config."""

    steps: int = 300
    batch_size: int = 8
    seq_len: int = 16
    objective: str = "mlm"       # "mlm" | "electra"
    mask_sampler: str = "single"  # "single" | "span"
    mask_rate: float = 0.15
    disc_loss_weight: float = DISC_LOSS_WEIGHT
    gen_size_multiplier: float = GENERATOR_SIZE_MULTIPLIER
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


class AdamW:
    """Adam with decoupled weight decay; decay skips biases and norm params."""

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: OptimizerConfig):
        self.named = named_params
        self.cfg = cfg
        self.m = [np.zeros_like(t.data) for _, t in named_params]
        self.v = [np.zeros_like(t.data) for _, t in named_params]
        self.t = 0

    @staticmethod
    def decays(name: str) -> bool:
        return not (name.endswith(("_g", "_b", "ln_g", "ln_b")) or "/b_" in name
                    or name.endswith(("/b1", "/b2")))

    def step(self, tape: Tape, lr: float) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, (name, p) in enumerate(self.named):
            g = tape.grad(p)
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
            if c.weight_decay and self.decays(name):
                update = update + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def linear_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then linear decay to zero at ``total``."""
    if total <= 0:
        return base_lr
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total == warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float


def _sample_plan(settings: TrainSettings, line: EncodedLine, rng: Rng):
    if settings.mask_sampler == "span":
        return sample_mask_span(line.token_ids, line.word_boundaries,
                                rate=settings.mask_rate, rng=rng)
    return sample_mask_single(line.token_ids, rate=settings.mask_rate, rng=rng)


def train_toy(config: ModelConfig, corpus_lines: list[str], settings: TrainSettings,
              out_dir: str | Path | None = None) -> list[TraceRow]:
    """Run the toy loop; returns the per-step loss trace.

    ``config.vocab_size`` is shrunk in place to the size of the built
    vocabulary so the saved config matches the checkpoint.  When
    ``out_dir`` is given, writes ``trace.csv`` (step,loss,lr),
    ``summary.json``, ``vocab.txt``, a copy of the config and a final
    ``model.ftnt`` checkpoint there.
    """
    vocab = build_vocab(corpus_lines, config.vocab_size)
    config.vocab_size = len(vocab)
    lines = encode_corpus(corpus_lines, vocab, settings.seq_len)
    if not lines:
        raise ValueError("empty corpus")

    model = FunnelModel(config)
    rng = Rng(config.seed)
    if settings.objective == "electra":
        gen = FunnelModel(generator_config(config, settings.gen_size_multiplier))
        head_rng = Rng(config.seed + 2)
        disc_head = (
            Tensor(head_rng.truncated_normal((config.hidden,), 0.02), requires_grad=True),
            Tensor(np.zeros(()), requires_grad=True),
        )
        named = ([("disc/" + n, t) for n, t in model.trainable()]
                 + [("gen/" + n, t) for n, t in gen.trainable()]
                 + [("disc/head/w", disc_head[0]), ("disc/head/b", disc_head[1])])
    elif settings.objective == "mlm":
        gen = None
        disc_head = None
        named = model.trainable()
    else:
        raise ValueError(f"unknown objective {settings.objective!r}")

    opt = AdamW(named, settings.optimizer)
    trace: list[TraceRow] = []
    for step in range(settings.steps):
        batch = Batch.stack([lines[(step * settings.batch_size + i) % len(lines)]
                             for i in range(settings.batch_size)])
        with Tape() as tape:
            total = None
            used = 0
            try:
                for line in batch.sequences():
                    plan = _sample_plan(settings, line, rng)
                    if len(plan) == 0:
                        continue
                    if settings.objective == "electra":
                        gen_loss, disc_loss, _ = electra_step(gen, model, disc_head,
                                                              line, plan, rng)
                        loss = add(gen_loss, mul(disc_loss, settings.disc_loss_weight))
                    else:
                        hidden = model.token_hidden(plan.apply(line.token_ids),
                                                    line.pad_mask, rng=rng)
                        loss = mlm_loss(hidden, model.params["embed/token"], plan)
                    total = loss if total is None else add(total, loss)
                    used += 1
            except NumericError as e:
                raise TrainingDiverged(step) from e
            if total is None:
                continue
            total = mul(total, 1.0 / used)
            if not math.isfinite(total.item()):
                raise TrainingDiverged(step)
            tape.backward(total)
        lr = linear_schedule(step, settings.steps, settings.optimizer.warmup_steps,
                             settings.optimizer.lr)
        opt.step(tape, lr)
        trace.append(TraceRow(step, total.item(), lr))

    if out_dir is not None:
        _write_outputs(Path(out_dir), config, settings, model, vocab, trace)
    return trace


def _write_outputs(out: Path, config: ModelConfig, settings: TrainSettings,
                   model: FunnelModel, vocab: Vocab, trace: list[TraceRow]) -> None:
    from .checkpoint import save

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for row in trace:
            w.writerow([row.step, repr(row.loss), repr(row.lr)])
    summary = {
        "steps": len(trace),
        "final_loss": trace[-1].loss if trace else None,
        "objective": settings.objective,
        "mask_sampler": settings.mask_sampler,
        "vocab_size": len(vocab),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "config.json").write_text(config.to_json())
    vocab.save(out / "vocab.txt")
    save(model.params, out / "model.ftnt")


def settings_from_json(d: dict) -> TrainSettings:
    """Build TrainSettings from the flat keys of a config's train section."""
    opt_keys = {f for f in OptimizerConfig.__dataclass_fields__}
    s_keys = {f for f in TrainSettings.__dataclass_fields__} - {"optimizer"}
    unknown = set(d) - opt_keys - s_keys
    if unknown:
        raise ValueError(f"unknown training fields: {sorted(unknown)}")
    opt = OptimizerConfig(**{k: v for k, v in d.items() if k in opt_keys})
    settings = TrainSettings(**{k: v for k, v in d.items() if k in s_keys})
    settings.optimizer = opt
    return settings
