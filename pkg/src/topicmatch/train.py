"""Training on streamed synthetic pairs."""
import csv
import logging
import math
import os
import time

import numpy as np
import torch

from .checkpoint import load_into, read_checkpoint, save_training_state
from .matcher import TopicMatcher
from .numerics import NumericError, make_rng
from .synth import gen_pair

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "total", "coarse_pos", "coarse_neg", "fine")


def learning_rate(cfg, step):
    """Linear warmup then cosine decay to zero over ``cfg.steps``."""
    if cfg.steps == 0:
        return cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


def training_seeds(cfg, step):
    rng = make_rng(cfg.seed, 0x545241494E, step)
    return [int(s) for s in rng.integers(0, 2 ** 62, size=cfg.batch_size)]


def training_batch(cfg, step):
    return [gen_pair(s, cfg.image_size, cfg.perspective, cfg.jitter) for s in training_seeds(cfg, step)]


def build(cfg):
    torch.manual_seed(cfg.seed)
    model = TopicMatcher(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, foreach=False)
    return model, optimizer


def train(cfg, out_dir, resume=None, stop_at=None, on_step=None):
    """Train for ``cfg.steps`` steps (or until ``stop_at``); returns the model.

    Writes ``loss_curve.csv``, periodic ``ckpt_<step>.tfm`` and ``final.tfm``.
    Each step's data and topic samples depend only on (seed, step), so a run
    resumed from a checkpoint replays the uninterrupted trajectory.
    """
    os.makedirs(out_dir, exist_ok=True)
    model, optimizer = build(cfg)
    start = 0
    if resume:
        entries, _, _ = read_checkpoint(resume, cfg)
        start = load_into(model, entries, optimizer)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    curve_path = os.path.join(out_dir, "loss_curve.csv")
    mode = "a" if resume and os.path.exists(curve_path) else "w"
    model.train()
    with open(curve_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOSS_COLUMNS)
        for step in range(start, end):
            t0 = time.perf_counter()
            lr = learning_rate(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            losses = model.training_losses(training_batch(cfg, step), cfg.seed, step)
            total = losses["total"]
            if not torch.isfinite(total):
                raise NumericError(f"non-finite loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            values = {k: float(losses[k].detach()) for k in LOSS_COLUMNS[2:]}
            row = [step, f"{lr:.8g}"] + [f"{values[k]:.8g}" for k in LOSS_COLUMNS[2:]]
            writer.writerow(row)
            if on_step:
                on_step(step, losses)
            if step % 50 == 0:
                fh.flush()
                log.info("step %d lr %.4g loss %.4f (pos %.4f neg %.4f fine %.4f) %.2fs",
                         step, lr, values["total"], values["coarse_pos"],
                         values["coarse_neg"], values["fine"],
                         time.perf_counter() - t0)
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < end:
                save_training_state(os.path.join(out_dir, f"ckpt_{done}.tfm"),
                                    model, optimizer, done, cfg)
    save_training_state(os.path.join(out_dir, "final.tfm"), model, optimizer, max(end, start), cfg)
    return model


def read_loss_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOSS_COLUMNS}
