"""L1 training with Adam, checkpointing and deterministic resumption.

Step numbering: the line ``step=n`` reports the loss of the parameters
after ``n`` updates, so ``step=0`` is the freshly initialised model. A
checkpoint with ``step=n`` holds the state after ``n`` updates; resuming
from it continues with ``step=n``.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .inference import low_res_for, predict
from .metrics import format_value, psnr
from .swin3d import check_params, init_params, superformer_forward
from .volume import list_volumes, load_volume, random_crop_pair

log = logging.getLogger(__name__)

LOG_NAME = "metrics.log"
LATEST = "latest.ckpt"


def l1_loss(pred, target):
    """Mean absolute error; subgradient 0 where ``pred == target``."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s.astype(pred.dtype), (-s).astype(target.dtype)

    value = np.abs(diff).mean(dtype=np.float64).astype(pred.dtype)
    return ad.custom_op("l1_loss", value, (pred, target), bw)


def adam_step(params, grads, moments, t, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update on dicts of arrays.

    ``moments`` is ``(m, v)``; returns new ``(params, (m, v))`` without
    touching the inputs.
    """
    if t < 1:
        raise ValueError("adam step count starts at 1")
    b1, b2 = betas
    m_in, v_in = moments
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * m_in[name] + (1.0 - b1) * g
        v = b2 * v_in[name] + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_p[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_p, (new_m, new_v)


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


@dataclass
class Dataset:
    hr: list
    lr: list

    @classmethod
    def load(cls, data_dir, factors):
        paths = list_volumes(data_dir)
        if not paths:
            raise DataError(f"no .vol files in {data_dir}")
        cache = {}
        hr = [load_volume(p) for p in paths]
        lr = [low_res_for(p, v, factors, cache) for p, v in zip(paths, hr)]
        return cls(hr, lr)

    def sample(self, crop, rng):
        i = int(rng.integers(len(self.hr)))
        hr, lr, _ = random_crop_pair(self.hr[i], self.lr[i], crop, rng)
        return lr, hr


def batch_loss(params, model_cfg, batch):
    """Mean L1 over a list of ``(lr, hr)`` crops, recorded on the active tape."""
    total = None
    for lr, hr in batch:
        loss = l1_loss(superformer_forward(lr, params, model_cfg), hr)
        total = loss if total is None else ad.add(total, loss)
    return ad.mul(total, 1.0 / len(batch))


def validation_psnr(params, model_cfg, data):
    vals = [psnr(predict(lr, params, model_cfg).array, hr.array) for hr, lr in zip(data.hr, data.lr)]
    return math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))


def format_log_line(step, loss, value=None):
    line = f"step={step} loss={loss!r}"
    if value is not None:
        line += f" psnr={format_value(value)}"
    return line


def _truncate_log(path, step):
    """Keep only lines for steps before ``step``."""
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if int(ln.split()[0].split("=")[1]) < step]
    path.write_text("".join(ln + "\n" for ln in kept))


class Trainer:
    """Owns parameters, optimiser moments and the sampling generator."""

    def __init__(self, model_cfg, train_cfg, data):
        crop = train_cfg.crop
        model_cfg.check_input((crop, crop, crop))
        small = [v.dims for v in data.hr if any(crop > n for n in v.dims)]
        if small:
            raise DataError(f"crop {crop} exceeds volume dims {small[0]}")
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.data = data
        self.params = {k: t.data for k, t in init_params(model_cfg, train_cfg.init_seed).items()}
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self.rng = np.random.default_rng(train_cfg.seed)

    def tensors(self):
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def train_step(self):
        """Loss at the current parameters, then one Adam update. Returns the loss."""
        cfg = self.train_cfg
        batch = [self.data.sample(cfg.crop, self.rng) for _ in range(cfg.batch)]
        params = self.tensors()
        with Tape() as tape:
            loss = batch_loss(params, self.model_cfg, batch)
        tape.backward(loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {self.step}")
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in params.items()}
        grads = clip_grads(grads, cfg.grad_clip)
        self.params, (self.m, self.v) = adam_step(
            self.params, grads, (self.m, self.v), self.step + 1, cfg.lr, cfg.betas, cfg.eps
        )
        self.step += 1
        return value

    def checkpoint(self):
        return Checkpoint(
            step=self.step,
            params=dict(self.params),
            adam_m=dict(self.m),
            adam_v=dict(self.v),
            rng_state=self.rng.bit_generator.state,
            model_config=self.model_cfg,
            train_config=self.train_cfg,
        )

    def restore(self, ckpt):
        if ckpt.model_config.hash() != self.model_cfg.hash():
            raise ConfigError(
                f"checkpoint model config {ckpt.model_config.hash()} differs from {self.model_cfg.hash()}"
            )
        check_params({k: Tensor(v) for k, v in ckpt.params.items()}, self.model_cfg)
        self.params = dict(ckpt.params)
        self.m = dict(ckpt.adam_m)
        self.v = dict(ckpt.adam_v)
        self.step = ckpt.step
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.rng_state


def train(model_cfg, train_cfg, data_dir, out_dir, resume=None, on_step=None):
    """Run training until ``train_cfg.iterations`` updates have been applied.

    Writes ``metrics.log``, ``checkpoint_<step>.ckpt`` at every checkpoint
    interval and ``latest.ckpt`` under ``out_dir``. ``resume`` is a
    checkpoint path, or ``True`` for ``out_dir/latest.ckpt``. Returns the
    final :class:`Trainer`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = Dataset.load(data_dir, train_cfg.factors)
    trainer = Trainer(model_cfg, train_cfg, data)
    log_path = out / LOG_NAME
    if resume:
        path = out / LATEST if resume is True else Path(resume)
        trainer.restore(load_checkpoint(path, expect_model=model_cfg))
        _truncate_log(log_path, trainer.step)
        log.info("resumed from %s at step %d", path, trainer.step)
    else:
        log_path.write_text("")
    with open(log_path, "a") as fh:
        while trainer.step < train_cfg.iterations:
            step = trainer.step
            value = None
            if step % train_cfg.eval_interval == 0:
                value = validation_psnr(
                    {k: Tensor(v) for k, v in trainer.params.items()}, model_cfg, data
                )
            t0 = time.perf_counter()
            loss = trainer.train_step()
            line = format_log_line(step, loss, value)
            fh.write(line + "\n")
            fh.flush()
            log.info("%s time=%.3fs", line, time.perf_counter() - t0)
            if on_step is not None:
                on_step(step, loss)
            if trainer.step % train_cfg.checkpoint_interval == 0 or trainer.step == train_cfg.iterations:
                ckpt = trainer.checkpoint()
                save_checkpoint(ckpt, out / f"checkpoint_{trainer.step:07d}.ckpt")
                save_checkpoint(ckpt, out / LATEST)
    return trainer


def read_log(path):
    """Parse ``metrics.log`` into a list of dicts."""
    rows = []
    for line in Path(path).read_text().splitlines():
        row = {}
        for field in line.split():
            key, _, val = field.partition("=")
            row[key] = int(val) if key == "step" else (math.inf if val == "INF" else float(val))
        rows.append(row)
    return rows
