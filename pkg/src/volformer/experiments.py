"""Desk-scale experiments: single-phantom overfit and the variant ablation.

Run the ablation directly with ``python -m volformer.experiments``.
"""

import argparse
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ModelConfig, TrainConfig
from .inference import evaluate
from .metrics import format_value
from .swin3d import param_count
from .train import read_log, train
from .volume import save_volume, synth_phantom

VARIANT_ROWS = [("sr_volume", "SR-Volume"), ("sr_features", "SR-Features"), ("sr_avg", "SR-Avg"), ("full", "SuperFormer")]


@dataclass
class OverfitResult:
    sr_psnr: float
    baseline_psnr: float
    steps: int
    seconds: float
    losses: list

    @property
    def gain(self):
        return self.sr_psnr - self.baseline_psnr

    def loss_trend_ok(self, window=200):
        """Loss at every step is above the loss ``window`` steps later."""
        l = self.losses
        return all(l[i + window] < l[i] for i in range(len(l) - window))


def overfit(workdir, steps=1000, lr=2e-4, seed=0, size=32):
    """Train the toy network on one phantom and compare against its LR input.

    The LR input is already the trilinear interpolation of the truncated
    k-space volume, so its PSNR against HR is the interpolation baseline.
    """
    workdir = Path(workdir)
    data = workdir / "data"
    data.mkdir(parents=True, exist_ok=True)
    hr = synth_phantom(seed, (size, size, size))
    save_volume(hr, data / "phantom.vol")
    cfg = ModelConfig.toy()
    tcfg = TrainConfig(
        lr=lr, batch=1, crop=size, iterations=steps, checkpoint_interval=steps, eval_interval=steps, seed=seed
    )
    t0 = time.perf_counter()
    train(cfg, tcfg, data, workdir / "run")
    seconds = time.perf_counter() - t0
    report = evaluate(load_checkpoint(workdir / "run" / "latest.ckpt"), data)
    losses = [row["loss"] for row in read_log(workdir / "run" / "metrics.log")]
    return OverfitResult(report.subjects[0].psnr, report.baseline.subjects[0].psnr, steps, seconds, losses)


def check_overfit():
    with tempfile.TemporaryDirectory() as tmp:
        res = overfit(tmp)
    ok = res.gain >= 1.0 and res.seconds < 1800
    return ok, (
        f"SR {res.sr_psnr:.2f} dB vs trilinear {res.baseline_psnr:.2f} dB "
        f"(+{res.gain:.2f}) after {res.steps} steps in {res.seconds:.0f}s"
    )


@dataclass
class AblationRow:
    variant: str
    label: str
    params: int
    psnr: tuple
    ssim: tuple
    nrmse: tuple


def ablation(workdir, steps=150, train_seeds=(0, 1), test_seeds=(10,), size=32, crop=16, lr=1e-3):
    """Train and evaluate every variant on the same phantoms; return one row each."""
    workdir = Path(workdir)
    train_dir, test_dir = workdir / "train", workdir / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    for s in train_seeds:
        save_volume(synth_phantom(s, (size,) * 3), train_dir / f"p{s:03d}.vol")
    for s in test_seeds:
        save_volume(synth_phantom(s, (size,) * 3), test_dir / f"p{s:03d}.vol")
    rows = []
    baseline = None
    for variant, label in VARIANT_ROWS:
        cfg = ModelConfig.toy(variant=variant)
        tcfg = TrainConfig(lr=lr, batch=2, crop=crop, iterations=steps, checkpoint_interval=steps, eval_interval=steps)
        out = workdir / variant
        train(cfg, tcfg, train_dir, out)
        report = evaluate(load_checkpoint(out / "latest.ckpt"), test_dir)
        agg = report.aggregate()
        baseline = report.baseline.aggregate()
        rows.append(AblationRow(variant, label, param_count(cfg), agg["psnr"], agg["ssim"], agg["nrmse"]))
    rows.insert(0, AblationRow("trilinear", "Trilinear", 0, baseline["psnr"], baseline["ssim"], baseline["nrmse"]))
    return rows


def _pm(pair, digits=4):
    m, s = pair
    if math.isinf(m):
        return format_value(m)
    return f"{m:.{digits}f}±{s:.{digits}f}"


def format_table(rows):
    """Variant table: method, parameter count, PSNR, SSIM, NRMSE as mean±std."""
    header = f"{'Method':<12} {'#Params':>8} {'PSNR':>18} {'SSIM':>15} {'NRMSE':>15}"
    lines = [header, "-" * len(header)]
    for r in rows:
        params = "-" if r.params == 0 else str(r.params)
        lines.append(f"{r.label:<12} {params:>8} {_pm(r.psnr):>18} {_pm(r.ssim):>15} {_pm(r.nrmse):>15}")
    return "\n".join(lines)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m volformer.experiments", description=__doc__)
    parser.add_argument("--out", type=Path, default=None, help="work directory (default: temporary)")
    parser.add_argument("--steps", type=int, default=150)
    args = parser.parse_args(argv)
    if args.out is None:
        with tempfile.TemporaryDirectory() as tmp:
            rows = ablation(tmp, steps=args.steps)
    else:
        rows = ablation(args.out, steps=args.steps)
    print(format_table(rows))


if __name__ == "__main__":
    main()
