"""Built-in self checks: gradients, roundtrips, the shifted-window oracle and
k-space properties. Each check returns ``(ok, detail)``.

Setting ``VOLFORMER_SELFTEST_CORRUPT=bias_index`` corrupts one entry of
the relative position index for the duration of the run; the suite must
then fail. This exists to prove the checks can fail.
"""

import itertools
import os
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import swin3d
from .autodiff import Tensor
from .checkpoint import from_bytes, to_bytes
from .config import ModelConfig, TrainConfig
from .degrade import degrade, fft3d
from .gradcheck import check_gradients
from .train import Dataset, Trainer
from .volume import Volume, load_volume, save_volume, synth_phantom

CORRUPT_ENV = "VOLFORMER_SELFTEST_CORRUPT"


@contextmanager
def _maybe_corrupt():
    mode = os.environ.get(CORRUPT_ENV, "")
    if mode != "bias_index":
        yield
        return
    original = swin3d.relative_position_index

    def corrupted(window):
        index = original(window).copy()
        index[0, -1] = index[0, 0]
        return index

    swin3d.relative_position_index = corrupted
    try:
        yield
    finally:
        swin3d.relative_position_index = original


def check_op_gradients(seeds=3):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(seeds):
        a = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((4, 5)))
        g, be = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        x = Tensor(rng.standard_normal((2, 5, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
        cases = [
            (lambda a, b: ad.sum_(ad.matmul(a, b)), [a, b]),
            (lambda a: ad.sum_(ad.mul(ad.softmax(a), a)), [a]),
            (lambda a, g, be: ad.sum_(ad.mul(ad.layer_norm(a, g, be), a)), [a, g, be]),
            (lambda a: ad.sum_(ad.gelu(a)), [a]),
            (lambda x, w: ad.sum_(ad.mul(ad.conv3d(x, w, padding=1), ad.conv3d(x, w, padding=1))), [x, w]),
        ]
        for f, inputs in cases:
            worst = max(worst, *check_gradients(f, inputs, h=1e-6))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def check_model_gradient(seed=0):
    cfg = ModelConfig.toy()
    rng = np.random.default_rng(seed)
    params = swin3d.init_params(cfg, seed, np.float64)
    for t in params.values():
        t.data += rng.standard_normal(t.shape) * 0.05
    names = list(params)
    lr = Tensor(rng.random((1, 8, 8, 8)))
    weights = rng.standard_normal((1, 8, 8, 8))

    def f(*tensors):
        out = swin3d.superformer_forward(lr, dict(zip(names, tensors)), cfg)
        return ad.sum_(ad.mul(out, weights))

    errs = check_gradients(f, [params[n] for n in names], h=1e-5, max_entries=2, rng=rng, floor=1e-6)
    worst = max(errs)
    return worst < 1e-3, f"max rel err {worst:.2e} over {len(names)} tensors"


def check_relative_index():
    for m in (2, 3, 4):
        index = swin3d.relative_position_index(m)
        coords = list(itertools.product(range(m), repeat=3))
        seen = {}
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                delta = tuple(p - q for p, q in zip(a, b))
                if seen.setdefault(delta, index[i, j]) != index[i, j]:
                    return False, f"M={m}: delta {delta} maps to two indices"
        if len(set(seen.values())) != (2 * m - 1) ** 3:
            return False, f"M={m}: {len(set(seen.values()))} distinct indices"
    return True, "M in {2,3,4}"


def reference_shifted_attention(x, params, prefix, cfg):
    """Direct attention over the non-cyclic shifted partition of ``x[h,w,d,C]``."""
    grid = x.shape[:3]
    m, heads = cfg.window, cfg.heads
    shift = swin3d.shift_sizes(grid, m)
    c = x.shape[-1]
    dh = c // heads
    p = {k[len(prefix) + 1 :]: v.data.astype(np.float64) for k, v in params.items() if k.startswith(prefix)}
    labels = [(np.arange(n) - s) // m for n, s in zip(grid, shift)]
    span = 2 * m - 1
    out = np.zeros(x.shape)
    for lab in itertools.product(*[np.unique(v) for v in labels]):
        coords = np.array(list(itertools.product(*[np.flatnonzero(v == l) for v, l in zip(labels, lab)])))
        tokens = x[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.float64)
        qkv = tokens @ p["qkv.weight"] + p["qkv.bias"]
        q, k, v = (qkv[:, i * c : (i + 1) * c].reshape(-1, heads, dh) for i in range(3))
        d = coords[:, None, :] - coords[None, :, :] + (m - 1)
        bias = p["bias_table"][d[..., 0] * span * span + d[..., 1] * span + d[..., 2]]
        outs = []
        for h in range(heads):
            logits = q[:, h] @ k[:, h].T / np.sqrt(dh) + bias[..., h]
            a = np.exp(logits - logits.max(axis=1, keepdims=True))
            outs.append((a / a.sum(axis=1, keepdims=True)) @ v[:, h])
        out[coords[:, 0], coords[:, 1], coords[:, 2]] = np.concatenate(outs, 1) @ p["proj.weight"] + p["proj.bias"]
    return out


def check_swmsa_oracle():
    cfg = ModelConfig(c_emb=8, heads=2, window=4, k_rstb=1, l_stl=2)
    rng = np.random.default_rng(1)
    params = {
        "a.qkv.weight": Tensor(rng.standard_normal((8, 24)).astype(np.float32) * 0.5),
        "a.qkv.bias": Tensor(rng.standard_normal(24).astype(np.float32) * 0.1),
        "a.bias_table": Tensor(rng.standard_normal((343, 2)).astype(np.float32)),
        "a.proj.weight": Tensor(rng.standard_normal((8, 8)).astype(np.float32) * 0.5),
        "a.proj.bias": Tensor(rng.standard_normal(8).astype(np.float32) * 0.1),
    }
    worst = 0.0
    for grid in ((8, 8, 8), (16, 8, 8)):
        x = rng.standard_normal(grid + (8,)).astype(np.float32)
        got = swin3d.window_attention(Tensor(x), params, "a", cfg, shifted=True).data
        worst = max(worst, float(np.abs(got - reference_shifted_attention(x, params, "a", cfg)).max()))
    return worst < 1e-5, f"max abs diff {worst:.2e}"


def check_roundtrips():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((8, 8, 12, 3)).astype(np.float32))
    if swin3d.window_reverse(swin3d.window_partition(x, 4), 4, (8, 8, 12)).data.tobytes() != x.data.tobytes():
        return False, "window partition"
    if ad.roll3d(ad.roll3d(x, (-2, -2, -2)), (2, 2, 2)).data.tobytes() != x.data.tobytes():
        return False, "cyclic shift"
    if ad.reshape(ad.permute(ad.permute(x, (3, 0, 2, 1)), (1, 3, 2, 0)), x.shape).data.tobytes() != x.data.tobytes():
        return False, "permute"
    with tempfile.TemporaryDirectory() as tmp:
        v = synth_phantom(0, (16, 16, 16))
        save_volume(v, Path(tmp) / "v.vol")
        if load_volume(Path(tmp) / "v.vol").data.tobytes() != v.data.tobytes():
            return False, "volume file"
    trainer = Trainer(ModelConfig.toy(), TrainConfig(batch=1, crop=8, iterations=1), Dataset([v], [v]))
    raw = to_bytes(trainer.checkpoint())
    if to_bytes(from_bytes(raw)) != raw:
        return False, "checkpoint"
    return True, "partition, shift, permute, volume, checkpoint"


def check_kspace():
    x = np.random.default_rng(3).standard_normal((16, 16, 16))
    lhs = float(np.sum(x**2))
    rel = abs(fft3d(x).energy() / x.size - lhs) / lhs
    const = degrade(Volume(np.full((16, 16, 16), 0.3)))
    err_c = float(np.abs(const.array - 0.3).max())
    c = 0.5 + 0.5 * np.cos(2 * np.pi * np.arange(32) / 32)[:, None, None] * np.ones((32, 32, 32))
    err_cos = float(np.abs(degrade(Volume(c)).array - c).max())
    ok = rel < 1e-4 and err_c < 1e-6 and err_cos < 2e-2
    return ok, f"parseval {rel:.1e}, constant {err_c:.1e}, cosine {err_cos:.1e}"


CHECKS = [
    ("op gradients", check_op_gradients),
    ("model gradient", check_model_gradient),
    ("relative position index", check_relative_index),
    ("sw-msa oracle", check_swmsa_oracle),
    ("roundtrips", check_roundtrips),
    ("k-space", check_kspace),
]


def run(full=False, out=print):
    """Run every check, print one line each, return True when all pass."""
    checks = list(CHECKS)
    if full:
        from .experiments import check_overfit

        checks.append(("overfit", check_overfit))
    ok_all = True
    with _maybe_corrupt():
        for name, fn in checks:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            ok_all &= bool(ok)
            out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all
