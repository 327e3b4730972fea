"""Whole-volume and tiled inference, and dataset evaluation."""

import itertools
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .degrade import degrade
from .errors import DataError
from .metrics import MetricReport
from .swin3d import check_params, superformer_forward
from .volume import Volume, list_volumes, load_volume

TILE_OVERLAP = 8


def _starts(n, tile, step):
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    return starts + [n - tile]


def _blend_weights(tile, overlap):
    """1-D linear ramp over ``overlap`` voxels at both tile edges."""
    i = np.arange(tile, dtype=np.float64)
    ramp = np.minimum((i + 1) / (overlap + 1), (tile - i) / (overlap + 1))
    return np.minimum(ramp, 1.0)


def tiled_apply(fn, arr, tile, overlap=TILE_OVERLAP):
    """Apply ``fn`` (``[H,W,D] -> [H,W,D]`` same shape) tile by tile.

    Tiles of ``tile`` voxels per axis overlap by ``overlap`` voxels;
    overlapping predictions are averaged with linear blend weights so seams
    fade smoothly. The volume must be at least one tile per axis.
    """
    tile = tuple(int(t) for t in tile)
    if any(t > n for t, n in zip(tile, arr.shape)):
        raise ValueError(f"tile {tile} larger than volume {arr.shape}")
    if any(t <= overlap for t in tile):
        raise ValueError(f"tile {tile} must exceed the overlap {overlap}")
    acc = np.zeros(arr.shape, dtype=np.float64)
    wsum = np.zeros(arr.shape, dtype=np.float64)
    weights = [_blend_weights(t, overlap) for t in tile]
    w3 = weights[0][:, None, None] * weights[1][None, :, None] * weights[2][None, None, :]
    grids = [_starts(n, t, t - overlap) for n, t in zip(arr.shape, tile)]
    for origin in itertools.product(*grids):
        sl = tuple(slice(o, o + t) for o, t in zip(origin, tile))
        out = np.asarray(fn(np.ascontiguousarray(arr[sl])), dtype=np.float64)
        acc[sl] += w3 * out
        wsum[sl] += w3
    return acc / wsum


def predict(lr, params, cfg, tile=None, overlap=TILE_OVERLAP):
    """Super-resolve an LR volume (``Volume`` or ``[H,W,D]`` array) at its own grid size.

    Without ``tile`` the whole volume goes through one forward pass, so its
    dims must be multiples of ``cfg.input_multiple()``. With ``tile`` the
    volume is processed in overlapping blended tiles; the volume dims then
    only need to be at least one tile.
    """
    check_params(params, cfg)
    arr = lr.array if isinstance(lr, Volume) else np.asarray(lr)
    dtype = next(iter(params.values())).dtype

    def run(block):
        x = Tensor(block[None].astype(dtype))
        return superformer_forward(x, params, cfg).data[0]

    if tile is None or all(t >= n for t, n in zip(_triple(tile), arr.shape)):
        cfg.check_input(arr.shape)
        out = run(arr)
    else:
        tile = _triple(tile)
        cfg.check_input(tile)
        out = tiled_apply(run, arr, tile, overlap)
    out = out.astype(np.float32)
    if isinstance(lr, Volume):
        return Volume(out, spacing=lr.spacing, id=lr.id)
    return out


def _triple(v):
    return (int(v),) * 3 if np.isscalar(v) else tuple(int(t) for t in v)


def low_res_for(hr_path, hr, factors, cache=None):
    """LR partner of an HR volume: ``lr/<name>`` next to it if present, else degraded."""
    key = (hr.id, tuple(factors))
    if cache is not None and key in cache:
        return cache[key]
    pre = Path(hr_path).parent / "lr" / Path(hr_path).name
    if pre.exists():
        lr = load_volume(pre)
        if lr.dims != hr.dims:
            raise DataError(f"{pre}: LR dims {lr.dims} differ from HR dims {hr.dims}")
    else:
        lr = degrade(hr, factors)
    if cache is not None:
        cache[key] = lr
    return lr


def evaluate(ckpt, data_dir, factors=None, tile=None):
    """Metric report for a checkpoint over every HR volume in ``data_dir``.

    The report carries a baseline for the same pairs: the degraded volume
    itself, which is already trilinearly interpolated back onto the HR grid.
    """
    paths = list_volumes(data_dir)
    if not paths:
        raise DataError(f"no .vol files in {data_dir}")
    cfg = ckpt.model_config
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    check_params(params, cfg)
    factors = tuple(factors) if factors is not None else ckpt.train_config.factors
    report = MetricReport(baseline=MetricReport())
    for path in paths:
        hr = load_volume(path)
        lr = low_res_for(path, hr, factors)
        sr = predict(lr, params, cfg, tile=tile)
        report.add(hr.id, sr.array, hr.array)
        report.baseline.add(hr.id, lr.array, hr.array)
    return report


def evaluate_predictions(pred_dir, data_dir):
    """Score precomputed SR volumes against HR volumes with the same file names."""
    paths = list_volumes(data_dir)
    if not paths:
        raise DataError(f"no .vol files in {data_dir}")
    report = MetricReport()
    for path in paths:
        hr = load_volume(path)
        pred_path = Path(pred_dir) / path.name
        if not pred_path.exists():
            raise DataError(f"no prediction {pred_path} for {path.name}")
        sr = load_volume(pred_path)
        if sr.dims != hr.dims:
            raise DataError(f"{pred_path}: dims {sr.dims} differ from HR dims {hr.dims}")
        report.add(hr.id, sr.array, hr.array)
    return report
