import numpy as np
import pytest

from volformer.autodiff import Tape, Tensor
from volformer.checkpoint import (
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from volformer.config import ModelConfig, TrainConfig
from volformer.errors import ConfigError, DataError
from volformer.gradcheck import check_gradients
from volformer.swin3d import init_params
from volformer.train import (
    Dataset,
    Trainer,
    adam_step,
    batch_loss,
    clip_grads,
    l1_loss,
    read_log,
    train,
)
from volformer.volume import save_volume, synth_phantom


def test_l1_loss_values():
    a = Tensor(np.array([1.0, 1.0]))
    assert float(l1_loss(a, Tensor(np.array([0.0, 2.0]))).data) == 1.0
    assert float(l1_loss(a, a).data) == 0.0
    with pytest.raises(ValueError):
        l1_loss(a, Tensor(np.zeros(3)))


@pytest.mark.parametrize("seed", range(5))
def test_l1_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4, 5)))
    y = Tensor(rng.standard_normal((3, 4, 5)))
    errs = check_gradients(l1_loss, [x, y], h=1e-6)
    assert max(errs) < 1e-5


def test_l1_loss_tie_subgradient_zero():
    x = Tensor(np.array([0.5, 1.0]), requires_grad=True)
    y = Tensor(np.array([0.5, 0.0]))
    with Tape() as tape:
        loss = l1_loss(x, y)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_adam_hand_step():
    p, (m, v) = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, ({"w": 0.0}, {"w": 0.0}), 1, lr=0.1)
    assert p["w"] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)
    assert m["w"] == pytest.approx(0.1) and v["w"] == pytest.approx(0.001)


def test_adam_zero_gradient_decays_moments():
    params = {"w": np.array([1.0, -2.0])}
    moments = ({"w": np.array([0.5, 0.5])}, {"w": np.array([0.2, 0.2])})
    p, (m, v) = adam_step(params, {"w": np.zeros(2)}, moments, 3, lr=0.1)
    # the update uses m only through m_hat; decayed m still moves the params
    np.testing.assert_allclose(m["w"], 0.45)
    np.testing.assert_allclose(v["w"], 0.2 * 0.999)
    q, _ = adam_step(params, {"w": np.zeros(2)}, ({"w": np.zeros(2)}, {"w": np.zeros(2)}), 3, lr=0.1)
    np.testing.assert_array_equal(q["w"], params["w"])
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, moments, 0, lr=0.1)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(4)
    m, v = np.zeros(4), np.zeros(4)
    params, moments = {"w": w.copy()}, ({"w": m.copy()}, {"w": v.copy()})
    for t in range(1, 6):
        g = rng.standard_normal(4)
        params, moments = adam_step(params, {"w": g}, moments, t, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(g, 0.0) is g and clip_grads(g, 10.0) is g
    c = clip_grads(g, 1.0)
    assert c["a"][0] == pytest.approx(0.6) and c["b"][0] == pytest.approx(0.8)


# -------------------------------------------------------------- checkpoint


def small_checkpoint(step=7):
    cfg = ModelConfig.toy()
    params = {k: t.data for k, t in init_params(cfg, 1).items()}
    rng = np.random.default_rng(3)
    rng.random(5)
    return Checkpoint(
        step=step,
        params=params,
        adam_m={k: np.full_like(v, 0.25) for k, v in params.items()},
        adam_v={k: np.full_like(v, 1e-3) for k, v in params.items()},
        rng_state=rng.bit_generator.state,
        model_config=cfg,
        train_config=TrainConfig(iterations=20, batch=1, crop=8),
    )


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = small_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.equals(ckpt)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    g1, g2 = np.random.default_rng(), np.random.default_rng()
    g1.bit_generator.state = ckpt.rng_state
    g2.bit_generator.state = back.rng_state
    assert g1.random() == g2.random()


def test_checkpoint_float64_and_manifest():
    ckpt = small_checkpoint()
    ckpt.params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    raw = to_bytes(ckpt)
    assert raw.startswith(b"VOLFORMER-CKPT 1\nstep 7\n")
    back = from_bytes(raw)
    assert all(back.params[k].dtype == np.float64 for k in back.params)
    assert back.equals(ckpt)


def test_checkpoint_errors(tmp_path):
    raw = to_bytes(small_checkpoint())
    with pytest.raises(CheckpointError):
        from_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        from_bytes(raw.replace(b"VOLFORMER-CKPT 1", b"VOLFORMER-CKPT 9"))
    with pytest.raises(CheckpointError):
        from_bytes(raw[:-10])  # payload truncated
    bad_hash = raw.replace(b"config_hash ", b"config_hash 0", 1)
    with pytest.raises(CheckpointError):
        from_bytes(bad_hash)
    path = tmp_path / "c.ckpt"
    path.write_bytes(raw)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expect_model=ModelConfig.toy(c_emb=16))
    assert load_checkpoint(path, expect_model=ModelConfig.toy()).step == 7
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


# ------------------------------------------------------------------ loop


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    for seed in range(2):
        save_volume(synth_phantom(seed, (16, 16, 16)), d / f"s{seed}.vol")
    return d


TOY_TRAIN = TrainConfig(batch=2, iterations=10, crop=8, checkpoint_interval=5, eval_interval=4, lr=1e-3)


def test_step_zero_loss_is_fresh_model(dataset_dir, tmp_path):
    cfg = ModelConfig.toy()
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path)
    first = read_log(tmp_path / "metrics.log")[0]
    data = Dataset.load(dataset_dir, TOY_TRAIN.factors)
    rng = np.random.default_rng(TOY_TRAIN.seed)
    batch = [data.sample(TOY_TRAIN.crop, rng) for _ in range(TOY_TRAIN.batch)]
    fresh = init_params(cfg, TOY_TRAIN.init_seed)
    assert float(batch_loss(fresh, cfg, batch).data) == first["loss"]


def test_training_log_and_determinism(dataset_dir, tmp_path):
    cfg = ModelConfig.toy()
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path / "a")
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path / "b")
    rows = read_log(tmp_path / "a" / "metrics.log")
    assert [r["step"] for r in rows] == list(range(10))
    assert [r["step"] for r in rows if "psnr" in r] == [0, 4, 8]
    assert rows[-1]["loss"] < rows[0]["loss"]
    for name in ("metrics.log", "checkpoint_0000005.ckpt", "checkpoint_0000010.ckpt", "latest.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_continues_identically(dataset_dir, tmp_path):
    cfg = ModelConfig.toy()
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path / "full")
    train(cfg, TrainConfig(**{**TOY_TRAIN.__dict__, "iterations": 5}), dataset_dir, tmp_path / "half")
    half = tmp_path / "half"
    # the stored train config says 5 iterations; resume with the longer run's config
    train(cfg, TOY_TRAIN, dataset_dir, half, resume=half / "checkpoint_0000005.ckpt")
    full_log = (tmp_path / "full" / "metrics.log").read_text()
    assert (half / "metrics.log").read_text() == full_log
    assert (half / "latest.ckpt").read_bytes() == (tmp_path / "full" / "latest.ckpt").read_bytes()


def test_resume_truncates_log_past_checkpoint(dataset_dir, tmp_path):
    cfg = ModelConfig.toy()
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path)
    expected = (tmp_path / "metrics.log").read_text()
    train(cfg, TOY_TRAIN, dataset_dir, tmp_path, resume=tmp_path / "checkpoint_0000005.ckpt")
    assert (tmp_path / "metrics.log").read_text() == expected


def test_train_errors(dataset_dir, tmp_path):
    cfg = ModelConfig.toy()
    with pytest.raises(DataError):
        train(cfg, TOY_TRAIN, tmp_path / "nope", tmp_path / "o")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        train(cfg, TOY_TRAIN, tmp_path / "empty", tmp_path / "o")
    with pytest.raises(ConfigError):
        train(cfg, TrainConfig(crop=6, iterations=1), dataset_dir, tmp_path / "o")
    with pytest.raises(DataError):
        train(cfg, TrainConfig(crop=32, iterations=1), dataset_dir, tmp_path / "o")
    train(cfg, TrainConfig(**{**TOY_TRAIN.__dict__, "iterations": 1}), dataset_dir, tmp_path / "r")
    with pytest.raises(ConfigError):
        train(ModelConfig.toy(c_emb=16), TOY_TRAIN, dataset_dir, tmp_path / "r", resume=True)


def test_pregenerated_lr_volumes_are_used(dataset_dir, tmp_path):
    import shutil

    from volformer.volume import Volume, load_volume

    d = tmp_path / "data"
    shutil.copytree(dataset_dir, d)
    (d / "lr").mkdir()
    for p in sorted(d.glob("*.vol")):
        hr = load_volume(p)
        save_volume(Volume(hr.array * 0.5, id=hr.id), d / "lr" / p.name)
    data = Dataset.load(d, (2, 2, 1))
    np.testing.assert_array_equal(data.lr[0].array, data.hr[0].array * 0.5)


def test_gradient_of_batch_loss_reaches_every_parameter():
    cfg = ModelConfig.toy()
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = [(Tensor(rng.random((1, 8, 8, 8)).astype(np.float32)), Tensor(rng.random((1, 8, 8, 8)).astype(np.float32)))]
    with Tape() as tape:
        loss = batch_loss(params, cfg, batch)
    tape.backward(loss)
    dead = [k for k, t in params.items() if t.grad is None or not np.any(t.grad)]
    assert dead == []


def test_trainer_rejects_indivisible_crop(dataset_dir):
    data = Dataset.load(dataset_dir, (2, 2, 1))
    with pytest.raises(ConfigError):
        Trainer(ModelConfig.toy(), TrainConfig(crop=10), data)
