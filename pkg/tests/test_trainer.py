import json

import numpy as np
import pytest

from eyeopen import net as N
from eyeopen import scene as S
from eyeopen import tensor as T
from eyeopen.dataset import Dataset
from eyeopen.errors import ConfigError, DataError, TrainingError
from eyeopen.trainer import (TrainConfig, finetune, format_config, gradcheck_suite, make_config,
                             make_mixed_batches, parse_config_text, split_indices, train)

# recorded at first build: reduced net, seed 0, 512 stratified synthetic crops (dataset seed 21)
SMOKE_LOSS1 = [4425.825719246454, 3782.6321136527613, 3223.591352116937, 2730.6332502795844, 2277.656769528198]


def _pool(domain, n, seed):
    imgs, recs = S.render_arrays(domain, n, seed)
    return Dataset(imgs, recs)


@pytest.fixture(scope="module")
def small():
    return _pool("syn", 48, 1), _pool("real", 24, 2)


class TestBatches:
    def test_default_ratio_at_256(self):
        cfg = TrainConfig()
        batches = make_mixed_batches(192 * 3, 100, cfg, 0)
        assert len(batches) == 3
        assert all(len(b.real) == 64 and len(b.syn) == 192 for b in batches)

    def test_floor_arithmetic_at_8(self):
        b = make_mixed_batches(60, 10, TrainConfig(batch_size=8), 0)[0]
        assert (len(b.real), len(b.syn)) == (2, 6)

    def test_syn_only_has_no_real(self):
        for b in make_mixed_batches(100, 50, TrainConfig(batch_size=16, mode="syn"), 3):
            assert len(b.real) == 0 and len(b.syn) == 16

    def test_epoch_covers_synthetic_pool_once_and_is_seeded(self):
        cfg = TrainConfig(batch_size=8)
        a = make_mixed_batches(60, 7, cfg, 2)
        syn = np.concatenate([b.syn for b in a])
        assert len(np.unique(syn)) == len(syn) == 60
        assert all(np.array_equal(x.syn, y.syn) and np.array_equal(x.real, y.real)
                   for x, y in zip(a, make_mixed_batches(60, 7, cfg, 2)))
        assert not np.array_equal(a[0].syn, make_mixed_batches(60, 7, cfg, 3)[0].syn)

    def test_real_pool_cycles_evenly(self):
        batches = make_mixed_batches(600, 7, TrainConfig(batch_size=8), 0)
        real = np.concatenate([b.real for b in batches])
        counts = np.bincount(real, minlength=7)
        assert counts.max() - counts.min() <= 1

    def test_missing_real_pool(self):
        with pytest.raises(ConfigError):
            make_mixed_batches(10, 0, TrainConfig(batch_size=4), 0)


class TestConfig:
    def test_file_then_flag_precedence(self):
        vals = parse_config_text("lr = 0.001  # faster\nepochs=3\n\nmode = syn\nlr_decay = yes\n")
        cfg = make_config(vals, epochs=5, batch_size=None)
        assert cfg.lr == 0.001 and cfg.epochs == 5 and cfg.mode == "syn_only" and cfg.lr_decay
        assert cfg.batch_size == 256

    def test_format_round_trip(self):
        cfg = make_config(lr=3e-4, net="reduced", mode="real")
        assert make_config(parse_config_text(format_config(cfg))) == cfg

    @pytest.mark.parametrize("bad", [{"bogus": "1"}, {"lr": "fast"}, {"mode": "sideways"}, {"real_fraction": "1"},
                                     {"lambda2": "-1"}, {"net": "huge"}, {"lr_decay": "maybe"}])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ConfigError):
            make_config(bad)

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.epochs, cfg.batch_size, cfg.real_fraction) == (1e-4, 80, 256, 0.25)
        assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.ot) == (0.01, 1.0, 1.0, 15.0)
        assert cfg.real_per_batch == 64

    def test_lr_decay_schedule(self):
        cfg = TrainConfig(lr=1e-3, lr_decay=True, decay_epoch=2, decay_factor=0.5)
        assert [cfg.lr_at(e) for e in range(4)] == [1e-3, 1e-3, 5e-4, 5e-4]


class TestTrain:
    def test_zero_weights_leave_params_unchanged(self, small):
        syn, real = small
        p0 = N.init_params(N.reduced_config(), 0)
        cfg = TrainConfig(batch_size=16, epochs=2, lambda1=0, lambda2=0, lambda3=0, net="reduced")
        p1, hist = train(p0, syn, real, cfg)
        assert len(hist) == 2
        assert all(np.array_equal(p0.tensors[k], p1.tensors[k]) for k in p0.tensors)

    def test_training_is_bit_identical_across_runs(self, small, tmp_path):
        syn, real = small
        cfg = TrainConfig(batch_size=16, epochs=1, lr=1e-3, net="reduced")
        for name in ("a", "b"):
            p, _ = train(N.init_params(N.reduced_config(), 4), syn, real, cfg, tmp_path / f"{name}.jsonl")
            N.save_checkpoint(p, tmp_path / f"{name}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        log = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert log[0]["epoch"] == 0 and {"loss1", "loss2", "loss3", "total", "wall_ms"} <= set(log[0])

    def test_input_params_are_not_mutated(self, small):
        syn, real = small
        p0 = N.init_params(N.reduced_config(), 0)
        before = {k: v.copy() for k, v in p0.tensors.items()}
        train(p0, syn, real, TrainConfig(batch_size=16, epochs=1, lr=1e-3, net="reduced"))
        assert all(np.array_equal(before[k], p0.tensors[k]) for k in before)

    def test_mode_requirements(self, small):
        syn, real = small
        p = N.init_params(N.reduced_config(), 0)
        with pytest.raises(ConfigError):
            train(p, syn, None, TrainConfig(batch_size=16, epochs=1))
        with pytest.raises(DataError):
            train(p, real, real, TrainConfig(batch_size=16, epochs=1))
        p2, h = train(p, syn, None, TrainConfig(batch_size=16, epochs=1, mode="syn"))
        assert h[0].loss2 == 0.0 and h[0].loss3 == 0.0

    def test_divergence_is_reported(self, small):
        syn, real = small
        p = N.init_params(N.reduced_config(), 0)
        p.tensors["fc2.w"][:] = 1e38
        with pytest.raises(TrainingError, match="epoch 0"):
            with np.errstate(all="ignore"):
                train(p, syn, real, TrainConfig(batch_size=16, epochs=1))


@pytest.mark.slow
def test_smoke_training_decreases_loss1():
    syn = _pool("syn", 512, 21)
    cfg = make_config(mode="syn", epochs=5, net="reduced")
    _, hist = train(N.init_params(N.reduced_config(), 0), syn, None, cfg)
    losses = [h.loss1 for h in hist]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert np.allclose(losses, SMOKE_LOSS1, rtol=1e-3)


class TestFinetune:
    def test_split_sizes(self):
        tr, te = split_indices(2000, 0.75, 0)
        assert len(tr) == 1500 and len(te) == 500 and not set(tr) & set(te)
        assert np.array_equal(tr, split_indices(2000, 0.75, 0)[0])

    def test_zero_epochs_is_identity(self):
        rp = _pool("realprime", 20, 3)
        p = N.init_params(N.reduced_config(), 0)
        q, hist, test = finetune(p, rp, TrainConfig(epochs=0))
        assert hist == [] and len(test) == 5
        assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)

    def test_requires_degree_labels(self, small):
        with pytest.raises(DataError):
            finetune(N.init_params(N.reduced_config(), 0), small[1], TrainConfig(epochs=1))

    def test_runs_with_synthetic_mix(self, small):
        rp = _pool("realprime", 40, 3)
        cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3, finetune_syn_fraction=0.25, net="reduced")
        q, hist, test = finetune(N.init_params(N.reduced_config(), 0), rp, cfg, syn=small[0])
        assert len(hist) == 1 and hist[0].loss1 > 0 and len(test) == 10


class TestGradcheck:
    def test_all_components_pass(self):
        rep = gradcheck_suite(seed=0)
        assert rep.passed, rep.failures()
        names = {e.component for e in rep.entries}
        assert {"conv2d", "maxpool2", "linear", "mfm", "loss1", "loss2", "loss3", "combined"} <= names
        assert all(e.points >= 10 for e in rep.entries if e.component != "network")

    def test_report_is_reproducible(self):
        assert gradcheck_suite(seed=3).to_dict() == gradcheck_suite(seed=3).to_dict()

    def test_corrupted_conv_backward_is_named(self):
        def broken(cache, dout, need_dx=True):
            dx, dw, db = T.conv2d_backward(cache, dout, need_dx)
            return (None if dx is None else dx * 1.01), dw, db

        rep = gradcheck_suite(seed=0, kernels={"conv2d_backward": broken})
        assert not rep.passed
        assert any("conv2d" in f for f in rep.failures())
