import dataclasses

import numpy as np
import pytest

from barlow_adaptor.data import LabeledDataset, UnlabeledDataset
from barlow_adaptor.gradcheck import toy_architecture
from barlow_adaptor.losses import LossWeights
from barlow_adaptor.model import init_params
from barlow_adaptor.trainer import (NonFiniteLossError, OptimizerState, TrainConfig, Variant, epoch_length, lr_at,
                                    paired_batch_indices, sgd_momentum_step, step_objective, train)


def toy_domains(seed=0, n_s=32, n_t=32, dim=5, m=3):
    rng = np.random.default_rng(seed)
    y_s = rng.integers(0, m, n_s)
    x_s = rng.normal(size=(n_s, dim)) + y_s[:, None]
    y_t = rng.integers(0, m, n_t)
    x_t = rng.normal(size=(n_t, dim)) * 1.5 + y_t[:, None] + 1.0
    src = LabeledDataset(x_s.astype(np.float32), "train", y_s, m)
    tgt = LabeledDataset(x_t.astype(np.float32), "train", y_t, m)
    return src, tgt


class TestSchedule:
    def test_published_values(self):
        cfg = TrainConfig()
        np.testing.assert_allclose([lr_at(e, cfg) for e in (0, 20, 40)], [0.001, 0.00033, 0.0001089], rtol=1e-12)

    def test_piecewise_constant_and_non_increasing(self):
        cfg = TrainConfig()
        lrs = [lr_at(e, cfg) for e in range(100)]
        assert lrs[19] == lrs[0] and lrs[21] == lrs[20]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(batch_size=1), dict(lr_decay=0.0), dict(lr_decay=1.5), dict(epochs=0),
                                     dict(lam=-1.0), dict(variant="everything")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        cfg = TrainConfig(lam=0.3, variant="coral_only")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"lr": 1.0})


class TestPairedBatches:
    @staticmethod
    def emit(n_s, n_t, b, seed=0):
        rng_s, rng_t = np.random.default_rng(seed), np.random.default_rng(seed + 100)
        return list(paired_batch_indices(n_s, n_t, b, rng_s, rng_t))

    def test_balanced(self):
        batches = self.emit(32, 32, 16)
        assert len(batches) == 2
        src = np.concatenate([s for s, _ in batches])
        tgt = np.concatenate([t for _, t in batches])
        np.testing.assert_array_equal(np.sort(src), np.arange(32))
        np.testing.assert_array_equal(np.sort(tgt), np.arange(32))

    def test_smaller_source_cycles(self):
        batches = self.emit(16, 48, 16)
        assert len(batches) == 3
        counts = np.bincount(np.concatenate([s for s, _ in batches]), minlength=16)
        np.testing.assert_array_equal(counts, 3)
        np.testing.assert_array_equal(np.sort(np.concatenate([t for _, t in batches])), np.arange(48))
        assert all(len(s) == len(t) == 16 for s, t in batches)

    def test_wrap_reshuffles(self):
        batches = self.emit(16, 48, 16)
        assert not all(np.array_equal(batches[0][0], b[0]) for b in batches[1:])

    def test_partial_batch_dropped(self):
        assert epoch_length(40, 20, 16) == 2
        assert all(len(s) == 16 for s, _ in self.emit(40, 20, 16))

    def test_deterministic(self):
        a, b = self.emit(20, 50, 8, seed=4), self.emit(20, 50, 8, seed=4)
        for (s1, t1), (s2, t2) in zip(a, b):
            np.testing.assert_array_equal(s1, s2)
            np.testing.assert_array_equal(t1, t2)

    def test_empty(self):
        with pytest.raises(ValueError):
            self.emit(0, 10, 4)


class TestSGD:
    @staticmethod
    def scalar_params(theta=0.0):
        p = init_params(toy_architecture(), 0, np.float64)
        for v in p.arrays.values():
            v[...] = theta
        return p

    def test_plain_step(self):
        p = self.scalar_params()
        g = {k: np.full_like(v, 2.0) for k, v in p.arrays.items()}
        sgd_momentum_step(p, g, OptimizerState.zeros_like(p), 1.0, 0.0)
        assert all(np.all(v == -2.0) for v in p.arrays.values())

    def test_two_momentum_steps(self):
        p = self.scalar_params()
        g = {k: np.ones_like(v) for k, v in p.arrays.items()}
        st = OptimizerState.zeros_like(p)
        sgd_momentum_step(p, g, st, 1.0, 0.9)
        sgd_momentum_step(p, g, st, 1.0, 0.9)
        for v in p.arrays.values():
            np.testing.assert_allclose(v, -2.9)

    def test_zero_gradient_fixed_point(self):
        p = self.scalar_params(1.5)
        before = p.copy()
        sgd_momentum_step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, OptimizerState.zeros_like(p), 0.1, 0.9)
        assert p.equal(before)
        assert p.version == before.version + 1

    def test_shape_mismatch(self):
        p = self.scalar_params()
        g = {k: np.zeros_like(v) for k, v in p.arrays.items()}
        g["classifier.0.bias"] = np.zeros(7)
        with pytest.raises(ValueError, match="classifier.0.bias"):
            sgd_momentum_step(p, g, OptimizerState.zeros_like(p), 0.1, 0.9)


class TestStepObjective:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_component(self):
        arch = toy_architecture()
        p = init_params(arch, 0, np.float64)
        x = np.random.default_rng(0).normal(size=(4, arch.in_dim))
        with pytest.raises(NonFiniteLossError, match="coral"):
            step_objective(p, x, np.zeros(4, dtype=int), x * 1e200, LossWeights(1.0), Variant.CORAL_ONLY)

    def test_source_only_never_reads_target(self):
        arch = toy_architecture()
        p = init_params(arch, 0, np.float64)
        x = np.random.default_rng(0).normal(size=(4, arch.in_dim))
        report, _, caches = step_objective(p, x, np.zeros(4, dtype=int), None, LossWeights(), Variant.SOURCE_ONLY)
        assert caches.features_t is None and report.coral == report.bfal == 0.0


class TestTrain:
    def cfg(self, **kw):
        return TrainConfig(**{"batch_size": 8, "epochs": 3, "lam": 0.3, **kw})

    def test_rejects_labeled_target(self):
        src, tgt = toy_domains()
        with pytest.raises(TypeError, match="UnlabeledDataset"):
            train(self.cfg(), src, tgt, init_params(toy_architecture(), 0))

    def test_source_only_logs_zero_alignment(self):
        src, tgt = toy_domains()
        _, hist = train(self.cfg(variant="source_only"), src, tgt.unlabeled(), init_params(toy_architecture(), 0))
        assert hist.column("coral") == [0.0] * 3 and hist.column("bfal") == [0.0] * 3

    def test_decomposition_every_step(self):
        src, tgt = toy_domains()
        cfg = self.cfg()
        _, hist = train(cfg, src, tgt.unlabeled(), init_params(toy_architecture(), 0))
        assert len(hist.steps) == 3 * 4
        for r in hist.steps:
            assert r.total == r.ce + cfg.lam * (r.coral + r.bfal)
            assert r.coral > 0 and r.bfal > 0

    def test_single_step_oracle(self):
        src, tgt = toy_domains(n_s=8, n_t=8)
        cfg = self.cfg(epochs=1, seed=5, lr0=0.05)
        p0 = init_params(toy_architecture(), 1)
        trained, _ = train(cfg, src, tgt.unlabeled(), p0.copy())

        _, s_seq, t_seq = np.random.SeedSequence(5).spawn(3)
        (i_s, i_t), = paired_batch_indices(8, 8, 8, np.random.default_rng(s_seq), np.random.default_rng(t_seq))
        expect = p0.copy()
        _, grads, caches = step_objective(expect, src.x[i_s], src.y[i_s], tgt.x[i_t], cfg.weights)
        for k, v in expect.arrays.items():
            v -= np.float32(0.05) * grads[k]
        for k, buf in expect.buffers.items():
            section, i, stat = k.split(".")
            rows = [c for c in (caches.proj_s, caches.proj_t) if c.section == section]
            for c in rows:
                bn = c.layers[int(i)][1]
                buf *= np.float32(0.9)
                buf += np.float32(0.1) * (bn.mean if stat == "running_mean" else bn.var)
        assert trained.equal(expect)

    def test_reproducible(self):
        src, tgt = toy_domains()
        runs = [train(self.cfg(seed=2), src, tgt.unlabeled(), init_params(toy_architecture(), 2)) for _ in range(2)]
        assert runs[0][0].equal(runs[1][0])
        assert runs[0][1].to_csv() == runs[1][1].to_csv()

    def test_source_only_independent_of_target(self):
        src, tgt = toy_domains()
        other = UnlabeledDataset(np.random.default_rng(9).normal(size=tgt.x.shape).astype(np.float32) * 5, "train")
        a, ha = train(self.cfg(variant="source_only"), src, tgt.unlabeled(), init_params(toy_architecture(), 0), src)
        b, hb = train(self.cfg(variant="source_only"), src, other, init_params(toy_architecture(), 0), src)
        assert a.equal(b) and ha.to_csv() == hb.to_csv()

    def test_selects_best_source_val_epoch(self):
        src, tgt = toy_domains()
        seen = {}

        def remember(epoch, params):
            seen[epoch] = params.copy()
            return {"marker": float(epoch)}

        best, hist = train(self.cfg(epochs=4), src, tgt.unlabeled(), init_params(toy_architecture(), 0), src, remember)
        scores = hist.column("src_val_macro")
        assert hist.best_epoch == int(np.argmax(scores))
        assert best.equal(seen[hist.best_epoch])
        assert hist.column("extra") == [{"marker": float(e)} for e in range(4)]

    def test_callback_cannot_steer_training(self):
        src, tgt = toy_domains()
        a, _ = train(self.cfg(), src, tgt.unlabeled(), init_params(toy_architecture(), 0), src,
                     lambda e, p: {"target_macro": 1.0 - e})
        b, _ = train(self.cfg(), src, tgt.unlabeled(), init_params(toy_architecture(), 0), src)
        assert a.equal(b)

    def test_dim_mismatch(self):
        src, tgt = toy_domains(dim=4)
        with pytest.raises(ValueError, match="features"):
            train(self.cfg(), src, tgt.unlabeled(), init_params(toy_architecture(), 0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        src, tgt = toy_domains()
        with pytest.raises(NonFiniteLossError, match="epoch"):
            train(dataclasses.replace(self.cfg(epochs=30), lr0=50.0, momentum=0.99), src, tgt.unlabeled(),
                  init_params(toy_architecture(), 0))
