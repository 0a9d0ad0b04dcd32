import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from ventgate.evaluation import auroc
from ventgate.model import bce_loss, checkpoint_bytes
from ventgate.training import (
    TRIAL_COLUMNS,
    Dataset,
    SearchSpace,
    TrainConfig,
    TrainingError,
    adam_init,
    adam_step,
    batched_predict,
    random_search,
    split_encounters,
    train,
)

NS, ND, EMB = 2, 3, 4


def toy(n, seed, separable=True):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, NS + 4 * ND))
    x[:, -ND:] = rng.uniform(0, 5, size=(n, ND))
    z = rng.normal(size=(n, EMB))
    score = x[:, 0] + z[:, 0]
    y = (score > 0).astype(np.uint8) if separable else (rng.random(n) < 0.3).astype(np.uint8)
    ids = np.array([f"{seed}-{i // 4}" for i in range(n)])
    return Dataset(x, z, y, ids, np.arange(n, dtype=float))


def cfg(**kw):
    base = dict(hidden_dim=8, latent_dim=4, batch_size=32, learning_rate=1e-2, l2_coefficient=0.0,
                dropout_rate=0.0, max_epochs=20, patience=5)
    base.update(kw)
    return TrainConfig(**base)


class TestLoss:
    def test_values(self):
        assert bce_loss(np.array([1.0, 0.0]), np.array([1, 0])) == pytest.approx(0, abs=1e-11)
        assert bce_loss(np.full(4, 0.5), np.array([1, 0, 1, 0])) == pytest.approx(math.log(2))
        assert bce_loss(np.array([0.9, 0.2]), np.array([1, 0])) == pytest.approx(
            (-math.log(0.9) - math.log(0.8)) / 2
        )
        assert bce_loss(np.array([0.9, 0.2]), np.array([1, 0])) == pytest.approx(0.1643, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([0.5]), np.array([1, 0]))


class TestAdam:
    def test_zero_gradient_decays_moments(self):
        t = {"w": np.array([1.0, 2.0])}
        st = adam_init(t)
        st.m["w"][:] = 0.5
        st.v["w"][:] = 0.25
        adam_step(t, {"w": np.zeros(2)}, st, TrainConfig())
        np.testing.assert_allclose(st.m["w"], 0.45)
        np.testing.assert_allclose(st.v["w"], 0.25 * 0.999)

    def test_zero_gradient_from_zero_state(self):
        t = {"w": np.array([1.0, 2.0])}
        st = adam_init(t)
        adam_step(t, {"w": np.zeros(2)}, st, TrainConfig())
        np.testing.assert_array_equal(t["w"], [1.0, 2.0])

    def test_first_step(self):
        t = {"w": np.array([0.0])}
        st = adam_init(t)
        adam_step(t, {"w": np.array([1.0])}, st, TrainConfig(learning_rate=0.1))
        # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert t["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_repeatable(self):
        def run():
            t = {"w": np.array([0.3, -0.2])}
            st = adam_init(t)
            rng = np.random.default_rng(0)
            for _ in range(20):
                adam_step(t, {"w": rng.normal(size=2)}, st, TrainConfig())
            return t["w"].tobytes()

        assert run() == run()


class TestSplits:
    def test_disjoint_and_complete(self):
        ids = [f"E{i}" for i in range(101)]
        parts = split_encounters(ids, [0.6, 0.2, 0.2], seed=4)
        assert sum(len(p) for p in parts) == 101
        assert set().union(*map(set, parts)) == set(ids)
        assert not set(parts[0]) & set(parts[1])
        assert parts == split_encounters(list(reversed(ids)), [0.6, 0.2, 0.2], seed=4)

    def test_bad_fractions(self):
        with pytest.raises(TrainingError):
            split_encounters(["a"], [0.5, 0.6], 0)


class TestTrain:
    def test_separable_converges(self):
        tr, va = toy(400, 0), toy(200, 1)
        params, hist = train("concat", tr, va, cfg(max_epochs=200, patience=200), n_static=NS, n_dynamic=ND)
        assert len(hist) <= 200
        assert auroc(batched_predict(params, tr), tr.y) >= 0.99

    def test_patience(self):
        tr, va = toy(200, 0, separable=False), toy(100, 1, separable=False)
        c = cfg(patience=1, max_epochs=50, learning_rate=1e-9)
        params, hist = train("ehr", tr, va, c, n_static=NS, n_dynamic=ND)
        best = max(range(len(hist)), key=lambda i: hist[i]["val_auroc"])
        assert len(hist) - 1 - best <= 1

    def test_returns_best_epoch(self):
        tr, va = toy(300, 0), toy(120, 1)
        params, hist = train("gated", tr, va, cfg(max_epochs=8, patience=8), n_static=NS, n_dynamic=ND)
        got = auroc(batched_predict(params, va), va.y)
        assert got == max(h["val_auroc"] for h in hist)

    def test_deterministic(self):
        tr, va = toy(200, 0), toy(80, 1)
        c = cfg(max_epochs=3, dropout_rate=0.2)
        a, _ = train("gated", tr, va, c, n_static=NS, n_dynamic=ND)
        b, _ = train("gated", tr, va, c, n_static=NS, n_dynamic=ND)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_errors(self):
        tr, va = toy(100, 0), toy(40, 1)
        one = replace(tr, y=np.zeros_like(tr.y))
        with pytest.raises(TrainingError):
            train("ehr", one, va, cfg(), n_static=NS, n_dynamic=ND)
        with pytest.raises(TrainingError):
            train("ehr", tr.subset(np.arange(0)), va, cfg(), n_static=NS, n_dynamic=ND)
        with pytest.raises(TrainingError):
            train("ehr", tr, tr.subset(np.arange(40)), cfg(), n_static=NS, n_dynamic=ND)
        with pytest.raises(TrainingError):
            TrainConfig(learning_rate=0).validate()
        with pytest.raises(TrainingError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(TrainingError):
            TrainConfig(patience=0).validate()


class TestSearch:
    def data(self):
        return toy(160, 0), toy(80, 1)

    def space(self, **kw):
        base = dict(learning_rate=(1e-3, 1e-2), batch_size=(16, 64), hidden_dim=(4, 8),
                    l2_coefficient=(1e-6, 1e-4), dropout_rate=(0.0, 0.2), n_trials=3, seed=5)
        base.update(kw)
        return SearchSpace(**base)

    def test_single_trial(self, tmp_path):
        tr, va = self.data()
        best, trials = random_search(self.space(n_trials=1), "ehr", tr, va, cfg(max_epochs=2), n_static=NS, n_dynamic=ND)
        assert len(trials) == 1
        assert best.learning_rate == trials[0]["learning_rate"]

    def test_seeded_sequence(self):
        def draws(seed):
            rng = np.random.default_rng(seed)
            return [self.space().sample(rng) for _ in range(6)]

        assert draws(5) == draws(5)
        assert draws(5) != draws(6)
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = self.space().sample(rng)
            assert 1e-3 <= s["learning_rate"] <= 1e-2 and 16 <= s["batch_size"] <= 64

    def test_degenerate_ranges(self):
        sp = self.space(learning_rate=(3e-3, 3e-3), batch_size=(32, 32), hidden_dim=(6, 6),
                        l2_coefficient=(1e-5, 1e-5), dropout_rate=(0.1, 0.1))
        rng = np.random.default_rng(1)
        draws = [sp.sample(rng) for _ in range(4)]
        assert all(d == draws[0] for d in draws)

    def test_log_file(self, tmp_path):
        tr, va = self.data()
        log = tmp_path / "trials.csv"
        _, trials = random_search(self.space(n_trials=2), "ehr", tr, va, cfg(max_epochs=2), log, n_static=NS, n_dynamic=ND)
        random_search(self.space(n_trials=1), "ehr", tr, va, cfg(max_epochs=2), log, n_static=NS, n_dynamic=ND)
        with open(log) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TRIAL_COLUMNS
        assert len(rows) == 4

    def test_invalid_range(self):
        with pytest.raises(TrainingError):
            self.space(learning_rate=(1e-2, 1e-3)).validate()
        with pytest.raises(TrainingError):
            self.space(n_trials=0).validate()
