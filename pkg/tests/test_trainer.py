import dataclasses

import numpy as np
import pytest

from reentra import trainer
from reentra.embed import EncodedSequence
from reentra.errors import ContractViolation
from reentra.metrics import Prediction, evaluate
from reentra.preproc import SnippetRecord
from reentra.seqmodel import init_params
from reentra.trainer import (
    DEFAULT_DROPOUT_GRID,
    DEFAULT_LR_GRID,
    AdamState,
    Detector,
    GridPoint,
    Hyperparams,
    adam_step,
    cross_validate,
    fit,
    grid_csv,
    grid_search,
    mean_metrics,
    train,
)

TINY = Hyperparams(embed_dim=4, hidden=3, seq_len=12, epochs=3, batch_size=8, w2v_epochs=1)


def same_params(a, b):
    return all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.arrays(), b.arrays()))


def toy_records(n_contracts=6, per_contract=2):
    records = []
    for c in range(n_contracts):
        label = c % 2
        for k in range(per_contract):
            body = ["VAR1", ".", "call", "(", ")", ";", "VAR2", "=", "NUM", ";"]
            tokens = body if label else body[6:] + body[:6]
            records.append(SnippetRecord(f"c{c}", tuple(tokens + ["x"] * k), 0, label, k))
    return records


def toy_dataset(n=10, L=5, vm=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = np.zeros((L, vm))
        length = int(rng.integers(1, L + 1))
        m[:length] = rng.standard_normal((length, vm))
        out.append((EncodedSequence(m, length), i % 2))
    return out


class TestAdam:
    """Bias-corrected Adam steps."""

    def test_zero_gradient(self):
        params = init_params(3, 2, 4, seed=1)
        new, state = adam_step(params, params.zeros_like(), AdamState.zeros_like(params), lr=0.1)
        assert same_params(new, params)
        assert state.t == 1

    def test_first_step_closed_form(self):
        params = init_params(3, 2, 4, seed=2)
        rng = np.random.default_rng(0)
        grads = params.map(lambda _, a: rng.standard_normal(a.shape) * 10.0 ** rng.integers(-9, 2, a.shape))
        lr = 0.002
        new, _ = adam_step(params, grads, AdamState.zeros_like(params), lr)
        for (_, p), (_, g), (_, q) in zip(params.arrays(), grads.arrays(), new.arrays()):
            expected = -lr * g / (np.abs(g) + 1e-8)
            assert np.allclose(q - p, expected, rtol=1e-6, atol=1e-18)
            big = np.abs(g) > 1e-4
            assert np.allclose(np.abs(q - p)[big], lr, rtol=1e-3)
            assert np.all(np.sign(q - p)[big] == -np.sign(g)[big])

    def test_zero_lr_identity(self):
        params = init_params(3, 2, 4, seed=3)
        grads = params.map(lambda _, a: np.ones_like(a))
        state = AdamState.zeros_like(params)
        new, state = adam_step(params, grads, state, lr=0.0)
        new, state = adam_step(new, grads, state, lr=0.0)
        assert same_params(new, params) and state.t == 2

    def test_inputs_untouched_and_deterministic(self):
        params = init_params(3, 2, 4, seed=4)
        grads = params.map(lambda _, a: np.full_like(a, 0.5))
        state = AdamState.zeros_like(params)
        before = params.copy()
        a, sa = adam_step(params, grads, state, 0.01)
        b, sb = adam_step(params, grads, state, 0.01)
        assert same_params(params, before) and state.t == 0
        assert same_params(a, b) and sa.t == sb.t == 1
        assert all(np.all(v >= 0) for v in sa.v.values())

    def test_shape_mismatch(self):
        params = init_params(3, 2, 4)
        other = init_params(3, 3, 4)
        with pytest.raises(ContractViolation):
            adam_step(params, other, AdamState.zeros_like(params), 0.1)


class TestHyperparams:
    """Validation of the training configuration."""

    @pytest.mark.parametrize(
        "kwargs", [{"lr": 0.0}, {"dropout": 1.0}, {"dropout": -0.1}, {"batch_size": 0}, {"hidden": 0}, {"epochs": -1}]
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            Hyperparams(**kwargs)

    def test_defaults(self):
        hp = Hyperparams()
        assert (hp.lr, hp.dropout, hp.batch_size, hp.embed_dim, hp.epochs) == (0.002, 0.2, 64, 300, 50)

    def test_large_lr_accepted(self):
        assert Hyperparams(lr=0.02).lr == 0.02


class TestTrain:
    """The mini-batch loop."""

    def test_zero_epochs(self):
        hp = dataclasses.replace(TINY, epochs=0)
        run = train(toy_dataset(), hp)
        assert run.history == []
        init = init_params(hp.embed_dim, hp.hidden, hp.seq_len, None, hp.dropout, seed=trainer.sub_seed(hp.seed, "init"))
        assert same_params(run.final_params, init)

    def test_history_length_and_determinism(self):
        data = toy_dataset()
        a, b = train(data, TINY), train(data, TINY)
        assert len(a.history) == TINY.epochs
        assert a.history == b.history and same_params(a.final_params, b.final_params)
        c = train(data, dataclasses.replace(TINY, seed=1))
        assert not same_params(a.final_params, c.final_params)

    def test_batch_remainder_trained(self):
        steps = []
        orig = trainer.adam_step

        def counting(*args, **kwargs):
            steps.append(1)
            return orig(*args, **kwargs)

        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(trainer, "adam_step", counting)
            train(toy_dataset(n=10), dataclasses.replace(TINY, epochs=2, batch_size=4))
        assert len(steps) == 2 * 3

    def test_on_epoch_callback(self):
        seen = []
        run = train(toy_dataset(), TINY, on_epoch=lambda e, loss: seen.append((e, loss)))
        assert seen == list(enumerate(run.history))

    def test_empty(self):
        with pytest.raises(ValueError):
            train([], TINY)

    def test_width_mismatch(self):
        with pytest.raises(ContractViolation):
            train(toy_dataset(vm=5), TINY)

    def test_printed_lr_also_trains(self):
        run = train(toy_dataset(), dataclasses.replace(TINY, lr=0.02))
        assert all(np.isfinite(run.history))

    def test_overfit_loss_curve(self, overfit_detector):
        detector, _ = overfit_detector
        history = np.asarray(detector.history)
        assert len(history) == 200
        smooth = np.convolve(history[20:], np.ones(5) / 5, mode="valid")
        # each window may rise by at most 5% of the loss level at epoch 20
        assert np.all(np.diff(smooth) <= 0.05 * smooth[0])
        assert smooth[-1] < 0.01 * smooth[0]


@pytest.mark.filterwarnings("ignore::reentra.metrics.DegenerateMetricWarning")
class TestDetector:
    """Fitted model persistence and scoring."""

    def test_round_trip(self):
        detector = fit(toy_records(), TINY)
        back = Detector.from_dict(detector.to_dict())
        assert same_params(back.params, detector.params) and back.hp == detector.hp
        seqs = [r.tokens for r in toy_records()]
        assert np.array_equal(back.scores(seqs), detector.scores(seqs))

    def test_bad_version(self):
        with pytest.raises(ValueError, match="version"):
            Detector.from_dict({"version": 99})

    def test_empty_inputs(self):
        detector = fit(toy_records(), TINY)
        assert detector.scores([]).shape == (0,)
        assert detector.predictions([]) == []


@pytest.mark.filterwarnings("ignore::reentra.metrics.DegenerateMetricWarning")
class TestCrossValidate:
    """Folds grouped per contract with per-fold refitting."""

    def test_leave_one_out(self):
        records = toy_records(n_contracts=4, per_contract=1)
        reports = cross_validate(records, TINY, k=4)
        assert len(reports) == 4
        assert all(r.counts.total == 1 for r in reports)

    def test_counts_sum_to_n(self):
        records = toy_records()
        reports = cross_validate(records, TINY, k=3)
        assert sum(r.counts.total for r in reports) == len(records)

    def test_contracts_stay_together_and_no_leak(self):
        records = toy_records(n_contracts=8, per_contract=3)
        seen = []
        fitted = []
        real_fit = trainer.fit

        def spy(recs, hp, fold=None, on_epoch=None):
            fitted.append({r.id for r in recs})
            return real_fit(recs, hp, fold=fold)

        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(trainer, "fit", spy)
            cross_validate(records, TINY, k=4, observer=lambda f, tr, te: seen.append((set(tr), set(te))))
        assert len(fitted) == 4
        for (train_ids, test_ids), fit_ids in zip(seen, fitted):
            assert fit_ids == train_ids and not fit_ids & test_ids
            assert len({i.split("#")[0] for i in test_ids} & {i.split("#")[0] for i in train_ids}) == 0
        assert set().union(*(te for _, te in seen)) == {r.id for r in records}

    def test_deterministic(self):
        records = toy_records()
        a = [r.to_dict() for r in cross_validate(records, TINY, k=3)]
        b = [r.to_dict() for r in cross_validate(records, TINY, k=3)]
        assert a == b

    def test_bad_k(self):
        with pytest.raises(ValueError):
            cross_validate(toy_records(), TINY, k=1)

    def test_mean_metrics(self):
        records = toy_records()
        reports = cross_validate(records, TINY, k=3)
        m = mean_metrics(reports)
        assert m["f1"] == pytest.approx(np.mean([r.f1 for r in reports]))
        assert set(m) == {"acc", "tpr", "fpr", "pre", "f1", "auc"}


@pytest.mark.filterwarnings("ignore::reentra.metrics.DegenerateMetricWarning")
class TestGridSearch:
    """Exhaustive search over learning rate and dropout."""

    def fake_cv(self, table):
        def cv(records, hp, k):
            f1, fpr = table[(hp.lr, hp.dropout)]
            base = evaluate([Prediction("p", 0.9, 1, 1), Prediction("n", 0.1, 0, 0)])
            return [dataclasses.replace(base, f1=f1, fpr=fpr)]

        return cv

    def test_default_grid_lists(self):
        assert DEFAULT_LR_GRID == (0.0001, 0.0005, 0.001, 0.002, 0.005)
        assert DEFAULT_DROPOUT_GRID == (0.2, 0.4, 0.6, 0.8)

    def test_single_point(self):
        best, table = grid_search(toy_records(), TINY, [0.01], [0.3], k=2)
        assert (best.lr, best.dropout) == (0.01, 0.3) and len(table) == 1
        assert dataclasses.replace(best, lr=TINY.lr, dropout=TINY.dropout) == TINY

    def test_tie_broken_by_fpr(self, monkeypatch):
        scores = {(0.1, 0.2): (0.9, 0.3), (0.1, 0.4): (0.9, 0.1), (0.2, 0.2): (0.8, 0.0), (0.2, 0.4): (0.9, 0.2)}
        monkeypatch.setattr(trainer, "cross_validate", self.fake_cv(scores))
        best, table = grid_search([], TINY, [0.1, 0.2], [0.2, 0.4])
        assert (best.lr, best.dropout) == (0.1, 0.4)
        assert [(g.lr, g.dropout) for g in table] == list(scores)

    def test_full_tie_prefers_lower_lr(self, monkeypatch):
        scores = {(0.2, 0.2): (0.5, 0.1), (0.1, 0.2): (0.5, 0.1)}
        monkeypatch.setattr(trainer, "cross_validate", self.fake_cv(scores))
        best, _ = grid_search([], TINY, [0.2, 0.1], [0.2])
        assert best.lr == 0.1

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            grid_search(toy_records(), TINY, [], [0.2])

    def test_csv(self):
        text = grid_csv([GridPoint(0.001, 0.2, 0.5, 0.25)])
        assert text == "lr,dropout,mean_f1,mean_fpr\n0.001,0.2,0.5,0.25\n"
