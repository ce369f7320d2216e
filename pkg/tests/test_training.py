import numpy as np
import pytest

from ramkit import network, training
from ramkit.cells import CellKind
from ramkit.features import Utterance
from ramkit.numerics import ContractViolation, Rng
from ramkit.training import (
    Stage, adam_step, ff_schedule, init_adam_state, init_sgd_state, rnn_schedule,
    sgd_momentum_step, stack_frames, train_staged,
)

from oracles import adam_scalar, sgd_momentum_scalar


class TestSgdMomentum:
    def test_zero_gradient_zero_velocity_keeps_params(self):
        p = [np.array([[1.0, 2.0]])]
        state = init_sgd_state(p)
        sgd_momentum_step(p, [np.zeros((1, 2))], state, 0.1, 0.9)
        assert p[0].tolist() == [[1.0, 2.0]]

    def test_first_step_closed_form(self):
        p = [np.array([[1.0]])]
        g = [np.array([[0.5]])]
        sgd_momentum_step(p, g, init_sgd_state(p), 0.1, 0.9)
        assert p[0][0, 0] == 1.0 - 0.1 * 0.5

    def test_three_steps_vs_scalar_recurrence(self):
        p = [np.array([[2.0]])]
        state = init_sgd_state(p)
        for _ in range(3):
            sgd_momentum_step(p, [np.array([[0.3]])], state, 0.05, 0.9)
        want = sgd_momentum_scalar(2.0, [0.3] * 3, 0.05, 0.9)
        assert abs(p[0][0, 0] - want) < 1e-12

    def test_shape_mismatch(self):
        p = [np.zeros((2, 2))]
        with pytest.raises(ContractViolation):
            sgd_momentum_step(p, [np.zeros((2, 3))], init_sgd_state(p), 0.1, 0.9)


class TestAdam:
    def test_first_step_approximates_signed_lr(self):
        # for |g| >> eps the first update is close to -lr * sign(g)
        p = [np.array([[1.0, -1.0]])]
        g = [np.array([[0.5, -0.25]])]
        adam_step(p, g, init_adam_state(p), 0.01)
        assert np.allclose(p[0], [[1.0 - 0.01, -1.0 + 0.01]], atol=1e-6)

    def test_zero_gradient_forever_keeps_params(self):
        p = [np.array([[3.0]])]
        state = init_adam_state(p)
        for _ in range(10):
            adam_step(p, [np.zeros((1, 1))], state, 0.1)
        assert p[0][0, 0] == 3.0

    def test_five_steps_vs_scalar_oracle(self):
        gs = [0.4, -0.2, 0.1, 0.9, -0.5]
        p = [np.array([[1.5]])]
        state = init_adam_state(p)
        for g in gs:
            adam_step(p, [np.array([[g]])], state, 0.02)
        want = adam_scalar(1.5, gs, 0.02)
        assert abs(p[0][0, 0] - want) < 1e-12


class TestStackFrames:
    def test_context_one_is_identity(self):
        frames = Rng(1).normal(size=(5, 3))
        assert np.array_equal(stack_frames(frames, 1), frames)

    def test_dim_40_context_11_gives_440(self):
        frames = Rng(2).normal(size=(20, 40))
        assert stack_frames(frames, 11).shape == (20, 440)

    def test_single_frame_fills_all_slots(self):
        frames = np.array([[1.0, 2.0]])
        out = stack_frames(frames, 11)
        assert out.shape == (1, 22)
        assert np.array_equal(out.reshape(11, 2), np.tile(frames, (11, 1)))

    def test_edge_padding_repeats_boundary(self):
        frames = np.array([[0.0], [1.0], [2.0]])
        out = stack_frames(frames, 3)
        # rows are [x(t-1), x(t), x(t+1)] with clamped edges
        assert out.tolist() == [[0.0, 0.0, 1.0], [0.0, 1.0, 2.0], [1.0, 2.0, 2.0]]

    def test_even_context_rejected(self):
        with pytest.raises(ContractViolation):
            stack_frames(np.zeros((3, 2)), 4)


def _toy_utterances(rng, n=6, T=10, dim=3, classes=4):
    utts = []
    for k in range(n):
        frames = rng.child("f", k).normal(size=(T, dim))
        labels = rng.child("l", k).integers(0, classes, size=T).astype(np.intp)
        utts.append(Utterance(f"u{k:02d}", f"spk{k % 2}", frames, labels))
    return utts


def _toy_model(rng, kind=CellKind.GRU, dim=3, classes=4, delay=0):
    return network.build_network(kind, dim, classes, hidden_dim=5, num_layers=1,
                                 output_delay=delay, rng=rng)


class TestTrainStaged:
    def test_zero_learning_rate_stops_after_two_epochs_unchanged(self):
        rng = Rng(20)
        utts = _toy_utterances(rng.child("data"))
        model = _toy_model(rng.child("init"))
        before = {n: a.copy() for n, a in network.model_param_items(model)}
        trained, log = train_staged(model, [Stage("sgd", 0.0, 4)], utts, utts,
                                    rng.child("train"), dropout_p=0.0)
        assert len(log) == 2
        assert log[0].dev_loss == log[1].dev_loss
        for name, a in network.model_param_items(trained):
            assert np.array_equal(a, before[name]), name

    def test_stops_on_rise_and_returns_best_epoch(self, monkeypatch):
        # scripted dev losses: entry 10, epochs 3, 2, 1, 1.5 -> four epochs
        # run, epoch-3 weights returned
        scripted = iter([10.0, 3.0, 2.0, 1.0, 1.5])
        epoch_counter = {"n": 0}

        def fake_epoch(model, utterances, stage, opt_state, rng, dropout_p, tag):
            epoch_counter["n"] += 1
            model.b_out += 1.0
            return 0.0

        monkeypatch.setattr(training, "_train_epoch_rnn", fake_epoch)
        monkeypatch.setattr(training, "evaluate_loss", lambda m, u, **kw: next(scripted))
        rng = Rng(21)
        utts = _toy_utterances(rng.child("data"))
        model = _toy_model(rng.child("init"))
        trained, log = train_staged(model, [Stage("sgd", 0.1, 4)], utts, utts,
                                    rng.child("train"), dropout_p=0.0)
        assert epoch_counter["n"] == 4
        assert [r.dev_loss for r in log] == [3.0, 2.0, 1.0, 1.5]
        assert np.allclose(trained.b_out, model.b_out + 3.0)

    def test_flat_then_worse_keeps_entry_weights(self, monkeypatch):
        # first epoch already worse than entry: best-so-far is the entry point
        scripted = iter([1.0, 5.0, 6.0])

        def fake_epoch(model, utterances, stage, opt_state, rng, dropout_p, tag):
            model.b_out += 1.0
            return 0.0

        monkeypatch.setattr(training, "_train_epoch_rnn", fake_epoch)
        monkeypatch.setattr(training, "evaluate_loss", lambda m, u, **kw: next(scripted))
        rng = Rng(22)
        utts = _toy_utterances(rng.child("data"))
        model = _toy_model(rng.child("init"))
        trained, log = train_staged(model, [Stage("sgd", 0.1, 4)], utts, utts,
                                    rng.child("train"), dropout_p=0.0)
        assert len(log) == 2
        assert np.allclose(trained.b_out, model.b_out)

    def test_fixed_seed_reproducible_model_files(self, tmp_path):
        rng_data = Rng(23)
        utts = _toy_utterances(rng_data.child("data"))
        paths = []
        for run in range(2):
            rng = Rng(77)
            model = _toy_model(rng.child("init"))
            trained, _ = train_staged(model, [Stage("adam", 1e-2, 3), Stage("sgd", 1e-3, 3)],
                                      utts, utts, rng.child("train"), dropout_p=0.2,
                                      max_epochs_per_stage=3)
            path = tmp_path / f"run{run}.bin"
            network.save_model(path, trained)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_label_out_of_range_rejected(self):
        rng = Rng(24)
        utts = _toy_utterances(rng.child("data"), classes=4)
        utts[0].labels[0] = 9
        model = _toy_model(rng.child("init"))
        with pytest.raises(ContractViolation):
            train_staged(model, [Stage("sgd", 0.1, 4)], utts, utts, rng.child("train"))

    def test_empty_data_rejected(self):
        rng = Rng(25)
        model = _toy_model(rng.child("init"))
        with pytest.raises(ContractViolation):
            train_staged(model, [Stage("sgd", 0.1, 4)], [], [], rng.child("train"))

    def test_xor_sequence_task_learns(self):
        # cumulative-pair XOR labels; < 0.05 training loss within 200 epochs
        rng = Rng(123)
        data_rng = rng.child("data")
        utts = []
        for k in range(32):
            bits = data_rng.integers(0, 2, size=8)
            labels = np.zeros(8, dtype=np.intp)
            labels[0] = bits[0]
            labels[1:] = bits[1:] ^ bits[:-1]
            utts.append(Utterance(f"u{k:03d}", "spk0", bits[:, None].astype(float), labels))
        model = network.build_network(CellKind.GRU, 1, 2, hidden_dim=8, num_layers=1,
                                      output_delay=0, rng=rng.child("init"))
        schedule = [Stage("adam", 1e-2, 32)] * 10
        _, log = train_staged(model, schedule, utts, utts, rng.child("train"),
                              dropout_p=0.0, max_epochs_per_stage=20)
        assert len(log) <= 200
        assert min(r.train_loss for r in log) < 0.05


class TestSchedulePresets:
    def test_ff_preset_matches_recipe(self):
        stages = ff_schedule()
        assert [(s.optimizer, s.learning_rate, s.batch_size) for s in stages] == [
            ("sgd", 1e-2, 256), ("sgd", 4e-3, 1024), ("sgd", 1e-4, 2048)]
        assert all(s.momentum == 0.9 for s in stages)

    def test_rnn_preset_matches_recipe(self):
        stages = rnn_schedule()
        assert stages[0].optimizer == "adam" and stages[0].batch_size == 512
        assert [(s.optimizer, s.learning_rate, s.batch_size) for s in stages[1:]] == [
            ("sgd", 1e-3, 128), ("sgd", 1e-4, 128), ("sgd", 1e-5, 128)]


class TestOutputDelay:
    def test_delay_alignment_and_padding(self):
        frames = np.arange(8.0).reshape(4, 2)
        labels = np.array([5, 6, 7, 8], dtype=np.intp)
        xs, targets, mask = training._delayed_inputs_targets(frames, labels, 2)
        assert xs.shape == (6, 2)
        assert np.array_equal(xs[4], frames[-1]) and np.array_equal(xs[5], frames[-1])
        assert targets[2:].tolist() == [5, 6, 7, 8]
        assert mask.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]

    def test_trained_delay_model_evaluates(self):
        rng = Rng(26)
        utts = _toy_utterances(rng.child("data"), T=6)
        model = _toy_model(rng.child("init"), delay=3)
        trained, log = train_staged(model, [Stage("sgd", 1e-2, 4)], utts, utts,
                                    rng.child("train"), dropout_p=0.0,
                                    max_epochs_per_stage=3)
        assert np.isfinite(log[-1].dev_loss)


class TestModelFile:
    @pytest.mark.parametrize("kind", [CellKind.FF_RELU, CellKind.LSTM, CellKind.GRU,
                                      CellKind.RELU_GRU, CellKind.M_RELU_GRU])
    def test_roundtrip_bit_exact(self, tmp_path, kind):
        rng = Rng(27)
        model = network.build_network(kind, 6, 5, hidden_dim=4, num_layers=2,
                                      rng=rng.child(kind.value))
        path = tmp_path / "model.bin"
        network.save_model(path, model)
        loaded = network.load_model(path)
        assert loaded.kind == model.kind
        assert loaded.output_delay == model.output_delay
        assert loaded.frame_context == model.frame_context
        for (n1, a1), (n2, a2) in zip(network.model_param_items(model),
                                      network.model_param_items(loaded)):
            assert n1 == n2
            assert np.array_equal(a1, a2), n1

    def test_magic_present(self, tmp_path):
        rng = Rng(28)
        model = network.build_network(CellKind.GRU, 3, 2, hidden_dim=2, num_layers=1,
                                      rng=rng)
        path = tmp_path / "model.bin"
        network.save_model(path, model)
        assert path.read_bytes()[:8] == b"RAM-CELL"
