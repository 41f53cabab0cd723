"""Loss contracts, metrics, and the optimization loop."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darer.data import generate_synthetic
from darer.model import DarerModel, ModelConfig, StepOutputs
from darer.tensor import Tensor, backward
from darer.training import (
    LossBreakdown,
    TrainSettings,
    classification_metrics,
    estimate_loss,
    evaluate_model,
    margin_loss,
    nll_loss,
    prepare_model,
    selection_metric,
    total_loss,
    train,
)


def dist(rows):
    return Tensor(np.asarray(rows, dtype=float))


class TestEstimateLoss:
    def test_perfect_one_hot_predictions_cost_nothing(self):
        p = dist([[1.0, 0.0], [0.0, 1.0]])
        gold = np.array([0, 1])
        assert estimate_loss([p, p], gold).item() == pytest.approx(0.0, abs=1e-9)

    def test_single_utterance_uniform_is_ln_two(self):
        loss = estimate_loss([dist([[0.5, 0.5]])], np.array([0]))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_no_steps_is_zero(self):
        assert estimate_loss([], np.array([0, 1])).item() == 0.0

    def test_nonnegative(self, rng):
        for _ in range(10):
            logits = rng.normal(size=(3, 4))
            p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            gold = rng.integers(0, 4, size=3)
            assert estimate_loss([dist(p)], gold).item() >= 0.0


class TestMarginLoss:
    def test_monotone_improvement_costs_nothing(self):
        steps = [dist([[0.5, 0.5]]), dist([[0.7, 0.3]]), dist([[0.9, 0.1]])]
        assert margin_loss(steps, np.array([0])).item() == 0.0

    def test_hand_computed_drop(self):
        # the true class's probability falls 0.6 -> 0.5 across one step
        steps = [dist([[0.6, 0.4]]), dist([[0.5, 0.5]])]
        assert margin_loss(steps, np.array([0])).item() == pytest.approx(0.1, abs=1e-12)

    def test_additive_over_utterances(self):
        a0 = dist([[0.6, 0.4], [0.2, 0.8]])
        a1 = dist([[0.5, 0.5], [0.1, 0.9]])
        gold = np.array([0, 0])
        combined = margin_loss([a0, a1], gold).item()
        first = margin_loss([dist([[0.6, 0.4]]), dist([[0.5, 0.5]])], np.array([0])).item()
        second = margin_loss([dist([[0.2, 0.8]]), dist([[0.1, 0.9]])], np.array([0])).item()
        assert combined == pytest.approx(first + second, abs=1e-12)

    def test_single_step_list_is_zero(self):
        assert margin_loss([dist([[0.5, 0.5]])], np.array([0])).item() == 0.0

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_and_zero_iff_no_drop(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.random((3, 2, 3)) + 1e-3
        ps = [dist(r / r.sum(axis=1, keepdims=True)) for r in raw]
        gold = rng.integers(0, 3, size=2)
        value = margin_loss(ps, gold).item()
        assert value >= 0.0
        drops = 0.0
        for prev, cur in zip(ps[:-1], ps[1:]):
            for i, k in enumerate(gold):
                drops += max(0.0, prev.data[i, k] - cur.data[i, k])
        assert value == pytest.approx(drops, abs=1e-12)


class TestTotalLoss:
    def _outputs(self, rng, steps, n=2, cs=2, ca=3):
        def rand_dist(c):
            raw = rng.random((n, c)) + 1e-3
            return dist(raw / raw.sum(axis=1, keepdims=True))

        return StepOutputs(p_sent=[rand_dist(cs) for _ in range(steps + 1)],
                           p_act=[rand_dist(ca) for _ in range(steps + 1)])

    def test_zero_steps_is_prediction_only(self, rng):
        out = self._outputs(rng, steps=0)
        gold_s = np.array([0, 1])
        gold_a = np.array([2, 0])
        loss, br = total_loss(out, gold_s, gold_a, 3.0, 3.0)
        assert br.estimate_sent == 0.0 and br.estimate_act == 0.0
        assert br.margin_sent == 0.0 and br.margin_act == 0.0
        expected = nll_loss(out.p_sent[0], gold_s).item() + \
            nll_loss(out.p_act[0], gold_a).item()
        assert br.total == pytest.approx(expected, abs=1e-9)

    def test_zero_gamma_excludes_margins(self, rng):
        out = self._outputs(rng, steps=2)
        gold_s = np.array([0, 1])
        gold_a = np.array([1, 2])
        _, with_margin = total_loss(out, gold_s, gold_a, 5.0, 5.0)
        _, without = total_loss(out, gold_s, gold_a, 0.0, 0.0)
        assert without.total == pytest.approx(
            with_margin.total - 5.0 * (with_margin.margin_sent + with_margin.margin_act),
            abs=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_breakdown_identity(self, seed):
        rng = np.random.default_rng(seed)
        out = self._outputs(rng, steps=int(rng.integers(0, 4)))
        gold_s = rng.integers(0, 2, size=2)
        gold_a = rng.integers(0, 3, size=2)
        gs, ga = float(rng.random() * 4), float(rng.random() * 4)
        _, br = total_loss(out, gold_s, gold_a, gs, ga)
        recomposed = (br.prediction_sent + br.prediction_act + br.estimate_sent +
                      br.estimate_act + gs * br.margin_sent + ga * br.margin_act)
        assert br.total == pytest.approx(recomposed, abs=1e-9)

    def test_gradients_reach_every_step(self, rng):
        config = ModelConfig(variant="rgcn", hidden_dim=8, word_dim=4, steps=2,
                             num_sentiment_classes=2, num_act_classes=3,
                             dropout=0.0, max_dialog_len=8)
        model = DarerModel(config, vocab_size=9, seed=0)
        token_ids = [rng.integers(2, 9, size=3) for _ in range(2)]
        out = model.forward_dialog(token_ids, [1, 2])
        loss, _ = total_loss(out, np.array([0, 1]), np.array([0, 2]), 1.0, 1.0)
        backward(loss)
        grads = [p.grad for _, p in model.named_parameters()
                 if p.grad is not None]
        assert any(np.abs(g).max() > 0 for g in grads)
        # label embeddings only receive gradient through the reasoning steps
        assert model.label_sent.table.grad is not None
        assert np.abs(model.label_sent.table.grad).max() > 0


class TestMetrics:
    def test_all_correct_is_all_ones(self):
        gold = np.array([0, 1, 2, 1])
        m = classification_metrics(gold, gold.copy(), 3)
        assert m.accuracy == m.f1_macro == m.f1_weighted == 1.0
        assert m.precision_macro == m.recall_macro == 1.0

    def test_hand_computed_macro_f1_one_third(self):
        # two classes; class 0: TP=1 FP=1 FN=0, class 1: TP=0 FP=0 FN=1
        gold = np.array([0, 1])
        pred = np.array([0, 0])
        m = classification_metrics(gold, pred, 2)
        assert m.f1_macro == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_ignore_label_on_the_only_erred_class(self):
        gold = np.array([0, 1, 0, 1])
        pred = np.array([0, 1, 0, 0])  # errs only on class 1
        m = classification_metrics(gold, pred, 2, ignore_label=1)
        # class 0 keeps precision 2/3 (one false positive), recall 1
        assert m.recall_macro == 1.0
        assert m.precision_macro == pytest.approx(2.0 / 3.0)
        full = classification_metrics(gold, pred, 2)
        assert full.f1_macro < m.f1_macro

    def test_class_absent_everywhere_counts_zero_in_macro(self):
        gold = np.array([0, 0])
        pred = np.array([0, 0])
        m = classification_metrics(gold, pred, 3)
        assert m.f1_macro == pytest.approx(1.0 / 3.0)
        assert m.f1_weighted == 1.0  # zero-support classes carry no weight

    def test_weighted_f1_uses_gold_prevalence(self):
        gold = np.array([0, 0, 0, 1])
        pred = np.array([0, 0, 0, 0])
        m = classification_metrics(gold, pred, 2)
        # class 0: P=3/4 R=1 F1=6/7 weight 3/4; class 1: F1=0 weight 1/4
        assert m.f1_weighted == pytest.approx((6.0 / 7.0) * 0.75, abs=1e-12)


class TestEvaluate:
    def _trained_setup(self, steps=1):
        corpus = generate_synthetic(num_dialogs=(8, 4, 4), seed=3)
        config = ModelConfig(variant="rgcn", hidden_dim=8, word_dim=4, steps=steps,
                             num_sentiment_classes=len(corpus.sentiment_labels),
                             num_act_classes=len(corpus.act_labels),
                             dropout=0.0, max_dialog_len=16)
        model, vocab, encoded = prepare_model(corpus, config, seed=1)
        return model, encoded

    def test_order_invariance(self):
        model, encoded = self._trained_setup()
        dev = encoded["dev"]
        forward = evaluate_model(model, dev)
        backward_order = evaluate_model(model, dev[::-1])
        assert forward["sentiment"].as_dict() == backward_order["sentiment"].as_dict()
        assert forward["act"].as_dict() == backward_order["act"].as_dict()

    def test_per_step_reports_every_snapshot(self):
        model, encoded = self._trained_setup(steps=2)
        scores = evaluate_model(model, encoded["dev"], per_step=True)
        assert len(scores["per_step"]) == 3
        final = scores["per_step"][-1]
        assert final["sentiment"].as_dict() == scores["sentiment"].as_dict()

    def test_selection_metric_is_mean_of_macro_f1(self):
        model, encoded = self._trained_setup()
        scores = evaluate_model(model, encoded["dev"])
        expected = 0.5 * (scores["sentiment"].f1_macro + scores["act"].f1_macro)
        assert selection_metric(scores) == pytest.approx(expected)


class TestTrainLoop:
    def _small_corpus(self):
        return generate_synthetic(num_dialogs=(6, 3, 3), seed=5)

    def _config(self, corpus, **overrides):
        base = dict(variant="rgcn", hidden_dim=8, word_dim=4, steps=1,
                    num_sentiment_classes=len(corpus.sentiment_labels),
                    num_act_classes=len(corpus.act_labels),
                    dropout=0.0, max_dialog_len=16)
        base.update(overrides)
        return ModelConfig(**base)

    def test_zero_lr_leaves_parameters_unchanged(self):
        corpus = self._small_corpus()
        config = self._config(corpus)
        model, _, _ = prepare_model(corpus, config, seed=2)
        before = {name: arr.copy() for name, arr in model.state_arrays().items()}
        result = train(corpus, config, TrainSettings(lr=0.0, epochs=1, seed=2))
        after = result.model.state_arrays()
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_history_deterministic_under_fixed_seed(self):
        corpus = self._small_corpus()
        config = self._config(corpus)
        h1 = train(corpus, config, TrainSettings(epochs=2, seed=4)).history
        h2 = train(corpus, config, TrainSettings(epochs=2, seed=4)).history
        assert h1 == h2

    def test_first_adam_step_decreases_both_cross_entropy_terms(self):
        # smoke property over five seeds: one optimizer step on a fresh model
        # lowers the summed estimate and prediction losses
        corpus = self._small_corpus()
        config = self._config(corpus, steps=1)
        from darer.tensor import Adam
        from darer.training import total_loss as tl
        for seed in range(5):
            model, _, encoded = prepare_model(corpus, config, seed=seed)
            batch = encoded["train"][:4]

            def batch_losses():
                pred, est = 0.0, 0.0
                total = None
                for d in batch:
                    out = model.forward_dialog(d.token_ids, d.speakers)
                    loss, br = tl(out, d.sentiment_ids, d.act_ids,
                                  config.gamma_sent, config.gamma_act)
                    total = loss if total is None else total + loss
                    pred += br.prediction_sent + br.prediction_act
                    est += br.estimate_sent + br.estimate_act
                return total, pred, est

            optimizer = Adam(model.parameters(), lr=1e-3)
            total, pred0, est0 = batch_losses()
            backward(total)
            optimizer.step()
            _, pred1, est1 = batch_losses()
            assert pred1 < pred0
            assert est1 < est0

    def test_empty_split_rejected(self):
        corpus = self._small_corpus()
        corpus.train.clear()
        with pytest.raises(ValueError, match="empty"):
            train(corpus, self._config(corpus), TrainSettings(epochs=1, seed=0))

    def test_best_checkpoint_selected_by_dev_metric(self):
        corpus = self._small_corpus()
        config = self._config(corpus)
        result = train(corpus, config, TrainSettings(epochs=3, seed=1))
        dev_rows = [r for r in result.history if r["split"] == "dev"]
        best = max(dev_rows, key=lambda r: r["selection_metric"])
        assert result.best_metric == best["selection_metric"]
        # ties keep the earlier epoch
        first_best = next(r["epoch"] for r in dev_rows
                          if r["selection_metric"] == result.best_metric)
        assert result.best_epoch == first_best

    def test_loss_breakdown_identity_on_live_batches(self):
        corpus = self._small_corpus()
        config = self._config(corpus, steps=2, gamma_sent=2.0, gamma_act=0.5)
        model, _, encoded = prepare_model(corpus, config, seed=3)
        for d in encoded["train"]:
            out = model.forward_dialog(d.token_ids, d.speakers)
            _, br = total_loss(out, d.sentiment_ids, d.act_ids, 2.0, 0.5)
            recomposed = (br.prediction_sent + br.prediction_act + br.estimate_sent +
                          br.estimate_act + 2.0 * br.margin_sent + 0.5 * br.margin_act)
            assert br.total == pytest.approx(recomposed, abs=1e-9)
