"""Losses, the optimization loop, metric computation, and model selection.

The objective has three ingredients per task: a prediction loss (NLL of the
final step's distributions), an estimate loss (NLL of every earlier step's
distributions), and a margin loss that charges any step-to-step drop in the
true class's probability.  Estimate + weighted margin form the constraint
term; the grand total is the sum over both tasks.

The printed loss formulas carry no leading minus; both cross-entropy terms
are implemented as standard negative log-likelihood so that minimizing them
does what the surrounding text intends.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from darer.data import Corpus, EncodedDialog, Vocabulary, build_embedding_matrix, encode_dialogs
from darer.model import DarerModel, ModelConfig, StepOutputs
from darer.tensor import Adam, Tensor, backward, log_clip, no_grad, relu


def one_hot(ids: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(ids), num_classes))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def nll_loss(p: Tensor, gold_ids: np.ndarray) -> Tensor:
    """Negative log-likelihood of gold classes under row distributions."""
    mask = Tensor(one_hot(np.asarray(gold_ids), p.data.shape[1]))
    return -(mask * log_clip(p)).sum()


def estimate_loss(p_steps: list[Tensor], gold_ids: np.ndarray) -> Tensor:
    """NLL summed over the intermediate steps (pass distributions for t = 0..T-1).

    An empty list (no reasoning steps) contributes exactly zero.
    """
    total = Tensor(0.0)
    for p in p_steps:
        total = total + nll_loss(p, gold_ids)
    return total


def margin_loss(p_steps: list[Tensor], gold_ids: np.ndarray) -> Tensor:
    """Hinge on the true class's probability across adjacent steps.

    For each utterance and each step t >= 1, charges
    max(0, p^(t-1)[gold] - p^t[gold]); zero whenever every step holds or
    improves the true-class probability.  Pass distributions for t = 0..T.
    """
    total = Tensor(0.0)
    if len(p_steps) < 2:
        return total
    mask = Tensor(one_hot(np.asarray(gold_ids), p_steps[0].data.shape[1]))
    for prev, cur in zip(p_steps[:-1], p_steps[1:]):
        total = total + (mask * relu(prev - cur)).sum()
    return total


@dataclass
class LossBreakdown:
    """Scalar values of every objective term for one batch or dialog."""

    prediction_sent: float
    prediction_act: float
    estimate_sent: float
    estimate_act: float
    margin_sent: float
    margin_act: float
    total: float

    def as_dict(self) -> dict:
        return {
            "prediction_sent": self.prediction_sent,
            "prediction_act": self.prediction_act,
            "estimate_sent": self.estimate_sent,
            "estimate_act": self.estimate_act,
            "margin_sent": self.margin_sent,
            "margin_act": self.margin_act,
            "total": self.total,
        }


def total_loss(outputs: StepOutputs, gold_sent: np.ndarray, gold_act: np.ndarray,
               gamma_sent: float, gamma_act: float) -> tuple[Tensor, LossBreakdown]:
    """Assemble the full objective; gradients flow through every step."""
    pred_s = nll_loss(outputs.p_sent[-1], gold_sent)
    pred_a = nll_loss(outputs.p_act[-1], gold_act)
    est_s = estimate_loss(outputs.p_sent[:-1], gold_sent)
    est_a = estimate_loss(outputs.p_act[:-1], gold_act)
    mar_s = margin_loss(outputs.p_sent, gold_sent)
    mar_a = margin_loss(outputs.p_act, gold_act)
    total = pred_s + pred_a + est_s + est_a + gamma_sent * mar_s + gamma_act * mar_a
    breakdown = LossBreakdown(
        prediction_sent=pred_s.item(), prediction_act=pred_a.item(),
        estimate_sent=est_s.item(), estimate_act=est_a.item(),
        margin_sent=mar_s.item(), margin_act=mar_a.item(),
        total=total.item(),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "f1_weighted": self.f1_weighted,
        }


def classification_metrics(gold: np.ndarray, pred: np.ndarray, num_classes: int,
                           ignore_label: int | None = None) -> Metrics:
    """Macro and prevalence-weighted P/R/F1 plus plain accuracy.

    ``ignore_label`` drops one class from the averages (it still counts as a
    prediction target).  A class absent from both gold and predictions keeps
    P = R = F1 = 0 and still enters the macro average.
    """
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    support = np.zeros(num_classes)
    for c in range(num_classes):
        tp[c] = np.sum((pred == c) & (gold == c))
        fp[c] = np.sum((pred == c) & (gold != c))
        fn[c] = np.sum((pred != c) & (gold == c))
        support[c] = np.sum(gold == c)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    keep = np.ones(num_classes, dtype=bool)
    if ignore_label is not None:
        keep[ignore_label] = False
    total_support = support[keep].sum()
    weights = support[keep] / total_support if total_support > 0 else np.zeros(keep.sum())
    accuracy = float(np.mean(gold == pred)) if len(gold) else 0.0
    return Metrics(
        accuracy=accuracy,
        precision_macro=float(precision[keep].mean()),
        recall_macro=float(recall[keep].mean()),
        f1_macro=float(f1[keep].mean()),
        precision_weighted=float((weights * precision[keep]).sum()),
        recall_weighted=float((weights * recall[keep]).sum()),
        f1_weighted=float((weights * f1[keep]).sum()),
    )


def evaluate_model(model: DarerModel, dialogs: list[EncodedDialog],
                   ignore_sentiment: int | None = None,
                   ignore_act: int | None = None,
                   per_step: bool = False) -> dict:
    """Run the model over a split and score the final (and optionally every) step."""
    was_training = model.training
    model.set_training(False)
    steps = model.config.steps
    gold_s, gold_a = [], []
    pred_s = [[] for _ in range(steps + 1)]
    pred_a = [[] for _ in range(steps + 1)]
    with no_grad():
        for dialog in dialogs:
            outputs = model.forward_dialog(dialog.token_ids, dialog.speakers)
            gold_s.append(dialog.sentiment_ids)
            gold_a.append(dialog.act_ids)
            for t in range(steps + 1):
                pred_s[t].append(outputs.p_sent[t].data.argmax(axis=1))
                pred_a[t].append(outputs.p_act[t].data.argmax(axis=1))
    model.set_training(was_training)
    gold_s = np.concatenate(gold_s) if gold_s else np.zeros(0, dtype=int)
    gold_a = np.concatenate(gold_a) if gold_a else np.zeros(0, dtype=int)
    n_sent = model.config.num_sentiment_classes
    n_act = model.config.num_act_classes

    def score(t):
        ps = np.concatenate(pred_s[t]) if pred_s[t] else np.zeros(0, dtype=int)
        pa = np.concatenate(pred_a[t]) if pred_a[t] else np.zeros(0, dtype=int)
        return {
            "sentiment": classification_metrics(gold_s, ps, n_sent, ignore_sentiment),
            "act": classification_metrics(gold_a, pa, n_act, ignore_act),
        }

    result = score(steps)
    if per_step:
        result["per_step"] = [score(t) for t in range(steps + 1)]
    return result


def selection_metric(scores: dict) -> float:
    """Mean of the two tasks' macro F1; drives best-on-dev model selection."""
    return 0.5 * (scores["sentiment"].f1_macro + scores["act"].f1_macro)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    target_accuracy: float | None = None    # stop once both dev accuracies reach this
    patience: int | None = None             # stop after this many non-improving epochs
    ignore_sentiment_label: int | None = None
    ignore_act_label: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainResult:
    model: DarerModel
    vocab: Vocabulary
    best_state: dict
    best_epoch: int
    best_metric: float
    history: list[dict] = field(default_factory=list)


def prepare_model(corpus: Corpus, config: ModelConfig, seed: int,
                  word_vectors: dict | None = None):
    """Build vocabulary, embeddings, and encoded splits for a corpus."""
    vocab = Vocabulary.from_dialogs(corpus.train)
    embedding = build_embedding_matrix(vocab, word_vectors, config.word_dim, seed)
    model = DarerModel(config, len(vocab), seed=seed, embedding_init=embedding)
    encoded = {
        name: encode_dialogs(corpus.split(name), vocab,
                             corpus.sentiment_labels, corpus.act_labels)
        for name in ("train", "dev", "test")
    }
    return model, vocab, encoded


def train(corpus: Corpus, config: ModelConfig, settings: TrainSettings,
          word_vectors: dict | None = None,
          log=None) -> TrainResult:
    """Epoch loop with gradient accumulation to the configured batch size.

    Dialogs vary in length, so a batch is a run of dialogs whose gradients
    accumulate before one Adam step.  Keeps the checkpoint that maximizes the
    dev selection metric (ties keep the earlier epoch).
    """
    if not corpus.train:
        raise ValueError("training split is empty")
    if not corpus.dev:
        raise ValueError("dev split is empty")
    model, vocab, encoded = prepare_model(corpus, config, settings.seed, word_vectors)
    optimizer = Adam(model.parameters(), lr=settings.lr or 1e-3)
    shuffle_rng = np.random.default_rng([settings.seed, 0x51])

    history: list[dict] = []
    best_state = model.state_arrays()
    best_metric = -1.0
    best_epoch = 0
    since_best = 0

    order = np.arange(len(encoded["train"]))
    for epoch in range(1, settings.epochs + 1):
        model.set_training(True)
        shuffle_rng.shuffle(order)
        epoch_losses = np.zeros(7)
        pending = 0
        optimizer.zero_grad()
        for pos, idx in enumerate(order):
            dialog = encoded["train"][idx]
            outputs = model.forward_dialog(dialog.token_ids, dialog.speakers)
            loss, breakdown = total_loss(outputs, dialog.sentiment_ids, dialog.act_ids,
                                         config.gamma_sent, config.gamma_act)
            if not np.isfinite(breakdown.total):
                raise RuntimeError(f"loss became non-finite at epoch {epoch}, "
                                   f"dialog {dialog.dialog_id}")
            backward(loss)
            epoch_losses += [breakdown.prediction_sent, breakdown.prediction_act,
                             breakdown.estimate_sent, breakdown.estimate_act,
                             breakdown.margin_sent, breakdown.margin_act,
                             breakdown.total]
            pending += 1
            if pending == settings.batch_size or pos == len(order) - 1:
                if settings.lr > 0:
                    optimizer.step()
                optimizer.zero_grad()
                pending = 0
        train_row = {
            "epoch": epoch, "split": "train",
            "prediction_sent": epoch_losses[0], "prediction_act": epoch_losses[1],
            "estimate_sent": epoch_losses[2], "estimate_act": epoch_losses[3],
            "margin_sent": epoch_losses[4], "margin_act": epoch_losses[5],
            "total": epoch_losses[6],
        }
        history.append(train_row)

        scores = evaluate_model(model, encoded["dev"],
                                ignore_sentiment=settings.ignore_sentiment_label,
                                ignore_act=settings.ignore_act_label)
        metric = selection_metric(scores)
        dev_row = {"epoch": epoch, "split": "dev", "selection_metric": metric}
        for task in ("sentiment", "act"):
            for key, value in scores[task].as_dict().items():
                dev_row[f"{task}_{key}"] = value
        history.append(dev_row)
        if log is not None:
            log(f"epoch {epoch}: dev sent_f1={scores['sentiment'].f1_macro:.4f} "
                f"act_f1={scores['act'].f1_macro:.4f} loss={epoch_losses[6]:.2f}")

        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = model.state_arrays()
            since_best = 0
        else:
            since_best += 1

        if settings.target_accuracy is not None \
                and scores["sentiment"].accuracy >= settings.target_accuracy \
                and scores["act"].accuracy >= settings.target_accuracy:
            break
        if settings.patience is not None and since_best > settings.patience:
            break

    model.load_state_arrays(best_state)
    model.set_training(False)
    return TrainResult(model=model, vocab=vocab, best_state=best_state,
                       best_epoch=best_epoch, best_metric=best_metric,
                       history=history)
