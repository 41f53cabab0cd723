"""Layer-by-layer gradient verification against central finite differences.

Each check builds a tiny instance of one building block (sizes <= 8 nodes,
narrow widths), wires it into a random scalar readout and compares every
analytic gradient with central differences.  Dropout never runs here; the
functions under test are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from darer.graphs import build_drtg, build_satg
from darer.layers import Decoder, LabelEmbeddings, ReTeFormerLayer, RgcnLayer, SeqBiLstm, UtteranceEncoder
from darer.model import StepOutputs
from darer.tensor import LstmParams, Tensor, grad_check, lstm_step, softmax_rows
from darer.training import estimate_loss, margin_loss, nll_loss, total_loss


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _readout(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def check_encoder(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    enc = UtteranceEncoder(vocab_size=6, word_dim=3, hidden_dim=4, rng=rng)
    token_ids = [rng.integers(0, 6, size=rng.integers(1, 4)) for _ in range(3)]
    probe = _readout(rng, (3, 4))

    def f():
        return (enc.encode_dialog(token_ids) * probe).sum()

    params = [p for _, p in enc.parameters()]
    return grad_check(f, params, h=h, tol=tol)["max_rel_error"]


def check_lstm_step(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    params = LstmParams.init(3, 4, rng)
    x = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    h0 = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    c0 = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    probe = _readout(rng, (1, 4))

    def f():
        new_h, new_c = lstm_step(x, (h0, c0), params)
        return (new_h * probe).sum() + new_c.sum()

    inputs = [x, h0, c0] + [p for _, p in params.parameters()]
    return grad_check(f, inputs, h=h, tol=tol)["max_rel_error"]


def check_rgcn(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    speakers = [int(s) for s in rng.integers(1, 3, size=4)]
    graph = build_satg(speakers, num_speakers=2)
    layer = RgcnLayer(3, graph.num_relations, rng)
    hidden = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    probe = _readout(rng, (4, 3))

    def f():
        return (layer(graph, hidden) * probe).sum()

    inputs = [hidden, layer.w_self] + layer.w_rel
    return grad_check(f, inputs, h=h, tol=tol)["max_rel_error"]


def check_reteformer(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    graph = build_drtg(3)
    layer = ReTeFormerLayer(4, 12, max_positions=4, rng=rng)
    hidden = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    probe = _readout(rng, (6, 4))

    def f():
        out, _ = layer(graph, hidden, graph.node_position)
        return (out * probe).sum()

    inputs = [hidden] + [p for _, p in layer.parameters()]
    return grad_check(f, inputs, h=h, tol=tol)["max_rel_error"]


def check_label_projection(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    emb = LabelEmbeddings(3, 4, rng)
    logits = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    probe = _readout(rng, (3, 4))

    def f():
        return (emb.project(softmax_rows(logits)) * probe).sum()

    return grad_check(f, [logits, emb.table], h=h, tol=tol)["max_rel_error"]


def check_ts_lstm(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    layer = SeqBiLstm(4, rng)
    hidden = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    probe = _readout(rng, (3, 4))

    def f():
        return (layer(hidden) * probe).sum()

    inputs = [hidden] + [p for _, p in layer.parameters()]
    return grad_check(f, inputs, h=h, tol=tol)["max_rel_error"]


def check_decoder(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    dec = Decoder(4, 3, rng)
    hidden = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    gold = rng.integers(0, 3, size=3)

    def f():
        return nll_loss(dec(hidden), gold)

    return grad_check(f, [hidden, dec.w, dec.b], h=h, tol=tol)["max_rel_error"]


def check_losses(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    steps = 2
    logits_s = [Tensor(rng.normal(size=(3, 2)), requires_grad=True)
                for _ in range(steps + 1)]
    logits_a = [Tensor(rng.normal(size=(3, 3)), requires_grad=True)
                for _ in range(steps + 1)]
    gold_s = rng.integers(0, 2, size=3)
    gold_a = rng.integers(0, 3, size=3)

    def f():
        outputs = StepOutputs(p_sent=[softmax_rows(z) for z in logits_s],
                              p_act=[softmax_rows(z) for z in logits_a])
        loss, _ = total_loss(outputs, gold_s, gold_a, gamma_sent=1.7, gamma_act=0.4)
        return loss

    return grad_check(f, logits_s + logits_a, h=h, tol=tol)["max_rel_error"]


def check_estimate_and_margin(seed: int, h: float, tol: float) -> float:
    rng = np.random.default_rng(seed)
    logits = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(3)]
    gold = rng.integers(0, 3, size=2)

    def f():
        ps = [softmax_rows(z) for z in logits]
        return estimate_loss(ps[:-1], gold) + 2.0 * margin_loss(ps, gold)

    return grad_check(f, logits, h=h, tol=tol)["max_rel_error"]


ALL_CHECKS = [
    ("encoder", check_encoder),
    ("lstm_step", check_lstm_step),
    ("sat_rgcn", check_rgcn),
    ("dtr_reteformer", check_reteformer),
    ("label_projection", check_label_projection),
    ("ts_lstm", check_ts_lstm),
    ("decoder_nll", check_decoder),
    ("total_loss", check_losses),
    ("estimate_margin_losses", check_estimate_and_margin),
]


def run_all(num_seeds: int = 20, h: float = 1e-5, tol: float = 1e-4,
            progress=None) -> list[CheckResult]:
    """Run every layer check over ``num_seeds`` random draws."""
    results = []
    for name, fn in ALL_CHECKS:
        worst = 0.0
        for seed in range(num_seeds):
            worst = max(worst, fn(seed, h, tol))
        results.append(CheckResult(name=name, max_rel_error=worst, tol=tol))
        if progress is not None:
            status = "ok" if results[-1].passed else "FAIL"
            progress(f"{name}: max_rel_error={worst:.3e} [{status}]")
    return results
