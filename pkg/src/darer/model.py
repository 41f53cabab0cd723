"""Model assembly: dialog understanding, initial estimation, and T steps of
recurrent dual-task reasoning, in the RGCN or the ReTeFormer variant.

The per-dialog pipeline:

1. utterance encoding, then a speaker-aware temporal graph layer mixes the
   utterance states;
2. two task BiLSTMs split the stream, and the decoders produce the step-0
   label distributions (the sentiment decoder reads the act stream and vice
   versa at this stage -- the cross-wiring is deliberate and configurable);
3. each reasoning step projects the previous step's distributions through the
   label embeddings, superimposes them on both node streams, runs the
   dual-task graph layer over the 2N-node reasoning graph, re-encodes each
   task's sequence, and decodes fresh distributions.

Every step's distributions are kept: the training objective supervises all
of them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from darer.graphs import RelationalGraph, build_drtg, build_satg
from darer.layers import (
    Decoder,
    LabelEmbeddings,
    ReTeFormerLayer,
    RgcnLayer,
    SeqBiLstm,
    UtteranceEncoder,
    superimpose,
)
from darer.tensor import Tensor, concat, dropout, slice_rows

VARIANT_RGCN = "rgcn"
VARIANT_RETEFORMER = "reteformer"

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Model hyperparameters; defaults follow the published RGCN-variant setup."""

    variant: str = VARIANT_RGCN
    hidden_dim: int = 128
    label_dim: int | None = None          # must equal hidden_dim (labels are added to states)
    word_dim: int = 64
    steps: int = 3                        # reasoning iterations after the initial estimate
    num_speakers: int = 2
    num_sentiment_classes: int = 3
    num_act_classes: int = 4
    dropout: float = 0.2
    gamma_sent: float = 3.0
    gamma_act: float = 3.0
    max_dialog_len: int = 128
    decoder_wiring: str = "crossed"       # crossed | straight, applies to the initial estimate
    use_label_embeddings: bool = True
    use_sat_layer: bool = True
    use_dtr_layer: bool = True
    share_ts_lstm: bool = False           # reuse the initial task BiLSTMs inside the steps

    def __post_init__(self):
        if self.variant not in (VARIANT_RGCN, VARIANT_RETEFORMER):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.decoder_wiring not in ("crossed", "straight"):
            raise ValueError(f"unknown decoder_wiring {self.decoder_wiring!r}")
        if self.label_dim is None:
            self.label_dim = self.hidden_dim
        if self.label_dim != self.hidden_dim:
            raise ValueError("label_dim must equal hidden_dim: label representations "
                             "are added onto hidden states")
        for name in ("hidden_dim", "word_dim", "num_speakers",
                     "num_sentiment_classes", "num_act_classes", "max_dialog_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even (BiLSTM halves)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.gamma_sent < 0 or self.gamma_act < 0:
            raise ValueError("margin-loss coefficients must be >= 0")


@dataclass
class StepOutputs:
    """Per-step label distributions; index 0 is the initial estimate."""

    p_sent: list[Tensor] = field(default_factory=list)
    p_act: list[Tensor] = field(default_factory=list)
    # per reasoning step (1..T), per relation: attention maps of the dual-task
    # layer; populated only on request, ReTeFormer variant only
    attention: list[list[np.ndarray]] | None = None

    @property
    def num_steps(self) -> int:
        return len(self.p_sent) - 1


class DarerModel:
    """Dual-task dialog model with recurrent prediction-level reasoning."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0,
                 embedding_init: np.ndarray | None = None):
        self.config = config
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        d = config.hidden_dim

        self.encoder = UtteranceEncoder(vocab_size, config.word_dim, d, rng,
                                        embedding_init=embedding_init)

        self.sat_layer = None
        if config.use_sat_layer:
            satg_relations = 2 * config.num_speakers ** 2
            if config.variant == VARIANT_RGCN:
                self.sat_layer = RgcnLayer(d, satg_relations, rng)
            else:
                self.sat_layer = ReTeFormerLayer(d, satg_relations,
                                                 config.max_dialog_len, rng)

        self.init_lstm_sent = SeqBiLstm(d, rng)
        self.init_lstm_act = SeqBiLstm(d, rng)

        self.label_sent = None
        self.label_act = None
        if config.use_label_embeddings:
            self.label_sent = LabelEmbeddings(config.num_sentiment_classes, d, rng)
            self.label_act = LabelEmbeddings(config.num_act_classes, d, rng)

        self.dtr_layer = None
        if config.use_dtr_layer:
            if config.variant == VARIANT_RGCN:
                self.dtr_layer = RgcnLayer(d, 12, rng)
            else:
                self.dtr_layer = ReTeFormerLayer(d, 12, config.max_dialog_len, rng)

        if config.share_ts_lstm:
            self.ts_lstm_sent = self.init_lstm_sent
            self.ts_lstm_act = self.init_lstm_act
        else:
            self.ts_lstm_sent = SeqBiLstm(d, rng)
            self.ts_lstm_act = SeqBiLstm(d, rng)

        self.dec_sent = Decoder(d, config.num_sentiment_classes, rng)
        self.dec_act = Decoder(d, config.num_act_classes, rng)

        self.training = False
        self._rng = rng
        self._satg_cache: dict[tuple[int, ...], RelationalGraph] = {}
        self._drtg_cache: dict[int, RelationalGraph] = {}

    # ------------------------------------------------------------------
    # pipeline stages
    # ------------------------------------------------------------------

    def satg_for(self, speakers: list[int]) -> RelationalGraph:
        key = tuple(speakers)
        if key not in self._satg_cache:
            self._satg_cache[key] = build_satg(list(speakers), self.config.num_speakers)
        return self._satg_cache[key]

    def drtg_for(self, num_utterances: int) -> RelationalGraph:
        if num_utterances not in self._drtg_cache:
            self._drtg_cache[num_utterances] = build_drtg(num_utterances)
        return self._drtg_cache[num_utterances]

    def dialog_understanding(self, token_ids: list[np.ndarray],
                             speakers: list[int]) -> Tensor:
        """Encode utterances and mix them over the speaker-aware graph."""
        n = len(token_ids)
        if n > self.config.max_dialog_len:
            raise ValueError(f"dialog has {n} utterances, exceeding "
                             f"max_dialog_len={self.config.max_dialog_len}")
        h = self.encoder.encode_dialog(token_ids)
        if self.training and self.config.dropout > 0.0:
            h = dropout(h, self.config.dropout, self._rng)
        if self.sat_layer is None:
            return h
        graph = self.satg_for(speakers)
        if self.config.variant == VARIANT_RGCN:
            return self.sat_layer(graph, h)
        out, _ = self.sat_layer(graph, h, graph.node_position,
                                attn_dropout=self.config.dropout if self.training else 0.0,
                                rng=self._rng)
        return out

    def initial_estimation(self, h: Tensor):
        """Split into task streams and decode the step-0 distributions."""
        h_sent = self.init_lstm_sent(h)
        h_act = self.init_lstm_act(h)
        if self.config.decoder_wiring == "crossed":
            p_sent = self.dec_sent(h_act)
            p_act = self.dec_act(h_sent)
        else:
            p_sent = self.dec_sent(h_sent)
            p_act = self.dec_act(h_act)
        return h_sent, h_act, p_sent, p_act

    def reasoning_step(self, h_sent: Tensor, h_act: Tensor,
                       p_sent: Tensor, p_act: Tensor, drtg: RelationalGraph,
                       collect_attention: bool = False):
        """One dual-task reasoning iteration over the 2N-node graph."""
        n = h_sent.data.shape[0]
        if self.label_sent is not None:
            e_sent = self.label_sent.project(p_sent)
            e_act = self.label_act.project(p_act)
            hat_sent = superimpose(h_sent, e_sent, e_act)
            hat_act = superimpose(h_act, e_sent, e_act)
        else:
            hat_sent, hat_act = h_sent, h_act
        nodes = concat([hat_sent, hat_act], axis=0)
        maps = None
        if self.dtr_layer is not None:
            if self.config.variant == VARIANT_RGCN:
                nodes = self.dtr_layer(drtg, nodes)
            else:
                nodes, maps = self.dtr_layer(
                    drtg, nodes, drtg.node_position,
                    attn_dropout=self.config.dropout if self.training else 0.0,
                    rng=self._rng, collect_attention=collect_attention)
        new_h_sent = self.ts_lstm_sent(slice_rows(nodes, 0, n))
        new_h_act = self.ts_lstm_act(slice_rows(nodes, n, 2 * n))
        new_p_sent = self.dec_sent(new_h_sent)
        new_p_act = self.dec_act(new_h_act)
        return new_h_sent, new_h_act, new_p_sent, new_p_act, maps

    def forward_dialog(self, token_ids: list[np.ndarray], speakers: list[int],
                       collect_attention: bool = False) -> StepOutputs:
        """Full forward pass, recording every step's label distributions."""
        h = self.dialog_understanding(token_ids, speakers)
        h_sent, h_act, p_sent, p_act = self.initial_estimation(h)
        out = StepOutputs(p_sent=[p_sent], p_act=[p_act],
                          attention=[] if collect_attention else None)
        if self.config.steps == 0:
            return out
        drtg = self.drtg_for(len(token_ids))
        for _ in range(self.config.steps):
            h_sent, h_act, p_sent, p_act, maps = self.reasoning_step(
                h_sent, h_act, p_sent, p_act, drtg,
                collect_attention=collect_attention)
            out.p_sent.append(p_sent)
            out.p_act.append(p_act)
            if collect_attention:
                out.attention.append(maps)
        return out

    # ------------------------------------------------------------------
    # parameter access and persistence
    # ------------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []

        def collect(prefix, obj):
            for name, p in obj.parameters():
                params.append((f"{prefix}.{name}", p))

        collect("encoder", self.encoder)
        if self.sat_layer is not None:
            collect("sat_layer", self.sat_layer)
        collect("init_lstm_sent", self.init_lstm_sent)
        collect("init_lstm_act", self.init_lstm_act)
        if self.label_sent is not None:
            collect("label_sent", self.label_sent)
            collect("label_act", self.label_act)
        if self.dtr_layer is not None:
            collect("dtr_layer", self.dtr_layer)
        if not self.config.share_ts_lstm:
            collect("ts_lstm_sent", self.ts_lstm_sent)
            collect("ts_lstm_act", self.ts_lstm_act)
        collect("dec_sent", self.dec_sent)
        collect("dec_act", self.dec_act)
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"parameter set mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, p in own.items():
            if p.data.shape != arrays[name].shape:
                raise ValueError(f"parameter {name} has shape {p.data.shape}, "
                                 f"checkpoint has {arrays[name].shape}")
            p.data = arrays[name].astype(np.float64).copy()


def save_checkpoint(path, model: DarerModel, vocab_tokens: list[str],
                    sentiment_labels: list[str], act_labels: list[str]) -> None:
    """Write config, vocabulary, label sets and all parameters to one .npz file.

    Keys: ``meta/format_version``, ``meta/config`` (JSON), ``meta/vocab``,
    ``meta/sentiment_labels``, ``meta/act_labels``, and one ``param/<name>``
    entry per tensor from :meth:`DarerModel.named_parameters`.
    """
    payload: dict[str, np.ndarray] = {
        "meta/format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "meta/config": np.array(json.dumps(asdict(model.config), sort_keys=True)),
        "meta/vocab": np.array(json.dumps(vocab_tokens)),
        "meta/sentiment_labels": np.array(json.dumps(sentiment_labels)),
        "meta/act_labels": np.array(json.dumps(act_labels)),
    }
    for name, p in model.named_parameters():
        payload[f"param/{name}"] = p.data
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Rebuild a model (plus vocab and label sets) from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as zf:
        version = int(zf["meta/format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = ModelConfig(**json.loads(str(zf["meta/config"])))
        vocab_tokens = json.loads(str(zf["meta/vocab"]))
        sentiment_labels = json.loads(str(zf["meta/sentiment_labels"]))
        act_labels = json.loads(str(zf["meta/act_labels"]))
        arrays = {key[len("param/"):]: zf[key] for key in zf.files
                  if key.startswith("param/")}
    model = DarerModel(config, vocab_size=len(vocab_tokens))
    model.load_state_arrays(arrays)
    return model, vocab_tokens, sentiment_labels, act_labels
