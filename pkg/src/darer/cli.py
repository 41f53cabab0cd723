"""Operator commands: train, eval, sweep-t, inspect, gradcheck, gen-synth.

Configuration is a flat key-value table (JSON object file and/or repeated
``--set KEY=VALUE`` overrides).  Unknown keys are rejected; every key has a
default, and the model-size defaults switch with the chosen variant.
Progress goes to stderr; machine-readable artifacts go to files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from darer import checks
from darer.data import (
    default_rules,
    encode_dialogs,
    generate_synthetic,
    load_corpus,
    load_word_vectors,
    save_corpus,
)
from darer.graphs import DRTG_RELATION_NAMES
from darer.model import (
    VARIANT_RETEFORMER,
    VARIANT_RGCN,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from darer.training import TrainSettings, evaluate_model, train

OUT_DIR_ENV = "DARER_OUT_DIR"

# defaults follow the published setups: the base table is the RGCN variant,
# the overlay holds the keys the ReTeFormer variant sizes differently
BASE_DEFAULTS = {
    "variant": VARIANT_RGCN,
    "hidden_dim": 128,
    "word_dim": 64,
    "T": 3,
    "dropout": 0.2,
    "gamma_s": 3.0,
    "gamma_a": 3.0,
    "decoder_wiring": "crossed",
    "use_label_embeddings": True,
    "use_sat_layer": True,
    "use_dtr_layer": True,
    "share_ts_lstm": False,
    "max_dialog_len": 128,
    "lr": 1e-3,
    "batch_size": 16,
    "epochs": 100,
    "seed": 0,
    "patience": None,
    "target_accuracy": None,
    "ignore_sentiment_label": None,
    "word_vectors": None,
}
RETEFORMER_DEFAULTS = {
    "hidden_dim": 256,
    "T": 5,
    "gamma_s": 10.0,
    "gamma_a": 1.0,
    "dropout": 0.4,
}

_MODEL_KEYS = {"variant", "hidden_dim", "word_dim", "T", "dropout", "gamma_s",
               "gamma_a", "decoder_wiring", "use_label_embeddings",
               "use_sat_layer", "use_dtr_layer", "share_ts_lstm", "max_dialog_len"}
_TRAIN_KEYS = {"lr", "batch_size", "epochs", "seed", "patience",
               "target_accuracy", "ignore_sentiment_label", "word_vectors"}


def parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def resolve_run_config(config_path: str | None, set_overrides: list[str],
                       seed: int | None = None) -> dict:
    """Merge defaults, config file, and --set overrides into one flat table."""
    user: dict = {}
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {config_path} must hold a flat JSON object")
        user.update(loaded)
    for item in set_overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        user[key.strip()] = parse_value(value)
    if seed is not None:
        user["seed"] = seed

    known = set(BASE_DEFAULTS)
    unknown = sorted(set(user) - known)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")

    variant = user.get("variant", BASE_DEFAULTS["variant"])
    resolved = dict(BASE_DEFAULTS)
    if variant == VARIANT_RETEFORMER:
        resolved.update(RETEFORMER_DEFAULTS)
    resolved.update(user)
    return resolved


def model_config_from(run_config: dict, corpus) -> ModelConfig:
    return ModelConfig(
        variant=run_config["variant"],
        hidden_dim=int(run_config["hidden_dim"]),
        word_dim=int(run_config["word_dim"]),
        steps=int(run_config["T"]),
        num_speakers=corpus.num_speakers,
        num_sentiment_classes=len(corpus.sentiment_labels),
        num_act_classes=len(corpus.act_labels),
        dropout=float(run_config["dropout"]),
        gamma_sent=float(run_config["gamma_s"]),
        gamma_act=float(run_config["gamma_a"]),
        max_dialog_len=int(run_config["max_dialog_len"]),
        decoder_wiring=run_config["decoder_wiring"],
        use_label_embeddings=bool(run_config["use_label_embeddings"]),
        use_sat_layer=bool(run_config["use_sat_layer"]),
        use_dtr_layer=bool(run_config["use_dtr_layer"]),
        share_ts_lstm=bool(run_config["share_ts_lstm"]),
    )


def train_settings_from(run_config: dict, corpus) -> TrainSettings:
    ignore = run_config["ignore_sentiment_label"]
    ignore_idx = None
    if ignore is not None:
        if ignore not in corpus.sentiment_labels:
            raise ValueError(f"ignore_sentiment_label {ignore!r} is not a corpus label")
        ignore_idx = corpus.sentiment_labels.index(ignore)
    patience = run_config["patience"]
    target = run_config["target_accuracy"]
    return TrainSettings(
        lr=float(run_config["lr"]),
        batch_size=int(run_config["batch_size"]),
        epochs=int(run_config["epochs"]),
        seed=int(run_config["seed"]),
        patience=None if patience is None else int(patience),
        target_accuracy=None if target is None else float(target),
        ignore_sentiment_label=ignore_idx,
    )


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_DIR_ENV) or "darer-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _metrics_payload(scores: dict) -> dict:
    payload = {task: scores[task].as_dict() for task in ("sentiment", "act")}
    if "per_step" in scores:
        payload["per_step"] = [
            {task: step[task].as_dict() for task in ("sentiment", "act")}
            for step in scores["per_step"]
        ]
    return payload


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run_config = resolve_run_config(args.config, args.set, args.seed)
    corpus = load_corpus(args.data)
    out = _out_dir(args)
    checkpoint_path = out / "checkpoint.npz"
    if checkpoint_path.exists() and not args.force:
        _log(f"refusing to overwrite {checkpoint_path} (use --force)")
        return 2

    config = model_config_from(run_config, corpus)
    settings = train_settings_from(run_config, corpus)
    vectors = None
    if run_config["word_vectors"]:
        vectors = load_word_vectors(run_config["word_vectors"], config.word_dim)

    result = train(corpus, config, settings, word_vectors=vectors, log=_log)

    history_path = out / "history.jsonl"
    with open(history_path, "w") as fh:
        fh.write(json.dumps({"run_config": run_config}, sort_keys=True) + "\n")
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    save_checkpoint(checkpoint_path, result.model, result.vocab.tokens,
                    corpus.sentiment_labels, corpus.act_labels)

    encoded_dev = encode_dialogs(corpus.dev, result.vocab,
                                 corpus.sentiment_labels, corpus.act_labels)
    scores = evaluate_model(result.model, encoded_dev,
                            ignore_sentiment=settings.ignore_sentiment_label)
    metrics = {"split": "dev", "best_epoch": result.best_epoch,
               "selection_metric": result.best_metric}
    metrics.update(_metrics_payload(scores))
    if corpus.test:
        encoded_test = encode_dialogs(corpus.test, result.vocab,
                                      corpus.sentiment_labels, corpus.act_labels)
        metrics["test"] = _metrics_payload(
            evaluate_model(result.model, encoded_test,
                           ignore_sentiment=settings.ignore_sentiment_label))
    (out / "metrics.json").write_text(_json_dumps(metrics))
    (out / "config.json").write_text(_json_dumps(run_config))
    _log(f"wrote {checkpoint_path}, {history_path}, {out / 'metrics.json'}")
    return 0


def _load_for_eval(args):
    model, vocab_tokens, sentiment_labels, act_labels = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    if corpus.sentiment_labels != sentiment_labels:
        raise ValueError("checkpoint/corpus mismatch on key sentiment_labels: "
                         f"{sentiment_labels} vs {corpus.sentiment_labels}")
    if corpus.act_labels != act_labels:
        raise ValueError("checkpoint/corpus mismatch on key act_labels: "
                         f"{act_labels} vs {corpus.act_labels}")
    from darer.data import Vocabulary
    vocab = Vocabulary(vocab_tokens)
    return model, vocab, corpus, sentiment_labels, act_labels


def cmd_eval(args) -> int:
    model, vocab, corpus, sentiment_labels, act_labels = _load_for_eval(args)
    dialogs = corpus.split(args.split)
    if not dialogs:
        raise ValueError(f"split {args.split!r} is empty")
    encoded = encode_dialogs(dialogs, vocab, sentiment_labels, act_labels)
    ignore_idx = None
    if args.ignore_label is not None:
        if args.ignore_label not in sentiment_labels:
            raise ValueError(f"--ignore-label {args.ignore_label!r} is not a sentiment label")
        ignore_idx = sentiment_labels.index(args.ignore_label)
    scores = evaluate_model(model, encoded, ignore_sentiment=ignore_idx,
                            per_step=args.per_step)
    payload = {"split": args.split, "checkpoint": str(args.checkpoint)}
    payload.update(_metrics_payload(scores))
    out = _out_dir(args)
    path = out / f"metrics-{args.split}.json"
    path.write_text(_json_dumps(payload))
    _log(f"wrote {path}")
    return 0


def cmd_sweep_t(args) -> int:
    run_config = resolve_run_config(args.config, args.set, args.seed)
    corpus = load_corpus(args.data)
    t_values = [int(v) for v in args.t_values.split(",") if v.strip() != ""]
    if not t_values:
        raise ValueError("--t-values must name at least one step count")
    out = _out_dir(args)
    rows = []
    for t in t_values:
        cfg_table = dict(run_config)
        cfg_table["T"] = t
        config = model_config_from(cfg_table, corpus)
        settings = train_settings_from(cfg_table, corpus)
        result = train(corpus, config, settings, log=None)
        best_dev = max((r for r in result.history if r["split"] == "dev"),
                       key=lambda r: r["selection_metric"])
        rows.append((t, best_dev["sentiment_f1_macro"], best_dev["act_f1_macro"]))
        _log(f"T={t}: sentiment_f1={rows[-1][1]:.4f} act_f1={rows[-1][2]:.4f}")
    path = out / "sweep_t.tsv"
    with open(path, "w") as fh:
        fh.write("T\tsentiment_f1\tact_f1\n")
        for t, f1_s, f1_a in rows:
            fh.write(f"{t}\t{f1_s:.6f}\t{f1_a:.6f}\n")
    _log(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    model, vocab, corpus, sentiment_labels, act_labels = _load_for_eval(args)
    if model.config.variant != VARIANT_RETEFORMER:
        raise ValueError(f"attention inspection needs a {VARIANT_RETEFORMER} checkpoint; "
                         f"this one is {model.config.variant!r}")
    if model.config.steps < 1:
        raise ValueError("checkpoint was trained with T=0; no reasoning step to inspect")
    dialog = None
    for split in ("train", "dev", "test"):
        for cand in corpus.split(split):
            if cand.dialog_id == args.dialog_id:
                dialog = cand
                break
    if dialog is None:
        raise ValueError(f"dialog id {args.dialog_id!r} not found in any split")
    step = args.step if args.step is not None else model.config.steps
    if not 1 <= step <= model.config.steps:
        raise ValueError(f"step must lie in [1..{model.config.steps}], got {step}")

    encoded = encode_dialogs([dialog], vocab, sentiment_labels, act_labels)[0]
    from darer.tensor import no_grad
    with no_grad():
        outputs = model.forward_dialog(encoded.token_ids, encoded.speakers,
                                       collect_attention=True)
    maps = outputs.attention[step - 1]
    n = len(encoded.token_ids)
    node_labels = [f"s{i + 1}" for i in range(n)] + [f"a{i + 1}" for i in range(n)]
    payload = {
        "dialog_id": dialog.dialog_id,
        "step": step,
        "node_labels": node_labels,
        "predicted_sentiments": [sentiment_labels[int(k)] for k in
                                 outputs.p_sent[step].data.argmax(axis=1)],
        "predicted_acts": [act_labels[int(k)] for k in
                           outputs.p_act[step].data.argmax(axis=1)],
        "relations": [
            {"id": r + 1, "name": DRTG_RELATION_NAMES[r],
             "attention": maps[r].tolist()}
            for r in range(len(maps))
        ],
    }
    out = _out_dir(args)
    path = out / f"attention-{dialog.dialog_id}-step{step}.json"
    path.write_text(_json_dumps(payload))
    _log(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_all(num_seeds=args.seeds, tol=args.tol, progress=_log)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{'pass' if r.passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_gen_synth(args) -> int:
    counts = parse_value(args.num_dialogs)
    if isinstance(counts, str):
        counts = tuple(int(v) for v in counts.split(","))
    corpus = generate_synthetic(default_rules(), counts, seed=args.seed)
    save_corpus(corpus, args.out)
    _log(f"wrote synthetic corpus ({len(corpus.train)}/{len(corpus.dev)}/"
         f"{len(corpus.test)} dialogs) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="random seed override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darer",
        description="dual-task dialog understanding with recurrent graph reasoning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint/history/metrics")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./darer-out)")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--per-step", action="store_true",
                   help="also score every reasoning step")
    p.add_argument("--ignore-label", default=None,
                   help="sentiment label excluded from metric averaging")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-t", help="train once per step count and tabulate dev F1")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--t-values", required=True, help="comma-separated step counts")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep_t)

    p = sub.add_parser("inspect", help="dump per-relation attention maps for one dialog")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dialog-id", required=True)
    p.add_argument("--step", type=int, default=None,
                   help="reasoning step to dump (default: the last)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus with planted rules")
    p.add_argument("--num-dialogs", default="500",
                   help="train-dialog count, or train,dev,test counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
