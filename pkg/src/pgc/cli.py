"""Command-line entry point.

Subcommands: ingest, stats, prompts, synthetic, train, predict, eval,
raw-baseline, gradcheck, export-attention.  Settings come from built-in
defaults, overridden by a JSON config file (--config), overridden by
explicit flags; PGC_SEED is the seed fallback of last resort.  Every
run writes the effective configuration next to its artifacts (a
``.run.json`` sidecar for line-based outputs, an embedded field for
JSON outputs), and identical runs produce identical bytes.

Exit codes: 0 success, 1 usage or check failure, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import corpus, eval as evalmod, model as M, prompt, train as trainmod
from .corpus import CorpusError
from .eval import EvalError
from .train import CheckpointError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Flat bag of every tunable the subcommands share."""
    seed: int = 0
    prompt_version: int = 1
    history_depth: int = 1
    tighten: bool = False
    multi_ref: bool = False
    top_k_categories: int = 10
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_k: int | None = None
    vocab_size: int = 512
    max_source_len: int = 64
    max_target_len: int = 16
    d_ff: int | None = None
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    clip_norm: float = 1.0
    checkpoint_interval: int = 0

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            n_enc_layers=self.n_enc_layers, n_dec_layers=self.n_dec_layers,
            d_model=self.d_model, n_heads=self.n_heads, d_k=self.d_k,
            vocab_size=self.vocab_size, max_source_len=self.max_source_len,
            max_target_len=self.max_target_len, d_ff=self.d_ff,
        )

    def train_config(self) -> trainmod.TrainConfig:
        return trainmod.TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
            prompt_version=self.prompt_version, history_depth=self.history_depth,
            clip_norm=self.clip_norm, checkpoint_interval=self.checkpoint_interval,
        )

    def prompt_version_obj(self) -> prompt.PromptVersion:
        return prompt.PromptVersion(prompt.PromptVersionId(self.prompt_version),
                                    self.history_depth)


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _load_config_dict(path: str | Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CorpusError(f"{path}: malformed config JSON: {err}") from err
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(payload) - _CONFIG_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return payload


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config file; unknown keys are an error."""
    return RunConfig(**{**asdict(RunConfig()), **_load_config_dict(path)})


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Precedence: explicit flags > config file > PGC_SEED env > defaults."""
    file_settings = (_load_config_dict(args.config)
                     if getattr(args, "config", None) else {})
    flag_settings = {}
    for name in _CONFIG_KEYS:
        value = getattr(args, name, None)
        if value is not None:
            flag_settings[name] = value
    merged = asdict(RunConfig())
    env_seed = os.environ.get("PGC_SEED")
    if env_seed is not None and "seed" not in file_settings and "seed" not in flag_settings:
        merged["seed"] = int(env_seed)
    merged.update(file_settings)
    merged.update(flag_settings)
    return RunConfig(**merged)


def _write_sidecar(artifact_path: str | Path, config: RunConfig) -> None:
    sidecar = Path(str(artifact_path) + ".run.json")
    sidecar.write_text(json.dumps(asdict(config), indent=2) + "\n", encoding="utf-8")


def _load_examples_any(path: str | Path) -> list[corpus.DialogueExample]:
    """JSONL example store or raw CoQA JSON, decided by suffix."""
    if str(path).endswith(".jsonl"):
        return corpus.load_examples(path)
    return corpus.ingest(path)


def _build_prompts(examples, config: RunConfig, category_vocab, token_vocab):
    version = config.prompt_version_obj()
    return [prompt.build_prompt(ex, version, category_vocab, token_vocab)
            for ex in examples]


def _fit_length(prompted_list, config: RunConfig):
    """Split prompted examples into (usable, dropped) by the length limits."""
    usable, dropped = [], 0
    for p in prompted_list:
        target_len = len(prompt.tokenize(p.target_text)) + 1
        if len(p.source_tokens) > config.max_source_len or target_len > config.max_target_len:
            dropped += 1
        else:
            usable.append(p)
    return usable, dropped


# -- subcommand handlers --

def _cmd_ingest(args) -> int:
    config = effective_config(args)
    examples = corpus.ingest(args.input)
    if config.tighten:
        examples = [corpus.tighten_rationale(ex) for ex in examples]
    corpus.save_examples(examples, args.output)
    _write_sidecar(args.output, config)
    print(f"wrote {len(examples)} examples to {args.output}")
    return 0


def _cmd_stats(args) -> int:
    effective_config(args)  # validates --config before any data is read
    examples = _load_examples_any(args.input)
    stats = corpus.compute_stats(examples)
    print(json.dumps({
        "n_examples": stats.n_examples,
        "n_extractive": stats.n_extractive,
        "n_generative": stats.n_generative,
        "extractive_fraction": stats.extractive_fraction,
    }))
    return 0


def _cmd_prompts(args) -> int:
    config = effective_config(args)
    examples = _load_examples_any(args.input)
    vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    version = config.prompt_version_obj()
    with open(args.output, "w", encoding="utf-8") as fh:
        for ex in examples:
            p = prompt.build_prompt(ex, version, vocab)
            fh.write(json.dumps({
                "story_id": ex.story_id,
                "turn_id": ex.turn.turn_id,
                "version": int(version.version),
                "source_text": p.source_text,
                "target_text": p.target_text,
            }, ensure_ascii=False) + "\n")
    _write_sidecar(args.output, config)
    print(f"wrote {len(examples)} prompts to {args.output}")
    return 0


def _cmd_synthetic(args) -> int:
    config = effective_config(args)
    spec = trainmod.SyntheticSpec(
        task=args.task, vocab_size=args.lexicon_size,
        min_len=args.min_len, max_len=args.max_len,
        n_examples=args.n, seed=config.seed,
    )
    examples = trainmod.make_synthetic(spec)
    corpus.save_examples(examples, args.output)
    _write_sidecar(args.output, config)
    print(f"wrote {len(examples)} {args.task} examples to {args.output}")
    return 0


def _cmd_train(args) -> int:
    config = effective_config(args)
    examples = _load_examples_any(args.input)
    if not examples:
        raise CorpusError(f"{args.input}: no training examples")
    category_vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    version = config.prompt_version_obj()
    bare = [prompt.build_prompt(ex, version, category_vocab) for ex in examples]
    token_lists = [p.source_tokens for p in bare]
    token_lists += [prompt.tokenize(p.target_text) for p in bare]
    token_vocab = prompt.TokenVocab.build(token_lists, config.vocab_size)
    model_config = config.model_config()
    if token_vocab.size != model_config.vocab_size:
        model_config = M.ModelConfig(**{**model_config.to_dict(),
                                        "vocab_size": token_vocab.size})
    prompted = _build_prompts(examples, config, category_vocab, token_vocab)
    prompted, dropped = _fit_length(prompted, config)
    if dropped:
        print(f"dropped {dropped} over-length examples", file=sys.stderr)
    if not prompted:
        raise CorpusError("every example exceeds the model's length limits")
    start_epoch = 0
    if args.resume:
        store, model_config, _, token_vocab, _c, meta = \
            _load_checkpoint_vocabs(args.resume)
        start_epoch = meta["epochs_completed"]
        prompted = _build_prompts(examples, config, category_vocab, token_vocab)
        prompted, _ = _fit_length(prompted, config)
    else:
        store = M.init_params(model_config, config.seed)
    result = trainmod.train_loop(
        prompted, store, config.train_config(), model_config, token_vocab,
        start_epoch=start_epoch, checkpoint_path=args.output,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    trainmod.checkpoint_save(
        args.output, store, model_config, config.train_config(), token_vocab,
        category_vocab=category_vocab, epochs_completed=config.epochs,
        extra={"run_config": asdict(config)},
    )
    if args.loss_curve:
        trainmod.write_loss_curve(result.curve, args.loss_curve)
        _write_sidecar(args.loss_curve, config)
    print(f"trained {config.epochs - start_epoch} epochs "
          f"({len(result.curve)} steps); checkpoint at {args.output}")
    return 0


def _load_checkpoint_vocabs(path):
    store, model_config, train_config, token_vocab, meta = trainmod.checkpoint_load(path)
    category_vocab = None
    if meta.get("category_vocab"):
        category_vocab = prompt.CategoryVocab(categories=tuple(meta["category_vocab"]))
    return store, model_config, train_config, token_vocab, category_vocab, meta


def _cmd_predict(args) -> int:
    config = effective_config(args)
    store, model_config, train_config, token_vocab, category_vocab, _ = \
        _load_checkpoint_vocabs(args.checkpoint)
    examples = _load_examples_any(args.input)
    if category_vocab is None:
        category_vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    if train_config is not None:
        config = RunConfig(**{**asdict(config),
                              "prompt_version": train_config.prompt_version,
                              "history_depth": train_config.history_depth})
    prompted = _build_prompts(examples, config, category_vocab, token_vocab)
    skipped = 0
    with open(args.output, "w", encoding="utf-8") as fh:
        for p in prompted:
            if len(p.source_tokens) > model_config.max_source_len:
                skipped += 1
                continue
            ids = M.greedy_decode(p, store, model_config)
            tokens = token_vocab.decode_extended(ids, p.source_oov)
            fh.write(json.dumps({
                "story_id": p.origin.story_id,
                "turn_id": p.origin.turn.turn_id,
                "text": prompt.detokenize(tokens),
            }, ensure_ascii=False) + "\n")
    if skipped:
        print(f"skipped {skipped} over-length examples", file=sys.stderr)
    _write_sidecar(args.output, config)
    print(f"wrote predictions to {args.output}")
    return 0


def _read_predictions(path, examples, multi_ref, coqa_path):
    by_key = {(ex.story_id, ex.turn.turn_id): ex for ex in examples}
    extra = corpus.load_additional_answers(coqa_path) if (multi_ref and coqa_path) else {}
    predictions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            key = (record["story_id"], int(record["turn_id"]))
            if key not in by_key:
                raise EvalError(f"prediction for unknown example {key[0]}/{key[1]}")
            references = [by_key[key].turn.answer] + list(extra.get(key, []))
            predictions.append(evalmod.Prediction(
                story_id=key[0], turn_id=key[1],
                text=record["text"], references=references,
            ))
    return predictions


def _emit_report(report, args, config) -> None:
    if args.report:
        evalmod.write_report(report, args.report, config=asdict(config))
    if getattr(args, "category_csv", None):
        evalmod.write_category_csv(report, args.category_csv)
        _write_sidecar(args.category_csv, config)
    for line in report.summary_lines():
        print(line)


def _cmd_eval(args) -> int:
    config = effective_config(args)
    examples = _load_examples_any(args.examples)
    if config.multi_ref and not args.coqa:
        raise UsageError("--multi-ref needs --coqa pointing at the original CoQA JSON")
    vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    predictions = _read_predictions(args.predictions, examples,
                                    config.multi_ref, args.coqa)
    report = evalmod.evaluate(predictions, examples, vocab=vocab,
                              multi=config.multi_ref, top_k=config.top_k_categories)
    _emit_report(report, args, config)
    return 0


def _cmd_raw_baseline(args) -> int:
    config = effective_config(args)
    examples = _load_examples_any(args.input)
    extra = None
    if config.multi_ref:
        if str(args.input).endswith(".jsonl"):
            raise UsageError("--multi-ref needs the original CoQA JSON as --input")
        extra = corpus.load_additional_answers(args.input)
    vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    report = evalmod.raw_baseline(examples, tighten=config.tighten,
                                  multi=config.multi_ref, extra_references=extra,
                                  vocab=vocab, top_k=config.top_k_categories)
    _emit_report(report, args, config)
    return 0


def _cmd_gradcheck(args) -> int:
    config = effective_config(args)
    from . import tensor as tensormod

    model_config = M.ModelConfig(n_enc_layers=2, n_dec_layers=1, d_model=8,
                                 n_heads=2, vocab_size=12, max_source_len=8,
                                 max_target_len=8, d_ff=16)
    store = M.init_params(model_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    source = [4, 13, 6, 7, 12]   # five tokens, two of them extended-vocabulary
    gold = [5, 13, 2]            # three target steps, one copy-only id

    turn = corpus.ConversationTurn(turn_id=1, question="q", rationale="r",
                                   answer="a", span_start=0)
    origin = corpus.DialogueExample(story_id="gradcheck", turn=turn, history=(),
                                    answer_class=corpus.AnswerClass.GENERATIVE)
    prompted = prompt.PromptedExample(
        source_text="", target_text="", source_tokens=[""] * len(source),
        source_ids=source, origin=origin, source_oov=["x", "y"])

    def loss(s):
        stack = M.encode(prompted.source_ids, s, model_config)
        fwd = M.forward_distributions([1, 5, 3], stack, s, model_config)
        return trainmod.nll_from_rows(fwd.p_final, gold)

    error = tensormod.grad_check(loss, store, max_coords_per_param=args.coords, rng=rng)
    print(f"gradcheck max relative error: {error:.3e}")
    if error >= 1e-4:
        print("gradcheck FAILED (threshold 1e-4)", file=sys.stderr)
        return 1
    return 0


def _cmd_export_attention(args) -> int:
    config = effective_config(args)
    store, model_config, train_config, token_vocab, category_vocab, _ = \
        _load_checkpoint_vocabs(args.checkpoint)
    examples = _load_examples_any(args.input)
    if not 0 <= args.index < len(examples):
        raise CorpusError(f"example index {args.index} out of range")
    if category_vocab is None:
        category_vocab = prompt.build_category_vocab(examples, config.top_k_categories)
    if train_config is not None:
        config = RunConfig(**{**asdict(config),
                              "prompt_version": train_config.prompt_version,
                              "history_depth": train_config.history_depth})
    p = prompt.build_prompt(examples[args.index], config.prompt_version_obj(),
                            category_vocab, token_vocab)
    heads = [int(h) for h in args.heads.split(",") if h != ""]
    paths = M.export_attention(p.source_tokens, p.source_ids, store, model_config,
                               args.layer, heads, args.out_dir)
    for path in paths:
        print(str(path))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pgc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="random seed (fallback: PGC_SEED)")

    p = sub.add_parser("ingest", help="CoQA JSON -> line-delimited example store")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tighten", action="store_const", const=True,
                   help="cut extractive rationales down to the answer span")
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("stats", help="print corpus statistics")
    common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("prompts", help="emit prompt texts as line-delimited JSON")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--version", type=int, choices=(1, 2, 3), dest="prompt_version")
    p.add_argument("--history-depth", type=int, dest="history_depth")
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    p.set_defaults(handler=_cmd_prompts)

    p = sub.add_parser("synthetic", help="generate copy/gate verification data")
    common(p)
    p.add_argument("--task", required=True, choices=("copy", "gate"))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--lexicon-size", type=int, default=512)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_cmd_synthetic)

    p = sub.add_parser("train", help="teacher-forced training run")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--loss-curve", help="CSV path for (epoch, step, loss)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--version", type=int, choices=(1, 2, 3), dest="prompt_version")
    p.add_argument("--history-depth", type=int, dest="history_depth")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    for flag, name in (("--n-enc-layers", "n_enc_layers"),
                       ("--n-dec-layers", "n_dec_layers"),
                       ("--d-model", "d_model"), ("--n-heads", "n_heads"),
                       ("--d-k", "d_k"), ("--vocab-size", "vocab_size"),
                       ("--max-source-len", "max_source_len"),
                       ("--max-target-len", "max_target_len"), ("--d-ff", "d_ff")):
        p.add_argument(flag, type=int, dest=name)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("predict", help="greedy decoding over an example store")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("eval", help="score a predictions file")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--report", help="JSON report output path")
    p.add_argument("--category-csv", dest="category_csv")
    p.add_argument("--multi-ref", action="store_const", const=True, dest="multi_ref")
    p.add_argument("--coqa", help="original CoQA JSON for extra references")
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("raw-baseline", help="score the rationale itself as the answer")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--report")
    p.add_argument("--category-csv", dest="category_csv")
    p.add_argument("--tighten", action="store_const", const=True)
    p.add_argument("--multi-ref", action="store_const", const=True, dest="multi_ref")
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    p.set_defaults(handler=_cmd_raw_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p)
    p.add_argument("--coords", type=int, default=8,
                   help="sampled coordinates per parameter")
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("export-attention", help="encoder self-attention as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--heads", required=True, help="comma-separated head indices")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--top-k-categories", type=int, dest="top_k_categories")
    p.set_defaults(handler=_cmd_export_attention)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (CorpusError, EvalError, CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
