"""Command-line surface: ingest, synth, train, eval, and mask-demo."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import corpus, encoder as enc, masking as mk, tasks, training
from .autodiff import Tensor
from .exceptions import (
    AlignmentError,
    CompatibilityError,
    ConfigError,
    ContractError,
    CorpusParseError,
    DimensionError,
    EmptyInputError,
    LengthError,
    MasktermError,
    NumericError,
    SchemaError,
)

USAGE_ERRORS = (
    ConfigError, CorpusParseError, SchemaError, AlignmentError, ContractError,
    CompatibilityError, EmptyInputError, DimensionError, LengthError,
)

# Defaults mirror the training-recipe constants; the encoder block mirrors the
# desk-scale encoder defaults. Unknown keys are rejected.
CONFIG_DEFAULTS = {
    "task": "ate",
    "epochs": 50,
    "batch_size": 32,
    "learning_rate": 2e-5,
    "l2_lambda": 0.01,
    "seed": 0,
    "mask_strategy": "actm",
    "aggregator": "mean",
    "learnable": True,
    "alpha_init": None,   # None -> per-task default
    "gamma_init": None,
    "beta_init": None,
    "fixed_tau": 0.05,
    "aam_ramp": 2.0,
    "aam_span_init": 2.0,
    "amom_mu_min": 0.1,
    "amom_mu_max": 0.5,
    "amom_iterations": 2,
}


def config_from_dict(raw: dict) -> training.TrainConfig:
    """Build a TrainConfig from the JSON document, rejecting unknown keys."""
    data = dict(raw)
    encoder_raw = data.pop("encoder", {})
    unknown = set(data) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = {**CONFIG_DEFAULTS, **data}
    enc_defaults = enc.EncoderConfig()
    enc_fields = set(enc.encoder_config_to_dict(enc_defaults))
    unknown_enc = set(encoder_raw) - enc_fields
    if unknown_enc:
        raise ConfigError(f"unknown encoder config keys: {sorted(unknown_enc)}")
    try:
        encoder_cfg = replace(enc_defaults, **encoder_raw)
        optional = {k: (None if merged[k] is None else float(merged[k]))
                    for k in ("alpha_init", "gamma_init", "beta_init")}
        mask_cfg = mk.MaskConfig(
            strategy=merged["mask_strategy"],
            aggregator=merged["aggregator"],
            learnable=bool(merged["learnable"]),
            **optional,
            fixed_tau=float(merged["fixed_tau"]),
            aam_ramp=float(merged["aam_ramp"]),
            aam_span_init=float(merged["aam_span_init"]),
            amom_mu_min=float(merged["amom_mu_min"]),
            amom_mu_max=float(merged["amom_mu_max"]),
            amom_iterations=int(merged["amom_iterations"]),
        )
        return training.TrainConfig(
            task=merged["task"],
            epochs=int(merged["epochs"]),
            batch_size=int(merged["batch_size"]),
            learning_rate=float(merged["learning_rate"]),
            l2_lambda=float(merged["l2_lambda"]),
            seed=int(merged["seed"]),
            mask=mask_cfg,
            encoder=encoder_cfg,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path: str | None) -> training.TrainConfig:
    if path is None:
        return config_from_dict({})
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(raw)


# -- subcommands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    entries, summary = corpus.parse_semeval_xml(data, args.schema)
    examples = []
    for text, aspects in entries:
        if not text.strip():
            continue
        examples.append(corpus.make_example(text, aspects))
    corpus.write_examples(args.out, examples)
    print("Reviews\tPositive\tNegative\tNeutral")
    counts = summary.aspect_counts
    print(f"{summary.review_count}\t{counts['positive']}\t{counts['negative']}\t{counts['neutral']}")
    if summary.skipped:
        print(f"skipped\t{summary.skipped}")
    return 0


def cmd_synth(args) -> int:
    examples = corpus.synth_corpus(seed=args.seed, size=args.size)
    corpus.write_examples(args.out, examples)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.task:
        config = replace(config, task=args.task)
    train_set = corpus.read_examples(args.data)
    eval_set = corpus.read_examples(args.eval) if args.eval else train_set
    model, log = training.train(config, train_set, eval_set)
    if args.ckpt_out:
        training.save_model(args.ckpt_out, model)
    if args.runlog_out:
        with open(args.runlog_out, "w", encoding="utf-8") as fh:
            fh.write(log.to_ldjson())
    report = training.evaluate(model, eval_set, config.task)
    print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    model = training.load_model(args.ckpt)
    if args.task and args.task != model.task:
        raise CompatibilityError(
            f"checkpoint was trained for task {model.task!r}, not {args.task!r}"
        )
    dataset = corpus.read_examples(args.data)
    report = training.evaluate(model, dataset, model.task)
    print(report.to_json())
    return 0


def read_scores_tsv(path: str) -> tuple[list[str], np.ndarray]:
    tokens: list[str] = []
    values: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CorpusParseError(
                    f"scores file needs 'token<TAB>value' rows, got {len(cols)} columns",
                    line=lineno, column=1)
            try:
                values.append(float(cols[1]))
            except ValueError as exc:
                raise CorpusParseError(f"bad attention value {cols[1]!r}", line=lineno, column=2) from exc
            tokens.append(cols[0])
    if not tokens:
        raise EmptyInputError("scores file contains no rows")
    return tokens, np.asarray(values)


def _threshold_decision(tokens, attn, aggregator: str, alpha: float,
                        protected=None) -> mk.MaskDecision:
    params = mk.ActmParams(
        w_a=Tensor(np.zeros(1)),
        alpha=Tensor(alpha),
        gamma=Tensor(0.0),
        beta=Tensor(1.0),
        aggregator=aggregator,
        d_k=1,
    )
    tau = mk.actm_threshold(attn, params)
    dummy = Tensor(np.zeros((len(tokens), 1)))
    return mk.apply_mask(attn, tau, dummy, protected=protected)


def cmd_mask_demo(args) -> int:
    if args.scores:
        tokens, values = read_scores_tsv(args.scores)
        alpha = args.alpha if args.alpha is not None else 1.0
        decision = _threshold_decision(tokens, Tensor(values), args.aggregator, alpha)
    else:
        model = training.load_model(args.ckpt)
        example = corpus.make_example(args.sentence, [])
        out = model.forward_ate(example)
        if out.decision is None or out.attn is None:
            raise CompatibilityError(
                f"checkpoint's {model.mask_cfg.strategy!r} strategy produces no threshold trace"
            )
        tokens = ["[CLS]"] + example.tokens + ["[SEP]"]
        if args.alpha is None:
            decision = out.decision
        else:
            decision = _threshold_decision(tokens, out.attn, args.aggregator,
                                           args.alpha, protected=out.inp.protected)
    sys.stdout.write(mk.format_mask_trace(tokens, decision))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskterm",
        description="Adaptive attention-masking toolkit for aspect term extraction "
                    "and aspect sentiment classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse review XML into line-delimited JSON examples")
    p.add_argument("--input", required=True, help="path to the XML file")
    p.add_argument("--schema", required=True, choices=["sem14", "sem16"],
                   help="sem14: aspectTerm elements; sem16: Opinion targets (2015/16 layout)")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate the deterministic synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and report final metrics")
    p.add_argument("--task", choices=["ate", "asc"], help="overrides the config's task")
    p.add_argument("--config", help="JSON config path (defaults apply when omitted)")
    p.add_argument("--data", required=True, help="training examples (.jsonl)")
    p.add_argument("--eval", help="evaluation examples (.jsonl); defaults to --data")
    p.add_argument("--ckpt-out", help="write the final checkpoint here")
    p.add_argument("--runlog-out", help="write the per-epoch run log here (.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["ate", "asc"], help="must match the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-demo", help="print a token/attention/threshold mask trace")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--scores", help="TSV of token<TAB>attention rows, used verbatim")
    source.add_argument("--sentence", help="sentence to run through a trained checkpoint")
    p.add_argument("--ckpt", help="checkpoint path (required with --sentence)")
    p.add_argument("--aggregator", choices=["mean", "median", "sd"], default="mean")
    p.add_argument("--alpha", type=float, default=None,
                   help="threshold weight (default: 1.0 with --scores, as trained with --sentence)")
    p.set_defaults(func=cmd_mask_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "mask-demo" and args.sentence and not args.ckpt:
        parser.error("--sentence requires --ckpt")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MasktermError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
