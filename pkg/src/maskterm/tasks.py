"""Task heads for aspect term extraction (BIO tagging) and aspect sentiment
classification, with their losses, metrics, and the model that binds the
encoder and a masking strategy together."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import masking as mk
from .autodiff import ParamStore, Tensor
from .corpus import TokenizedExample
from .exceptions import ContractError, DimensionError

BIO_CLASSES = ("B", "I", "O")
BIO_INDEX = {c: i for i, c in enumerate(BIO_CLASSES)}
ASC_CLASSES = ("positive", "negative", "neutral")
ASC_INDEX = {c: i for i, c in enumerate(ASC_CLASSES)}


# -- span decoding and span-level F1 ------------------------------------------


def decode_bio_spans(tags: list[str]) -> list[tuple[int, int]]:
    """Inclusive (start, end) spans; a leading I (start or after O) is repaired
    to B so imperfect predictions still yield measurable spans."""
    spans: list[tuple[int, int]] = []
    start = None
    for i, tag in enumerate(tags):
        if tag == "B":
            if start is not None:
                spans.append((start, i - 1))
            start = i
        elif tag == "I":
            if start is None:
                start = i
        else:
            if start is not None:
                spans.append((start, i - 1))
                start = None
    if start is not None:
        spans.append((start, len(tags) - 1))
    return spans


def span_counts(pred: list[tuple[int, int]], gold: list[tuple[int, int]]) -> tuple[int, int, int]:
    """(exact matches, predicted count, gold count) for micro-averaged F1."""
    return len(set(pred) & set(gold)), len(pred), len(gold)


def ate_span_f1(pred, gold) -> tuple[float, float, float]:
    """Exact-match span precision/recall/F1.

    Empty prediction yields precision 1, empty gold yields recall 1, and F1
    is 0 whenever precision + recall is 0.
    """
    tp, n_pred, n_gold = span_counts(list(pred), list(gold))
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gold if n_gold else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


# -- losses ----------------------------------------------------------------------


def ate_loss(probs: Tensor, gold_tags: list[str]) -> Tensor:
    """BIO cross-entropy summed (not averaged) over the sentence tokens."""
    m = len(gold_tags)
    if probs.data.shape != (m, len(BIO_CLASSES)):
        raise DimensionError(f"probabilities {probs.data.shape} vs {m} gold tags")
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError("probability rows must sum to 1")
    ids = np.array([BIO_INDEX[t] for t in gold_tags])
    picked = probs[(np.arange(m), ids)]
    return -ad.tsum(ad.log_clamped(picked))


def asc_loss(probs_batch: list[Tensor], gold_classes: list[str],
             params: ParamStore, l2_lambda: float) -> Tensor:
    """Instance-averaged multiclass cross-entropy plus (lambda/2) * ||theta||^2
    over every stored parameter."""
    if not probs_batch:
        raise ContractError("asc_loss needs a non-empty batch")
    if len(probs_batch) != len(gold_classes):
        raise DimensionError(f"{len(probs_batch)} predictions vs {len(gold_classes)} labels")
    total = Tensor(0.0)
    for probs, gold in zip(probs_batch, gold_classes):
        picked = probs[ASC_INDEX[gold]]
        total = ad.add(total, ad.log_clamped(picked))
    loss = ad.mul(total, -1.0 / len(probs_batch))
    if l2_lambda != 0.0:
        loss = ad.add(loss, ad.mul(params.l2_sum(), l2_lambda / 2.0))
    return loss


# -- metrics -----------------------------------------------------------------------


def asc_metrics(preds: list[str], golds: list[str]):
    """Accuracy and macro-F1 over the three polarity classes; classes absent
    from both sides are left out of the macro mean."""
    if not preds or len(preds) != len(golds):
        raise ContractError("need non-empty, aligned prediction/gold lists")
    accuracy = sum(p == g for p, g in zip(preds, golds)) / len(golds)
    per_class: dict[str, dict[str, float]] = {}
    f1s = []
    for cls in ASC_CLASSES:
        tp = sum(1 for p, g in zip(preds, golds) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(preds, golds) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(preds, golds) if p != cls and g == cls)
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[cls] = {"tp": tp, "fp": fp, "fn": fn, "f1": f1}
        f1s.append(f1)
    macro = sum(f1s) / len(f1s) if f1s else 0.0
    return accuracy, macro, per_class


@dataclass
class EvalReport:
    ate: dict | None = None          # {"p", "r", "f1"}
    asc: dict | None = None          # {"acc", "macro_f1"}
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "ate": self.ate,
            "asc": self.asc,
            "per_class": self.per_class,
        }
        return json.dumps(payload, sort_keys=True)


# -- model -------------------------------------------------------------------------


@dataclass
class TaskOutput:
    probs: Tensor                    # (m, 3) for ATE, (3,) for ASC
    decision: mk.MaskDecision | None
    inp: enc.ModelInput
    attn: Tensor | None = None


class AbsaModel:
    """Encoder + one masking strategy + one task head, parameters included."""

    def __init__(self, task: str, enc_cfg: enc.EncoderConfig, mask_cfg: mk.MaskConfig,
                 vocab: enc.Vocab, seed: int):
        if task not in ("ate", "asc"):
            raise ContractError(f"unknown task {task!r}")
        self.task = task
        self.enc_cfg = enc_cfg
        self.mask_cfg = mask_cfg
        self.vocab = vocab
        self.seed = seed
        self.params = ParamStore()
        self.frozen: set[str] = set()
        rng = np.random.default_rng(seed)
        enc.init_encoder_params(self.params, enc_cfg, rng)
        self._init_mask_params()
        self._init_head(rng)
        self.mask_d_k = enc_cfg.hidden

    def _needs_attention(self) -> bool:
        s = self.mask_cfg.strategy
        return s in ("actm", "fixed") or (s == "amom" and self.task == "asc")

    def _init_mask_params(self) -> None:
        cfg = self.mask_cfg
        if self._needs_attention():
            self.params.add("mask.w_a", np.zeros(self.enc_cfg.hidden))
        if cfg.strategy == "actm":
            if cfg.learnable:
                self.params.add("mask.alpha", cfg.resolved_init("alpha_init", self.task))
            else:
                self.params.add("mask.alpha", 1.0)
                self.frozen.add("mask.alpha")
            if self.task == "asc":
                if cfg.learnable:
                    self.params.add("mask.gamma", cfg.resolved_init("gamma_init", self.task))
                    self.params.add("mask.beta", cfg.resolved_init("beta_init", self.task))
                else:
                    self.params.add("mask.gamma", 1.0)
                    self.params.add("mask.beta", 1.0)
                    self.frozen.update({"mask.gamma", "mask.beta"})
        elif cfg.strategy == "aam":
            self.params.add("mask.z", cfg.aam_span_init)

    def _init_head(self, rng: np.random.Generator) -> None:
        hidden = self.enc_cfg.hidden
        if self.task == "ate":
            self.params.add("head.ate.W", np.zeros((hidden, len(BIO_CLASSES))))
            self.params.add("head.ate.b", np.zeros(len(BIO_CLASSES)))
        else:
            self.params.add("head.asc.W", np.zeros((2 * hidden, len(ASC_CLASSES))))
            self.params.add("head.asc.b", np.zeros(len(ASC_CLASSES)))

    # -- shared plumbing ------------------------------------------------------

    def actm_params(self) -> mk.ActmParams:
        one = Tensor(1.0)
        return mk.ActmParams(
            w_a=self.params["mask.w_a"],
            alpha=self.params["mask.alpha"] if "mask.alpha" in self.params else one,
            gamma=self.params["mask.gamma"] if "mask.gamma" in self.params else one,
            beta=self.params["mask.beta"] if "mask.beta" in self.params else one,
            aggregator=self.mask_cfg.aggregator,
            d_k=self.mask_d_k,
            learnable=self.mask_cfg.learnable,
        )

    def _encode_input(self, inp: enc.ModelInput, train: bool,
                      rng: np.random.Generator | None,
                      masked_content: frozenset[int]) -> enc.EncodedSequence:
        emb = enc.embed_tokens(self.params, self.enc_cfg, inp)
        if masked_content:
            keep = np.ones((len(inp), 1))
            for c in masked_content:
                keep[inp.content_positions[c]] = 0.0
            emb = ad.mul(emb, Tensor(keep))
        return enc.encode(self.params, self.enc_cfg, emb, train_mode=train, rng=rng)

    def _mask_states(self, seq: enc.EncodedSequence, inp: enc.ModelInput,
                     surrogate: bool, aspect_vec: Tensor | None = None):
        """Strategy dispatch: returns (states for the head, decision, attn)."""
        cfg = self.mask_cfg
        states = seq.states
        if cfg.strategy == "none" or cfg.strategy == "amom":
            attn = None
            if self._needs_attention():
                attn = mk.token_attention(states, self.params["mask.w_a"], self.mask_d_k)
            return states, None, attn
        if cfg.strategy == "aam":
            z = ad.clamp(self.params["mask.z"], 0.0, float(self.enc_cfg.max_len))
            remixed = mk.aam_remix(states, z, cfg.aam_ramp, self.mask_d_k)
            return remixed, None, None
        attn = mk.token_attention(states, self.params["mask.w_a"], self.mask_d_k)
        if cfg.strategy == "fixed":
            tau = mk.fixed_threshold(attn, cfg.fixed_tau)
        else:
            actm = self.actm_params()
            relevance = None
            if aspect_vec is not None:
                relevance = mk.aspect_relevance(states, attn, aspect_vec, actm.beta)
            tau = mk.actm_threshold(attn, actm, relevance=relevance)
        decision = mk.apply_mask(attn, tau, states, protected=inp.protected, surrogate=surrogate)
        return decision.masked_states, decision, attn

    # -- task forwards ------------------------------------------------------------

    def forward_ate(self, example: TokenizedExample, train: bool = False,
                    surrogate: bool = False, rng: np.random.Generator | None = None,
                    masked_content: frozenset[int] = frozenset()) -> TaskOutput:
        inp = enc.ate_input(example, self.vocab)
        seq = self._encode_input(inp, train, rng, masked_content)
        states, decision, attn = self._mask_states(seq, inp, surrogate)
        logits = ad.add(ad.matmul(states, self.params["head.ate.W"]), self.params["head.ate.b"])
        content = logits[inp.content_positions]
        return TaskOutput(ad.softmax(content, axis=-1), decision, inp, attn)

    def forward_asc(self, example: TokenizedExample, aspect_idx: int, train: bool = False,
                    surrogate: bool = False, rng: np.random.Generator | None = None,
                    masked_content: frozenset[int] = frozenset()) -> TaskOutput:
        inp = enc.asc_input(example, aspect_idx, self.vocab)
        seq = self._encode_input(inp, train, rng, masked_content)
        span = (int(inp.aspect_positions[0]), int(inp.aspect_positions[-1]))
        aspect_vec = enc.pool_aspect(seq.states, span)
        states, decision, attn = self._mask_states(seq, inp, surrogate, aspect_vec=aspect_vec)
        if self.mask_cfg.strategy == "aam":
            pooled = enc.pool_aspect(states, span)
        else:
            content = states[inp.content_positions]
            if decision is not None and not surrogate:
                denom = max(1, int(decision.kept[inp.content_positions].sum()))
            else:
                # surrogate mode needs a perturbation-stable constant divisor
                denom = len(inp.content_positions)
            pooled = ad.mul(ad.tsum(content, axis=0), 1.0 / denom)
        feats = ad.reshape(ad.concat([seq.cls_state, pooled], axis=0), (1, -1))
        logits = ad.add(ad.matmul(feats, self.params["head.asc.W"]), self.params["head.asc.b"])
        probs = ad.softmax(ad.reshape(logits, (-1,)))
        return TaskOutput(probs, decision, inp, attn)

    # -- prediction helpers ----------------------------------------------------------

    def predict_bio(self, example: TokenizedExample) -> list[str]:
        with ad.no_grad():
            out = self.forward_ate(example)
        return [BIO_CLASSES[i] for i in out.probs.data.argmax(axis=1)]

    def predict_polarity(self, example: TokenizedExample, aspect_idx: int) -> str:
        with ad.no_grad():
            out = self.forward_asc(example, aspect_idx)
        return ASC_CLASSES[int(out.probs.data.argmax())]


def ate_forward(model: AbsaModel, example: TokenizedExample, **kw) -> TaskOutput:
    """Per-token BIO probabilities for the sentence's content tokens."""
    return model.forward_ate(example, **kw)


def asc_forward(model: AbsaModel, example: TokenizedExample, aspect_idx: int, **kw) -> TaskOutput:
    """Polarity probabilities for one aspect of the sentence."""
    return model.forward_asc(example, aspect_idx, **kw)
