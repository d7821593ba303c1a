"""Adaptive masking strategies over encoded token states.

Three adaptive families plus a fixed-threshold baseline:
  - ACTM: mask tokens whose attention score falls under a learnable,
    context-aggregated threshold (plus an aspect-relevance term for ASC).
  - AAM: soft distance ramp with a learnable span that reshapes attention
    around every position.
  - AMOM: remask a correctness-ratio-determined number of positions and
    regenerate predictions for a fixed number of rounds.

The threshold cut is a step function, so training uses a straight-through
gate: the forward pass applies the hard rule, while gradients flow through
kept scores and through the margin max(0, attn - tau). Gradient checks run
with surrogate=True, where that margin path is the forward value as well,
making the objective genuinely differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError

NEG_INF_LOGIT = -1e9


@dataclass
class MaskConfig:
    """Strategy selection plus every strategy's hyper-parameters."""

    strategy: str = "actm"            # actm | aam | amom | fixed | none
    aggregator: str = "mean"          # mean | median | sd
    learnable: bool = True            # False pins alpha = gamma = 1 (constant-weight mode)
    # None -> per-task defaults: ATE starts permissive (alpha 0.5); ASC starts
    # clause-selective with the threshold cut at mean relevance (alpha = 1 + |gamma|).
    alpha_init: float | None = None
    gamma_init: float | None = None
    beta_init: float | None = None
    fixed_tau: float = 0.05
    aam_ramp: float = 2.0
    aam_span_init: float = 2.0
    amom_mu_min: float = 0.1
    amom_mu_max: float = 0.5
    amom_iterations: int = 2

    ATE_DEFAULTS = {"alpha_init": 0.5, "gamma_init": 0.0, "beta_init": 1.0}
    ASC_DEFAULTS = {"alpha_init": 1.5, "gamma_init": -0.5, "beta_init": 4.0}

    def resolved_init(self, name: str, task: str) -> float:
        value = getattr(self, name)
        if value is not None:
            return float(value)
        defaults = self.ASC_DEFAULTS if task == "asc" else self.ATE_DEFAULTS
        return defaults[name]

    STRATEGIES = ("actm", "aam", "amom", "fixed", "none")

    def __post_init__(self):
        if self.strategy not in self.STRATEGIES:
            raise ContractError(f"unknown masking strategy {self.strategy!r}")
        if self.aggregator not in ad.AGGREGATOR_KINDS:
            raise ContractError(f"unknown aggregator {self.aggregator!r}")
        if self.aam_ramp <= 0.0:
            raise ContractError("AAM ramp length must be positive")
        if not (0.0 < self.amom_mu_min <= self.amom_mu_max <= 1.0):
            raise ContractError("need 0 < mu_min <= mu_max <= 1")
        if self.amom_iterations < 1:
            raise ContractError("AMOM needs at least one regeneration round")


@dataclass
class ActmParams:
    """Learnable pieces of the adaptive contextual threshold."""

    w_a: Tensor                       # (hidden,) attention scoring weights
    alpha: Tensor                     # scalar threshold weight
    gamma: Tensor                     # scalar relevance weight (ASC only)
    beta: Tensor                      # scalar relevance sharpness
    aggregator: str
    d_k: int
    learnable: bool = True

    def __post_init__(self):
        if self.d_k < 1:
            raise ContractError("d_k must be at least 1")
        if not self.learnable:
            if float(self.alpha.data) != 1.0 or float(self.gamma.data) != 1.0:
                raise ContractError("constant-weight mode requires alpha = gamma = 1")


@dataclass
class AamParams:
    ramp: float                       # R > 0
    z: Tensor                         # learnable span scalar
    d_k: int
    max_len: int = 128

    def __post_init__(self):
        if self.ramp <= 0.0:
            raise ContractError(f"ramp length must be positive, got {self.ramp}")


@dataclass
class AmomParams:
    mu_min: float = 0.1
    mu_max: float = 0.5
    iterations: int = 2

    def __post_init__(self):
        if not (0.0 < self.mu_min <= self.mu_max <= 1.0):
            raise ContractError(
                f"need 0 < mu_min <= mu_max <= 1, got ({self.mu_min}, {self.mu_max})"
            )
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")


@dataclass
class MaskDecision:
    """Per-token verdicts of one threshold pass, hard semantics throughout."""

    attn: np.ndarray                  # (n,) attention scores
    tau: np.ndarray                   # (n,) thresholds
    kept: np.ndarray                  # (n,) bool
    masked_scores: np.ndarray         # attn where kept, else 0
    masked_states: Tensor             # (n, hidden), masked rows zeroed
    gate: Tensor                      # (n,) multiplicative gate used downstream
    attn_t: Tensor | None = None      # differentiable attention vector
    protected: set[int] = field(default_factory=set)


# -- ACTM --------------------------------------------------------------------


def token_attention(states: Tensor, w_a: Tensor, d_k: int) -> Tensor:
    """Per-token scalar scores from the scoring vector, softmax-normalized."""
    n, hidden = states.data.shape
    if w_a.data.shape != (hidden,):
        raise DimensionError(
            f"scoring weights shape {w_a.data.shape} does not match state width {hidden}"
        )
    scores = ad.reshape(ad.matmul(states, ad.reshape(w_a, (hidden, 1))), (n,))
    return ad.softmax(ad.mul(scores, 1.0 / math.sqrt(d_k)))


def aspect_relevance(states: Tensor, attn: Tensor, aspect_vec: Tensor, beta) -> Tensor:
    """Softmax over tokens of scaled cosine between weighted token vectors and
    the aspect representation; uniform when the aspect vector is null."""
    n = states.data.shape[0]
    if float(np.linalg.norm(aspect_vec.data)) <= ad.NORM_EPS:
        return Tensor(np.full(n, 1.0 / n))
    weighted = ad.mul(states, ad.reshape(attn, (n, 1)))
    dots = ad.reshape(ad.matmul(weighted, ad.reshape(aspect_vec, (-1, 1))), (n,))
    row_norms = ad.sqrt(ad.tsum(ad.square(weighted), axis=1))
    vec_norm = ad.sqrt(ad.tsum(ad.square(aspect_vec)))
    denom = ad.clamp_min(ad.mul(row_norms, vec_norm), ad.NORM_EPS)
    cos = ad.div(dots, denom)
    live = (row_norms.data > ad.NORM_EPS).astype(np.float64)
    cos = ad.mul(cos, Tensor(live))
    return ad.softmax(ad.mul(cos, beta))


def actm_threshold(attn: Tensor, params: ActmParams, relevance: Tensor | None = None) -> Tensor:
    """Threshold vector alpha * aggregate(attn) (+ gamma * relevance per token)."""
    n = attn.data.shape[0]
    pooled = ad.aggregate(attn, params.aggregator)
    tau = ad.mul(Tensor(np.ones(n)), ad.mul(params.alpha, pooled))
    if relevance is not None:
        tau = ad.add(tau, ad.mul(relevance, params.gamma))
    return tau


def apply_mask(
    attn: Tensor,
    tau: Tensor,
    states: Tensor,
    protected: set[int] | None = None,
    surrogate: bool = False,
) -> MaskDecision:
    """Zero the state rows whose attention falls under the threshold.

    Ties are kept. Protected positions are always kept. If every unprotected
    token would be masked, the highest-attention one survives so downstream
    heads never see an all-zero context.
    """
    protected = set(protected or ())
    n = attn.data.shape[0]
    if tau.data.shape != (n,) or states.data.shape[0] != n:
        raise DimensionError(
            f"attn {attn.data.shape}, tau {tau.data.shape}, states {states.data.shape} misaligned"
        )
    rule_kept = attn.data >= tau.data
    prot_mask = np.zeros(n, dtype=bool)
    for i in protected:
        if not 0 <= i < n:
            raise ContractError(f"protected index {i} outside 0..{n - 1}")
        prot_mask[i] = True
    kept = rule_kept | prot_mask
    free = ~prot_mask
    if free.any() and not (kept & free).any():
        scores = np.where(free, attn.data, -np.inf)
        kept[int(np.argmax(scores))] = True

    margin = ad.relu(ad.sub(attn, tau))
    if surrogate:
        gate = ad.add(margin, Tensor(prot_mask.astype(np.float64)))
    else:
        gate = ad.straight_through(margin, kept.astype(np.float64))
    masked_states = ad.mul(states, ad.reshape(gate, (n, 1)))
    return MaskDecision(
        attn=attn.data.copy(),
        tau=tau.data.copy(),
        kept=kept,
        masked_scores=np.where(kept, attn.data, 0.0),
        masked_states=masked_states,
        gate=gate,
        attn_t=attn,
        protected=protected,
    )


def fixed_threshold(attn: Tensor, tau_value: float) -> Tensor:
    """Constant threshold vector for the non-adaptive baseline."""
    return Tensor(np.full(attn.data.shape[0], float(tau_value)))


# -- AAM ----------------------------------------------------------------------


def aam_soft_mask(x, z, ramp: float):
    """Soft span mask min[max[(R + z - x)/R, 0], 1]: 1 inside the span,
    linear ramp of length R, 0 beyond."""
    if ramp <= 0.0:
        raise ContractError(f"ramp length must be positive, got {ramp}")
    value = (ramp + z - np.asarray(x, dtype=np.float64)) / ramp
    return np.clip(value, 0.0, 1.0)


def _soft_mask_tensor(distances: np.ndarray, z: Tensor, ramp: float) -> Tensor:
    scaled = ad.mul(ad.sub(ad.add(z, ramp), Tensor(distances)), 1.0 / ramp)
    return ad.clamp(scaled, 0.0, 1.0)


def aam_ratio(mask_values) -> float | Tensor:
    """Masking ratio: mean of the soft mask over the sequence."""
    if isinstance(mask_values, Tensor):
        return ad.tmean(mask_values)
    values = np.asarray(mask_values, dtype=np.float64)
    if values.size == 0:
        raise DimensionError("masking ratio of an empty vector")
    return float(values.mean())


def aam_span_bounds(p: int, z: float, n: int) -> tuple[int, int]:
    """Integer attention-window bounds around position p, clamped into range."""
    if not 0 <= p < n:
        raise ContractError(f"position {p} outside sequence of length {n}")
    reach = math.ceil(z)
    return max(0, min(p - reach, n - 1)), max(0, min(p + reach, n - 1))


def aam_attention(query_pos: int, scores: Tensor, z, ramp: float) -> Tensor:
    """Attention row for one query: logits modulated by soft-mask * ratio, then
    softmax restricted to the soft mask's support (outside weights exactly 0)."""
    n = scores.data.shape[0]
    if not 0 <= query_pos < n:
        raise ContractError(f"query position {query_pos} outside sequence of length {n}")
    distances = np.abs(np.arange(n) - query_pos).astype(np.float64)
    z_t = z if isinstance(z, Tensor) else Tensor(float(z))
    m = _soft_mask_tensor(distances, z_t, ramp)
    support = m.data > 0.0
    if not support.any():
        one_hot = np.zeros(n)
        one_hot[query_pos] = 1.0
        return Tensor(one_hot)
    ratio = ad.tmean(m)
    modulated = ad.mul(ad.mul(scores, m), ratio)
    barrier = np.where(support, 0.0, NEG_INF_LOGIT)
    return ad.softmax(ad.add(modulated, Tensor(barrier)))


def aam_remix(states: Tensor, z: Tensor, ramp: float, d_k: int) -> Tensor:
    """Re-aggregate every position from its learnable span: row p becomes the
    aam_attention-weighted mix of nearby states.

    Content logits use row-normalized states so the softmax temperature does
    not depend on the state norm."""
    n = states.data.shape[0]
    norms = ad.clamp_min(ad.sqrt(ad.tsum(ad.square(states), axis=1, keepdims=True)), ad.NORM_EPS)
    unit = ad.div(states, norms)
    logits = ad.mul(ad.matmul(unit, unit.T), math.sqrt(d_k))
    rows = [aam_attention(p, logits[p], z, ramp) for p in range(n)]
    return ad.matmul(ad.stack_rows(rows), states)


# -- AMOM --------------------------------------------------------------------------


def amom_correctness_ratio(pred, gold) -> float:
    """Fraction of positions where prediction equals gold."""
    pred = list(pred)
    gold = list(gold)
    if len(pred) != len(gold):
        raise ContractError(f"length mismatch: {len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise ContractError("correctness ratio of empty sequences")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def amom_mask_count(ratio: float, length: int, params: AmomParams) -> tuple[float, int]:
    """Masking ratio mu = mu_max - (mu_max - mu_min) * R (linear, decreasing)
    and the resulting count, half-up rounded and clamped into [1, length]."""
    if length < 1:
        raise ContractError(f"label length must be >= 1, got {length}")
    mu = params.mu_max - (params.mu_max - params.mu_min) * float(ratio)
    n_mask = int(math.floor(mu * length + 0.5))
    return mu, max(1, min(n_mask, length))


def amom_select_positions(gold_probs: np.ndarray, correct: np.ndarray, n_mask: int) -> list[int]:
    """Positions to remask: incorrect ones first, then lowest-confidence correct
    ones, index-ordered within ties."""
    gold_probs = np.asarray(gold_probs, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if gold_probs.shape != correct.shape:
        raise DimensionError("gold_probs and correct flags misaligned")
    order = np.lexsort((np.arange(gold_probs.size), gold_probs, correct.astype(np.int64)))
    return [int(i) for i in order[:n_mask]]


def amom_regenerate(forward, gold_ids: np.ndarray, params: AmomParams, mode: str = "ate",
                    relevance: np.ndarray | None = None):
    """Iterative remask-and-regenerate loop.

    `forward(masked: set[int])` returns (probs ndarray (m, C), loss Tensor or
    None) for the gold-aligned positions, with the listed input rows zeroed.
    In "ate" mode positions are selected by lowest gold-label probability;
    in "asc" mode by lowest `relevance`. Returns (final probs, losses per
    round including the unmasked first pass, masked sets per round).
    """
    if mode not in ("ate", "asc"):
        raise ContractError(f"unknown regeneration mode {mode!r}")
    gold_ids = np.asarray(gold_ids)
    m = gold_ids.size
    if mode == "asc" and relevance is None:
        raise ContractError("asc-mode regeneration needs a per-position relevance vector")
    maskable = m if mode == "ate" else len(relevance)
    probs, loss = forward(set())
    losses = [loss]
    masked_history: list[set[int]] = []
    for _ in range(params.iterations):
        pred = probs.argmax(axis=-1)
        ratio = amom_correctness_ratio(pred.tolist(), gold_ids.tolist())
        _, n_mask = amom_mask_count(ratio, maskable, params)
        if mode == "ate":
            gold_probs = probs[np.arange(m), gold_ids]
            chosen = amom_select_positions(gold_probs, pred == gold_ids, n_mask)
        else:
            chosen = amom_select_positions(np.asarray(relevance, dtype=np.float64),
                                           np.ones(maskable, dtype=bool), n_mask)
        masked = set(chosen)
        masked_history.append(masked)
        probs, loss = forward(masked)
        losses.append(loss)
    return probs, losses, masked_history


# -- trace output -------------------------------------------------------------------


def format_mask_trace(tokens: list[str], decision: MaskDecision) -> str:
    """TSV trace: token, attention, threshold, kept, with total and mean rows."""
    lines = ["token\tattn\ttau\tkept"]
    for tok, a, t, k in zip(tokens, decision.attn, decision.tau, decision.kept):
        lines.append(f"{tok}\t{a:.6f}\t{t:.6f}\t{'yes' if k else 'no'}")
    total = float(decision.attn.sum())
    lines.append(f"total\t{total:.6f}")
    lines.append(f"mean\t{total / len(decision.attn):.6f}")
    return "\n".join(lines) + "\n"
