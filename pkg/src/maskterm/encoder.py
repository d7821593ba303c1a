"""Trainable self-attention encoder producing contextual token states.

Input rows concatenate word, POS, and dependency features; [CLS]/[SEP] use
reserved vocabulary ids with zeroed POS/dependency parts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .corpus import DEP_DIM, POS_TAGS, TokenizedExample
from .exceptions import CompatibilityError, ConfigError, ContractError, LengthError

UNK_ID = 0
CLS_ID = 1
SEP_ID = 2
RESERVED = 3

CHECKPOINT_VERSION = "ckpt_v1"


@dataclass
class EncoderConfig:
    vocab_size: int = 0          # content words; reserved ids come on top
    d_w: int = 32
    d_p: int = 8
    d_D: int = DEP_DIM
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout_rate: float = 0.1
    layernorm_eps: float = 1e-12
    max_len: int = 128

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.layernorm_eps <= 0.0:
            raise ConfigError("layernorm_eps must be positive")

    @property
    def d_k(self) -> int:
        return self.hidden // self.n_heads

    @property
    def d_in(self) -> int:
        return self.d_w + self.d_p + self.d_D


class Vocab:
    """Deterministic word-id map with UNK/CLS/SEP reserved up front."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self._ids = {w: i + RESERVED for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, examples: list[TokenizedExample]) -> "Vocab":
        seen = sorted({tok for ex in examples for tok in ex.tokens})
        return cls(seen)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.words) + RESERVED


@dataclass
class ModelInput:
    """One encoder-ready sequence plus bookkeeping for masking and losses."""

    token_ids: np.ndarray            # (n,) int
    pos_ids: np.ndarray              # (n,) int; ignored where special
    dep: np.ndarray                  # (n, d_D)
    special: np.ndarray              # (n,) bool, True at [CLS]/[SEP]
    content_positions: np.ndarray    # indices of the sentence tokens
    protected: set[int] = field(default_factory=set)
    aspect_positions: np.ndarray | None = None   # in-sentence aspect span positions
    aspect_tail_positions: np.ndarray | None = None  # appended aspect copy (ASC)

    def __len__(self) -> int:
        return len(self.token_ids)


def ate_input(example: TokenizedExample, vocab: Vocab) -> ModelInput:
    """[CLS] + sentence + [SEP]."""
    n = len(example.tokens)
    ids = np.array([CLS_ID] + [vocab.id_of(t) for t in example.tokens] + [SEP_ID])
    pos = np.array([0] + example.pos_ids + [0])
    dep = np.vstack([np.zeros((1, DEP_DIM)), example.dep_features, np.zeros((1, DEP_DIM))])
    special = np.zeros(n + 2, dtype=bool)
    special[0] = special[-1] = True
    return ModelInput(
        token_ids=ids,
        pos_ids=pos,
        dep=dep,
        special=special,
        content_positions=np.arange(1, n + 1),
        protected={0, n + 1},
    )


def asc_input(example: TokenizedExample, aspect_idx: int, vocab: Vocab) -> ModelInput:
    """[CLS] + sentence + [SEP] + aspect tokens + [SEP]."""
    aspect = example.aspects[aspect_idx]
    if aspect.token_span is None:
        raise ContractError(f"aspect {aspect.term!r} has no token-span projection")
    s, e = aspect.token_span
    n = len(example.tokens)
    asp_tokens = example.tokens[s:e + 1]
    asp_pos = example.pos_ids[s:e + 1]
    asp_dep = example.dep_features[s:e + 1]
    ids = np.array(
        [CLS_ID] + [vocab.id_of(t) for t in example.tokens] + [SEP_ID]
        + [vocab.id_of(t) for t in asp_tokens] + [SEP_ID]
    )
    pos = np.array([0] + example.pos_ids + [0] + asp_pos + [0])
    dep = np.vstack([
        np.zeros((1, DEP_DIM)), example.dep_features, np.zeros((1, DEP_DIM)),
        asp_dep, np.zeros((1, DEP_DIM)),
    ])
    total = len(ids)
    special = np.zeros(total, dtype=bool)
    special[0] = special[n + 1] = special[total - 1] = True
    in_sentence = np.arange(s + 1, e + 2)
    tail = np.arange(n + 2, total - 1)
    protected = {0, n + 1, total - 1} | set(in_sentence.tolist()) | set(tail.tolist())
    return ModelInput(
        token_ids=ids,
        pos_ids=pos,
        dep=dep,
        special=special,
        content_positions=np.arange(1, n + 1),
        protected=protected,
        aspect_positions=in_sentence,
        aspect_tail_positions=tail,
    )


@dataclass
class EncodedSequence:
    states: Tensor                     # (n, hidden)
    cls_state: Tensor                  # (hidden,)
    attention_maps: list[list[np.ndarray]]  # per layer, per head, (n, n)


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    pe = np.zeros((n, dim))
    position = np.arange(n)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-np.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: dim // 2])
    return pe


# Output-gain initialization: task heads start at zero and move at most
# lr * steps in absolute terms, so their logits only reach useful magnitude
# within a short small-LR run when the final states carry a large norm.
FINAL_GAIN_INIT = 6.0


def init_encoder_params(params: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    """Register embedding, projection, and layer weights.

    The input projection is orthogonal (keeps lexical feature geometry), and
    the last layer-norm gain starts high so zero-initialized heads see
    large-norm features.
    """
    params.add("emb.word", rng.normal(0.0, 1.0, size=(len_with_reserved(cfg), cfg.d_w)))
    params.add("emb.pos", rng.normal(0.0, 1.0, size=(len(POS_TAGS), cfg.d_p)))
    side = max(cfg.d_in, cfg.hidden)
    ortho, _ = np.linalg.qr(rng.normal(size=(side, side)))
    params.add("enc.in_proj.W", ortho[:cfg.d_in, :cfg.hidden].copy())
    params.add("enc.in_proj.b", np.zeros(cfg.hidden))
    attn_scale = 1.0 / np.sqrt(cfg.hidden)
    for layer in range(cfg.n_layers):
        p = f"enc.L{layer}"
        params.add(f"{p}.Wq", rng.normal(0.0, attn_scale, size=(cfg.hidden, cfg.hidden)))
        params.add(f"{p}.Wk", rng.normal(0.0, attn_scale, size=(cfg.hidden, cfg.hidden)))
        params.add(f"{p}.Wv", rng.normal(0.0, attn_scale, size=(cfg.hidden, cfg.hidden)))
        params.add(f"{p}.Wo", rng.normal(0.0, attn_scale, size=(cfg.hidden, cfg.hidden)))
        params.add(f"{p}.bo", np.zeros(cfg.hidden))
        params.add(f"{p}.ln1.g", np.ones(cfg.hidden))
        params.add(f"{p}.ln1.b", np.zeros(cfg.hidden))
        params.add(f"{p}.ffn.W1", rng.normal(0.0, attn_scale, size=(cfg.hidden, cfg.d_ff)))
        params.add(f"{p}.ffn.b1", np.zeros(cfg.d_ff))
        params.add(f"{p}.ffn.W2", rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ff), size=(cfg.d_ff, cfg.hidden)))
        params.add(f"{p}.ffn.b2", np.zeros(cfg.hidden))
        params.add(f"{p}.ln2.g", np.ones(cfg.hidden))
        params.add(f"{p}.ln2.b", np.zeros(cfg.hidden))
    params[f"enc.L{cfg.n_layers - 1}.ln2.g"].data = np.full(cfg.hidden, FINAL_GAIN_INIT)


def len_with_reserved(cfg: EncoderConfig) -> int:
    return cfg.vocab_size + RESERVED


def embed_tokens(params: ParamStore, cfg: EncoderConfig, inp: ModelInput) -> Tensor:
    """Concatenate word/POS/dependency features, word part carrying the
    sinusoidal position signal."""
    n = len(inp)
    if n > cfg.max_len:
        raise LengthError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    word = ad.gather_rows(params["emb.word"], inp.token_ids)
    word = ad.add(word, Tensor(sinusoidal_encoding(n, cfg.d_w)))
    pos = ad.gather_rows(params["emb.pos"], inp.pos_ids)
    pos_mask = (~inp.special).astype(np.float64)[:, None]
    pos = ad.mul(pos, Tensor(pos_mask))
    dep = Tensor(inp.dep)
    return ad.concat([word, pos, dep], axis=1)


layer_norm = ad.layer_norm


def encode(
    params: ParamStore,
    cfg: EncoderConfig,
    embedded: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedSequence:
    """Stack of self-attention blocks; deterministic whenever train_mode is off."""
    if train_mode and cfg.dropout_rate > 0.0 and rng is None:
        raise ContractError("train_mode with dropout needs a random generator")

    def drop(t: Tensor) -> Tensor:
        if train_mode and cfg.dropout_rate > 0.0:
            return ad.dropout(t, cfg.dropout_rate, rng)
        return t

    dropping = train_mode and cfg.dropout_rate > 0.0
    x = ad.affine(embedded, params["enc.in_proj.W"], params["enc.in_proj.b"])
    n = x.data.shape[0]
    scale = 1.0 / np.sqrt(cfg.d_k)
    attention_maps: list[list[np.ndarray]] = []
    for layer in range(cfg.n_layers):
        p = f"enc.L{layer}"
        q = ad.matmul(x, params[f"{p}.Wq"])
        k = ad.matmul(x, params[f"{p}.Wk"])
        v = ad.matmul(x, params[f"{p}.Wv"])
        masks = None
        if dropping:
            masks = [(rng.random((n, n)) >= cfg.dropout_rate) / (1.0 - cfg.dropout_rate)
                     for _ in range(cfg.n_heads)]
        merged, layer_maps = ad.multi_head_attention(q, k, v, cfg.n_heads, scale, drop_masks=masks)
        attention_maps.append(layer_maps)
        attn_out = drop(ad.affine(merged, params[f"{p}.Wo"], params[f"{p}.bo"]))
        x = layer_norm(ad.add(x, attn_out), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.layernorm_eps)
        hidden_act = drop(ad.gelu(ad.affine(x, params[f"{p}.ffn.W1"], params[f"{p}.ffn.b1"])))
        ff = ad.affine(hidden_act, params[f"{p}.ffn.W2"], params[f"{p}.ffn.b2"])
        x = layer_norm(ad.add(x, ff), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.layernorm_eps)
    cls_state = x[0]
    return EncodedSequence(states=x, cls_state=cls_state, attention_maps=attention_maps)


def pool_aspect(states: Tensor, span: tuple[int, int]) -> Tensor:
    """Mean of the state rows covering an inclusive token span."""
    s, e = span
    n = states.data.shape[0]
    if s > e or s < 0 or e >= n:
        raise ContractError(f"aspect span ({s}, {e}) is empty or outside 0..{n - 1}")
    return ad.tmean(states[slice(s, e + 1)], axis=0)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str, params: ParamStore, config: dict, seed: int) -> None:
    """JSON header line + little-endian float64 blob in manifest order."""
    manifest = [{"name": name, "shape": list(t.data.shape)} for name, t in params.items()]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "seed": seed,
        "manifest": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Returns (config dict, seed, ordered name->array map)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(
            f"checkpoint version {header.get('version')!r} != {CHECKPOINT_VERSION!r}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CompatibilityError("checkpoint blob shorter than its manifest")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CompatibilityError("checkpoint blob longer than its manifest")
    return header["config"], header["seed"], arrays


def encoder_config_to_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)
