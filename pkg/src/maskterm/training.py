"""Deterministic optimization loop, evaluation, and the gradient-check harness."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import masking as mk
from . import tasks
from .autodiff import Tensor
from .corpus import TokenizedExample
from .exceptions import CompatibilityError, ContractError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    task: str = "ate"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 2e-5
    l2_lambda: float = 0.01
    seed: int = 0
    mask: mk.MaskConfig = field(default_factory=mk.MaskConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)

    def __post_init__(self):
        if self.task not in ("ate", "asc"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ContractError("learning_rate must be positive")
        if self.l2_lambda < 0.0:
            raise ContractError("l2_lambda must be non-negative")


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        self.records.append(record)

    def to_ldjson(self) -> str:
        import json

        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class Adam:
    """Adam with bias correction; parameters listed in `frozen` never move."""

    def __init__(self, params: ad.ParamStore, lr: float, frozen: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.frozen = frozen or set()
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, tensor in self.params.items():
            if name in self.frozen or tensor.grad is None:
                continue
            g = tensor.grad
            self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def asc_instances(dataset: list[TokenizedExample]) -> list[tuple[TokenizedExample, int]]:
    return [(ex, i) for ex in dataset for i in range(len(ex.aspects))]


def _maskable_asc_positions(inp: enc.ModelInput) -> list[int]:
    """Content indices whose positions may be hidden by AMOM (aspect span stays)."""
    return [c for c, pos in enumerate(inp.content_positions) if pos not in inp.protected]


def _amom_ate_losses(model: tasks.AbsaModel, ex: TokenizedExample, params: mk.AmomParams,
                     train: bool, rng) -> list[Tensor]:
    gold = np.array([tasks.BIO_INDEX[t] for t in ex.bio_tags])

    def forward(masked: set[int]):
        out = model.forward_ate(ex, train=train, rng=rng, masked_content=frozenset(masked))
        return out.probs.data, tasks.ate_loss(out.probs, ex.bio_tags)

    _, losses, _ = mk.amom_regenerate(forward, gold, params, mode="ate")
    return losses


def _amom_asc_ce(model: tasks.AbsaModel, ex: TokenizedExample, aspect_idx: int,
                 params: mk.AmomParams, train: bool, rng) -> list[Tensor]:
    gold = ex.aspects[aspect_idx].polarity
    inp = enc.asc_input(ex, aspect_idx, model.vocab)
    maskable = _maskable_asc_positions(inp)
    with ad.no_grad():
        base = model.forward_asc(ex, aspect_idx)
    if base.attn is not None and maskable:
        relevance = base.attn.data[inp.content_positions[maskable]]
    else:
        relevance = np.zeros(max(len(maskable), 1))

    def forward(masked: set[int]):
        hidden = frozenset(maskable[i] for i in masked)
        out = model.forward_asc(ex, aspect_idx, train=train, rng=rng, masked_content=hidden)
        picked = out.probs[tasks.ASC_INDEX[gold]]
        ce = ad.mul(ad.log_clamped(picked), -1.0)
        return out.probs.data.reshape(1, -1), ce

    if not maskable:
        probs, ce = forward(set())
        return [ce]
    _, losses, _ = mk.amom_regenerate(
        forward, np.array([tasks.ASC_INDEX[gold]]), params, mode="asc", relevance=relevance)
    return losses


def _mean_tensor(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(total, 1.0 / len(parts))


def amom_params_from(cfg: mk.MaskConfig) -> mk.AmomParams:
    return mk.AmomParams(cfg.amom_mu_min, cfg.amom_mu_max, cfg.amom_iterations)


def batch_loss(model: tasks.AbsaModel, config: TrainConfig, batch, train: bool, rng) -> Tensor:
    """One differentiable scalar per batch.

    ATE: per-example token-summed cross-entropy, averaged over the batch.
    ASC: instance-averaged cross-entropy plus the L2 term, added once.
    AMOM averages each example's per-round losses first.
    """
    amom = config.mask.strategy == "amom"
    if config.task == "ate":
        per_example = []
        for ex in batch:
            if amom:
                losses = _amom_ate_losses(model, ex, amom_params_from(config.mask), train, rng)
                per_example.append(_mean_tensor(losses))
            else:
                out = model.forward_ate(ex, train=train, rng=rng)
                per_example.append(tasks.ate_loss(out.probs, ex.bio_tags))
        return _mean_tensor(per_example)
    ce_parts = []
    for ex, aspect_idx in batch:
        if amom:
            losses = _amom_asc_ce(model, ex, aspect_idx, amom_params_from(config.mask), train, rng)
            ce_parts.append(_mean_tensor(losses))
        else:
            out = model.forward_asc(ex, aspect_idx, train=train, rng=rng)
            picked = out.probs[tasks.ASC_INDEX[ex.aspects[aspect_idx].polarity]]
            ce_parts.append(ad.mul(ad.log_clamped(picked), -1.0))
    loss = _mean_tensor(ce_parts)
    if config.l2_lambda != 0.0:
        loss = ad.add(loss, ad.mul(model.params.l2_sum(), config.l2_lambda / 2.0))
    return loss


def train(config: TrainConfig, train_set: list[TokenizedExample],
          eval_set: list[TokenizedExample]):
    """Run the full optimization; returns (model, RunLog)."""
    if not train_set:
        raise ContractError("training set is empty")
    vocab = enc.Vocab.build(train_set)
    enc_cfg = replace(config.encoder, vocab_size=len(vocab.words))
    model = tasks.AbsaModel(config.task, enc_cfg, config.mask, vocab, config.seed)
    if config.task == "asc":
        instances = asc_instances(train_set)
        if not instances:
            raise ContractError("ASC training requires aspect annotations")
    else:
        instances = list(train_set)

    data_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)
    optimizer = Adam(model.params, config.learning_rate, frozen=model.frozen)
    log = RunLog()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = data_rng.permutation(len(instances))
        epoch_loss = 0.0
        seen = 0
        for lo in range(0, len(instances), config.batch_size):
            batch = [instances[i] for i in order[lo:lo + config.batch_size]]
            model.params.zero_grad()
            loss = batch_loss(model, config, batch, train=True, rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {lo // config.batch_size} "
                    f"(size {len(batch)}): {value!r}"
                )
            ad.backward(loss)
            optimizer.step()
            epoch_loss += value * len(batch)
            seen += len(batch)
        report = evaluate(model, eval_set, config.task)
        param_norm = float(np.sqrt(sum((t.data ** 2).sum() for t in model.params.tensors())))
        log.append(
            epoch=epoch,
            train_loss=epoch_loss / max(seen, 1),
            eval=report_metrics(report, config.task),
            wall_time_s=round(time.perf_counter() - started, 4),
            param_norm=param_norm,
        )
    return model, log


def report_metrics(report: tasks.EvalReport, task: str) -> dict:
    return dict(report.ate if task == "ate" else report.asc)


def _predict_bio_amom(model: tasks.AbsaModel, ex: TokenizedExample,
                      params: mk.AmomParams) -> list[str]:
    """Inference-time refinement: remask by prediction confidence (no gold)."""
    def forward(masked):
        with ad.no_grad():
            out = model.forward_ate(ex, masked_content=frozenset(masked))
        return out.probs.data

    probs = forward(set())
    m = probs.shape[0]
    for _ in range(params.iterations):
        confidence = probs.max(axis=1)
        ratio = float(confidence.mean())
        _, n_mask = mk.amom_mask_count(ratio, m, params)
        chosen = mk.amom_select_positions(confidence, np.ones(m, dtype=bool), n_mask)
        probs = forward(set(chosen))
    return [tasks.BIO_CLASSES[i] for i in probs.argmax(axis=1)]


def _predict_asc_amom(model: tasks.AbsaModel, ex: TokenizedExample, aspect_idx: int,
                      params: mk.AmomParams) -> str:
    inp = enc.asc_input(ex, aspect_idx, model.vocab)
    maskable = _maskable_asc_positions(inp)

    def forward(masked):
        with ad.no_grad():
            out = model.forward_asc(ex, aspect_idx, masked_content=frozenset(masked))
        return out

    out = forward(set())
    if not maskable:
        return tasks.ASC_CLASSES[int(out.probs.data.argmax())]
    probs = out.probs.data
    relevance = (out.attn.data[inp.content_positions[maskable]]
                 if out.attn is not None else np.zeros(len(maskable)))
    for _ in range(params.iterations):
        ratio = float(probs.max())
        _, n_mask = mk.amom_mask_count(ratio, len(maskable), params)
        chosen = mk.amom_select_positions(relevance, np.ones(len(maskable), dtype=bool), n_mask)
        probs = forward({maskable[i] for i in chosen}).probs.data
    return tasks.ASC_CLASSES[int(probs.argmax())]


def evaluate(model: tasks.AbsaModel, dataset: list[TokenizedExample], task: str) -> tasks.EvalReport:
    """Deterministic evaluation; dropout off. MASKTERM_THREADS > 1 shards the
    dataset across threads with an order-preserving merge."""
    threads = max(1, int(os.environ.get("MASKTERM_THREADS", "1")))
    amom = model.mask_cfg.strategy == "amom"
    amom_params = amom_params_from(model.mask_cfg) if amom else None

    if task == "ate":
        def predict(ex):
            if amom:
                return _predict_bio_amom(model, ex, amom_params)
            return model.predict_bio(ex)

        predictions = _map_ordered(predict, dataset, threads)
        tp = n_pred = n_gold = 0
        tag_counts = {c: {"tp": 0, "fp": 0, "fn": 0} for c in tasks.BIO_CLASSES}
        for ex, tags in zip(dataset, predictions):
            pred_spans = tasks.decode_bio_spans(tags)
            gold_spans = tasks.decode_bio_spans(ex.bio_tags)
            t, p, g = tasks.span_counts(pred_spans, gold_spans)
            tp += t
            n_pred += p
            n_gold += g
            for pt, gt in zip(tags, ex.bio_tags):
                if pt == gt:
                    tag_counts[gt]["tp"] += 1
                else:
                    tag_counts[pt]["fp"] += 1
                    tag_counts[gt]["fn"] += 1
        precision = tp / n_pred if n_pred else 1.0
        recall = tp / n_gold if n_gold else 1.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return tasks.EvalReport(ate={"p": precision, "r": recall, "f1": f1},
                                per_class=tag_counts)

    instances = asc_instances(dataset)
    if not instances:
        raise ContractError("ASC evaluation requires aspect annotations")

    def predict(pair):
        ex, idx = pair
        if amom:
            return _predict_asc_amom(model, ex, idx, amom_params)
        return model.predict_polarity(ex, idx)

    preds = _map_ordered(predict, instances, threads)
    golds = [ex.aspects[i].polarity for ex, i in instances]
    accuracy, macro, per_class = tasks.asc_metrics(preds, golds)
    return tasks.EvalReport(asc={"acc": accuracy, "macro_f1": macro}, per_class=per_class)


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- gradient-check harness ---------------------------------------------------------


def _tiny_example() -> TokenizedExample:
    from .corpus import make_example, AspectAnnotation

    text = "steak was great"
    return make_example(text, [AspectAnnotation("steak", 0, 5, "positive")])


def _tiny_config(strategy: str, task: str, seed: int = 11) -> TrainConfig:
    mask = mk.MaskConfig(
        strategy=strategy,
        alpha_init=0.9,
        gamma_init=0.2,
        beta_init=1.1,
        aam_span_init=1.3,
        aam_ramp=2.0,
    )
    encoder_cfg = enc.EncoderConfig(
        d_w=6, d_p=2, d_D=24, hidden=12, n_layers=1, n_heads=2, d_ff=16,
        dropout_rate=0.0, max_len=16,
    )
    return TrainConfig(task=task, seed=seed, l2_lambda=0.01, mask=mask, encoder=encoder_cfg)


def _param_groups(model: tasks.AbsaModel) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in model.params.names():
        if name.startswith("mask."):
            groups.setdefault(name.split(".", 1)[1], []).append(name)
        elif name.startswith("head."):
            groups.setdefault("head", []).append(name)
        else:
            groups.setdefault("encoder", []).append(name)
    return groups


def grad_check_suite(h: float = 1e-5, seed: int = 11) -> dict[str, dict[str, float]]:
    """Finite-difference validation of every differentiable parameter group on
    tiny models, one per strategy/task pairing.

    Threshold cuts run in surrogate mode, where the margin path is the forward
    value, so the checked objective is genuinely differentiable.
    """
    example = _tiny_example()
    report: dict[str, dict[str, float]] = {}

    quad = ad.ParamStore()
    quad.add("theta", np.random.default_rng(seed).normal(size=5))
    report["quadratic"] = {"theta": ad.finite_difference_check(lambda: quad.l2_sum(), quad, h=h)}

    def check(label: str, strategy: str, task: str):
        config = _tiny_config(strategy, task, seed=seed)
        vocab = enc.Vocab.build([example])
        enc_cfg = replace(config.encoder, vocab_size=len(vocab.words))
        model = tasks.AbsaModel(task, enc_cfg, config.mask, vocab, config.seed)
        # Heads and scoring weights start at zero in real training; randomize
        # them here so every gradient path under test is non-trivial (zero
        # heads would make upstream gradients vanish identically).
        spread_rng = np.random.default_rng(seed + 100)
        if "mask.w_a" in model.params:
            model.params["mask.w_a"].data = spread_rng.normal(0.0, 0.6, size=enc_cfg.hidden)
        for name in model.params.names():
            if name.startswith("head."):
                t = model.params[name]
                t.data = spread_rng.normal(0.0, 0.4, size=t.data.shape)

        if task == "ate":
            def objective():
                out = model.forward_ate(example, surrogate=True)
                return tasks.ate_loss(out.probs, example.bio_tags)
        else:
            def objective():
                out = model.forward_asc(example, 0, surrogate=True)
                return tasks.asc_loss([out.probs], [example.aspects[0].polarity],
                                      model.params, config.l2_lambda)

        group_errors = {}
        for group, names in _param_groups(model).items():
            names = [n for n in names if n not in model.frozen]
            if names:
                group_errors[group] = ad.finite_difference_check(objective, model.params, h=h, names=names)
        report[label] = group_errors

    check("actm_ate", "actm", "ate")
    check("actm_asc", "actm", "asc")
    check("aam_ate", "aam", "ate")
    return report


# -- checkpoints ----------------------------------------------------------------------


def model_config_dict(model: tasks.AbsaModel) -> dict:
    return {
        "task": model.task,
        "mask": asdict(model.mask_cfg),
        "encoder": enc.encoder_config_to_dict(model.enc_cfg),
        "vocab": model.vocab.words,
        "dropout_seed": model.seed + 1,
    }


def save_model(path: str, model: tasks.AbsaModel) -> None:
    enc.save_checkpoint(path, model.params, model_config_dict(model), model.seed)


def load_model(path: str) -> tasks.AbsaModel:
    config, seed, arrays = enc.load_checkpoint(path)
    try:
        enc_cfg = enc.encoder_config_from_dict(config["encoder"])
        mask_cfg = mk.MaskConfig(**config["mask"])
        vocab = enc.Vocab(config["vocab"])
        task = config["task"]
    except (KeyError, TypeError) as exc:
        raise CompatibilityError(f"checkpoint config incomplete: {exc}") from exc
    model = tasks.AbsaModel(task, enc_cfg, mask_cfg, vocab, seed)
    names = model.params.names()
    if names != list(arrays):
        raise CompatibilityError("checkpoint manifest does not match the model's parameters")
    for name in names:
        tensor = model.params[name]
        if arrays[name].shape != tensor.data.shape:
            raise CompatibilityError(
                f"parameter {name} shape {arrays[name].shape} != expected {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    return model
