"""Test-time adaptation and evaluation.

Each test instance gets its own fresh parameter copy: a few plain gradient
steps on the self-supervised reconstruction loss (a fresh mask per step),
then greedy decoding with the adapted parameters.  Nothing persists across
instances, no ground truth is ever visible to the adaptation path, and the
per-instance mask stream is seeded from the instance id so evaluation is
reproducible.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .meta import derive_rng, prepare_image
from .metrics import EvalPair, cer, levenshtein, loer, map_cer, wer, word_tokens
from .model import ModelParams, decode_step, encode, reconstruct
from .objectives import MaskSpec, SsimConfig, mask_image, ssim_loss
from .tensor import NonFiniteError, ParamSet, Tensor, grad
from .tokens import Dictionary, TokenSequence, parse, strip_layout, to_layout_graph


@dataclass(frozen=True)
class AdaptConfig:
    """Per-instance adaptation knobs; adaptation never persists (restore)."""

    steps: int = 3
    lr: float = 1e-3  # defaults to the training inner rate
    mask: MaskSpec = field(default_factory=MaskSpec)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    restore: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("adaptation steps must be >= 0")
        if not self.restore:
            raise ValueError("adaptation state must always be discarded per instance")


@dataclass
class AdaptInfo:
    aux_before: float = float("nan")
    aux_after: float = float("nan")
    warning: str | None = None


def _aux_loss_on_view(
    params: ModelParams, masked: Tensor, clean: Tensor, valid, cfg: AdaptConfig
) -> Tensor:
    rec = reconstruct(params.shared, params.auxiliary, masked, params.arch)
    mask_arg = None if valid.all() else valid
    return ssim_loss(rec, clean, cfg.ssim, mask_arg)


def adapt_instance(
    params: ModelParams,
    image: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, AdaptInfo]:
    """Gradient steps on the auxiliary loss for one instance.

    Returns a fresh adapted copy (the input is never modified) plus the
    auxiliary loss measured on a fixed view before and after adaptation.
    The primary head is untouched.  A non-finite loss aborts adaptation and
    returns the original parameters with a warning.
    """
    info = AdaptInfo()
    if cfg.steps == 0:
        return params, info
    padded, valid = prepare_image(image, params.arch)
    clean = Tensor(padded)
    meter_view, _ = mask_image(padded, cfg.mask, rng)
    shared, aux = params.shared, params.auxiliary
    try:
        info.aux_before = float(
            _aux_loss_on_view(params, meter_view, clean, valid, cfg).data
        )
        for step in range(cfg.steps):
            if step == 0:
                masked = meter_view
            else:
                masked, _ = mask_image(padded, cfg.mask, rng)
            current = ModelParams(shared, params.primary, aux, params.arch)
            loss = _aux_loss_on_view(current, masked, clean, valid, cfg)
            grads = grad(loss, shared.merged(aux), create_graph=False)

            def step_param(name: str, p: Tensor) -> Tensor:
                data = p.data - cfg.lr * grads[name].data.astype(p.data.dtype)
                return Tensor(data, requires_grad=True)

            shared = shared.map(step_param)
            aux = aux.map(step_param)
        adapted = ModelParams(shared, params.primary, aux, params.arch)
        info.aux_after = float(
            _aux_loss_on_view(adapted, meter_view, clean, valid, cfg).data
        )
        return adapted, info
    except NonFiniteError as exc:
        info.warning = f"adaptation aborted: {exc}"
        return params, info


def greedy_decode(
    params: ModelParams, image: np.ndarray, max_len: int | None = None
) -> TokenSequence:
    """Argmax decoding from <sos> until <eot> or the length cap.

    Ties break toward the lowest token id (argmax semantics), and the run is
    fully deterministic.
    """
    arch = params.arch
    max_len = arch.max_len if max_len is None else max_len
    if max_len > arch.max_len:
        raise ValueError(f"max_len {max_len} exceeds the model cap {arch.max_len}")
    padded, _ = prepare_image(image, arch)
    features = encode(params.shared, padded, arch)
    prefix = [0]
    while len(prefix) < max_len:
        dist = decode_step(params.primary, features, TokenSequence(prefix), arch)
        tok = int(np.argmax(dist.data))
        prefix.append(tok)
        if tok == 1:  # <eot>
            break
    return TokenSequence(prefix)


# -- evaluation ------------------------------------------------------------------


@dataclass
class InstanceRecord:
    """Everything needed to recompute the corpus aggregates."""

    id: str
    pred_tokens: str = ""
    gt_tokens: str = ""
    char_dist: int = 0
    char_len: int = 0
    word_dist: int = 0
    word_len: int = 0
    ged: int = 0
    gt_graph_size: int = 0
    cer: float = 0.0
    wer: float = 0.0
    aux_before: float = float("nan")
    aux_after: float = float("nan")
    adapt_warning: str | None = None
    error: str | None = None


@dataclass
class EvalReport:
    """One evaluation pass (adapted or not) over a dataset split."""

    split: str
    adapted: bool
    records: list[InstanceRecord]
    aggregates: dict[str, float]

    def ok_records(self) -> list[InstanceRecord]:
        return [r for r in self.records if r.error is None]


def instance_rng(doc_id: str, salt: int = 0) -> np.random.Generator:
    """Reproducible per-instance stream derived from the instance id."""
    return np.random.default_rng(
        np.random.SeedSequence([zlib.crc32(doc_id.encode("utf-8")), 23, salt])
    )


def worker_count() -> int:
    env = os.environ.get("DOCTTT_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return os.cpu_count() or 1


def _evaluate_one(
    doc_id: str,
    dataset,
    params: ModelParams,
    adapt: AdaptConfig | None,
    dictionary: Dictionary,
    max_nodes: int,
    decode_fn,
) -> InstanceRecord:
    rec = InstanceRecord(id=doc_id)
    try:
        inst = dataset.load(doc_id)
    except Exception as exc:  # unreadable instance becomes an error row
        rec.error = str(exc)
        return rec
    model = params
    if adapt is not None and adapt.steps > 0:
        model, info = adapt_instance(params, inst.image, adapt, instance_rng(doc_id))
        rec.aux_before = info.aux_before
        rec.aux_after = info.aux_after
        rec.adapt_warning = info.warning
    pred = decode_fn(model, inst.image) if decode_fn else greedy_decode(model, inst.image)
    rec.pred_tokens = dictionary.to_text(pred)
    rec.gt_tokens = dictionary.to_text(inst.tokens)
    gt_text = strip_layout(inst.tokens, dictionary)
    pred_text = strip_layout(pred, dictionary)
    rec.char_dist = levenshtein(pred_text, gt_text)
    rec.char_len = len(gt_text)
    gt_words = word_tokens(gt_text)
    rec.word_dist = levenshtein(word_tokens(pred_text), gt_words)
    rec.word_len = len(gt_words)
    rec.cer = 100.0 * rec.char_dist / max(1, rec.char_len)
    rec.wer = 100.0 * rec.word_dist / max(1, rec.word_len)
    from .metrics import ged as ged_fn

    gt_graph = to_layout_graph(parse(inst.tokens, dictionary, lenient=False)[0])
    pred_graph = to_layout_graph(parse(pred, dictionary, lenient=True)[0])
    rec.ged = ged_fn(gt_graph, pred_graph, max_nodes=max_nodes)
    rec.gt_graph_size = gt_graph.n_nodes + gt_graph.n_edges
    return rec


def evaluate(
    dataset,
    split: str,
    params: ModelParams,
    adapt: AdaptConfig | None,
    dictionary: Dictionary | None = None,
    max_nodes: int = 12,
    decode_fn=None,
) -> EvalReport:
    """Per-instance (optionally adapted) decoding plus the four corpus metrics.

    Instances are independent; parallel workers (DOCTTT_THREADS) share
    nothing and results merge in instance-id order.  Unreadable instances
    become error rows and are excluded from aggregates.
    """
    dictionary = dictionary or dataset.dictionary
    ids = dataset.split_ids(split)
    workers = min(worker_count(), max(1, len(ids)))

    def job(doc_id: str) -> InstanceRecord:
        return _evaluate_one(
            doc_id, dataset, params, adapt, dictionary, max_nodes, decode_fn
        )

    if workers <= 1:
        records = [job(i) for i in ids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, ids))

    ok = [r for r in records if r.error is None]
    aggregates: dict[str, float] = {
        "n_instances": float(len(records)),
        "n_errors": float(len(records) - len(ok)),
    }
    if ok:
        pairs = [
            EvalPair(dictionary.from_text(r.pred_tokens), dictionary.from_text(r.gt_tokens), r.id)
            for r in ok
        ]
        aggregates["cer"] = cer(pairs, dictionary)
        aggregates["wer"] = wer(pairs, dictionary)
        aggregates["loer"] = loer(pairs, dictionary, max_nodes=max_nodes)
        aggregates["map_cer"] = map_cer(pairs, dictionary)
        if adapt is not None and adapt.steps > 0:
            measured = [r for r in ok if np.isfinite(r.aux_before)]
            if measured:
                improved = sum(1 for r in measured if r.aux_after <= r.aux_before)
                aggregates["aux_improved_frac"] = improved / len(measured)
                aggregates["aux_before_mean"] = float(
                    np.mean([r.aux_before for r in measured])
                )
                aggregates["aux_after_mean"] = float(
                    np.mean([r.aux_after for r in measured])
                )
    return EvalReport(split=split, adapted=bool(adapt and adapt.steps > 0),
                      records=records, aggregates=aggregates)


@dataclass
class ComparisonReport:
    """Adapted and baseline passes over the same split, plus merged keys."""

    adapted: EvalReport
    baseline: EvalReport
    aggregates: dict[str, float]

    @classmethod
    def build(cls, adapted: EvalReport, baseline: EvalReport) -> "ComparisonReport":
        merged = dict(adapted.aggregates)
        for key in ("cer", "wer", "loer", "map_cer"):
            if key in baseline.aggregates:
                merged[f"{key}_no_ttt"] = baseline.aggregates[key]
        return cls(adapted=adapted, baseline=baseline, aggregates=merged)
