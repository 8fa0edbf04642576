"""Bi-level meta-training: per-example auxiliary adaptation, primary meta-update.

Each training example is its own task: the inner loop takes plain gradient
steps on the self-supervised reconstruction loss (never touching the primary
head, and never reading labels), and the outer loop backpropagates the
primary loss *through* that update to the original parameters.  The outer
optimizer is Adam; the inner step is bare gradient descent.

Randomness is derived functionally from (seed, purpose, step, example), so
runs are reproducible, checkpoints only need to store the seed and step
counter, and the masking stream never interferes with the teacher-forcing
stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .model import ArchConfig, ModelParams, decode_logits, encode, pad_to_multiple, reconstruct
from .objectives import MaskSpec, SsimConfig, mask_image, primary_loss_from_logits, ssim_loss
from .tensor import NonFiniteError, ParamSet, Tensor, grad
from .tokens import Dictionary, TokenSequence

_PURPOSES = {"mask": 11, "teacher": 12, "dropout": 13, "doc": 14, "pick": 15, "adapt": 16}


def derive_rng(seed: int, purpose: str, *path: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, purpose, path)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, _PURPOSES[purpose], *[int(p) for p in path]])
    )


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class CurriculumSchedule:
    """Phase schedules, all driven by progress in [0, 1].

    The synthetic fraction ramps linearly down (0.9 -> 0.2 over phase 2);
    dropout ramps up over the first half of a phase and then holds; document
    complexity is a step function giving (sections, lines, chars per line).
    """

    synth_start: float = 0.9
    synth_end: float = 0.2
    dropout_max: float = 0.2
    dropout_ramp: float = 0.5
    complexity_steps: tuple[tuple[float, int, int, int], ...] = (
        (0.00, 1, 1, 2),
        (0.15, 1, 1, 4),
        (0.30, 1, 1, 7),
        (0.45, 1, 1, 10),
        (0.60, 1, 2, 12),
        (0.75, 1, 3, 14),
        (0.88, 2, 3, 14),
    )

    def synthetic_fraction(self, progress: float) -> float:
        p = min(max(progress, 0.0), 1.0)
        return self.synth_start + (self.synth_end - self.synth_start) * p

    def dropout_rate(self, progress: float) -> float:
        p = min(max(progress, 0.0), 1.0)
        if self.dropout_ramp <= 0:
            return self.dropout_max
        return self.dropout_max * min(p / self.dropout_ramp, 1.0)

    def complexity(self, progress: float) -> tuple[int, int, int]:
        current = self.complexity_steps[0]
        for entry in self.complexity_steps:
            if progress >= entry[0]:
                current = entry
        return current[1], current[2], current[3]


@dataclass(frozen=True)
class MetaConfig:
    """All learning-rate, masking, curriculum and teacher-forcing knobs."""

    outer_lr: float = 1e-4
    inner_lr: float = 1e-3
    inner_steps: int = 1
    batch_size: int = 16
    first_order: bool = False
    teacher_error_rate: float = 0.2
    aux_weight: float = 1.0  # multi-task weight in supervised (phase-1) steps
    mask: MaskSpec = field(default_factory=MaskSpec)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.outer_lr <= 0 or self.inner_lr < 0:
            raise ValueError("learning rates must be positive (inner may be 0)")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if not 0.0 <= self.teacher_error_rate <= 1.0:
            raise ValueError("teacher_error_rate must be in [0, 1]")


@dataclass
class TrainState:
    """Parameters plus optimizer moments and the run cursor."""

    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    seed: int
    phase: int

    @classmethod
    def fresh(cls, params: ModelParams, seed: int) -> "TrainState":
        return cls(params=params, adam_m={}, adam_v={}, step=0, seed=seed, phase=0)


# -- inner loop -----------------------------------------------------------------


def prepare_image(image: np.ndarray, arch: ArchConfig):
    """Pad to the downsample multiple; mask marks real pixels.

    float64 images stay float64 (the 64-bit test mode); everything else
    becomes float32.
    """
    arr = np.asarray(image)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return pad_to_multiple(arr, arch.downsample)


def auxiliary_loss(
    params: ModelParams, padded: np.ndarray, valid: np.ndarray, cfg: MetaConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Mask, reconstruct, compare with the clean image.  Label-free."""
    masked, _ = mask_image(padded, cfg.mask, rng)
    rec = reconstruct(params.shared, params.auxiliary, masked, params.arch)
    target = Tensor(padded)
    mask_arg = None if valid.all() else valid
    return ssim_loss(rec, target, cfg.ssim, mask_arg)


def _inner_adapt_traced(
    params: ModelParams, image: np.ndarray, cfg: MetaConfig, rng: np.random.Generator
) -> tuple[ModelParams, float | None]:
    """inner_adapt plus the first-step auxiliary loss (for logging)."""
    if cfg.inner_steps == 0 or cfg.inner_lr == 0.0:
        return params, None
    padded, valid = prepare_image(image, params.arch)
    shared, aux = params.shared, params.auxiliary
    first_loss = None
    for _ in range(cfg.inner_steps):
        current = ModelParams(shared, params.primary, aux, params.arch)
        loss = auxiliary_loss(current, padded, valid, cfg, rng)
        if first_loss is None:
            first_loss = float(loss.data)
        grads = grad(loss, shared.merged(aux), create_graph=not cfg.first_order)

        def step_param(name: str, p: Tensor) -> Tensor:
            return ops.sub(p, ops.mul(grads[name], ops.as_tensor(cfg.inner_lr, p)))

        shared = shared.map(step_param)
        aux = aux.map(step_param)
    return ModelParams(shared, params.primary, aux, params.arch), first_loss


def inner_adapt(
    params: ModelParams, image: np.ndarray, cfg: MetaConfig, rng: np.random.Generator
) -> ModelParams:
    """Adaptation on one example: plain gradient steps on the auxiliary loss.

    The primary head is untouched (it is not an input of the auxiliary
    loss); with first_order off, the result keeps its differentiable
    dependence on the starting parameters.
    """
    adapted, _ = _inner_adapt_traced(params, image, cfg, rng)
    return adapted


# -- teacher forcing --------------------------------------------------------------


def corrupt_teacher_input(
    target: TokenSequence, p: float, rng: np.random.Generator, dictionary: Dictionary
) -> TokenSequence:
    """Independently replace alphabet tokens with a different random one.

    Layout markers and <sos>/<eot> are never corrupted.
    """
    if p <= 0.0:
        return TokenSequence(list(target))
    alpha = dictionary.alphabet_ids()
    lo = alpha[0]
    out = []
    for tok in target:
        if dictionary.is_alpha(tok) and rng.random() < p:
            # Uniform over the alphabet minus the original token.
            r = int(rng.integers(0, len(alpha) - 1))
            if r >= tok - lo:
                r += 1
            out.append(alpha[r])
        else:
            out.append(tok)
    return TokenSequence(out)


# -- outer loop --------------------------------------------------------------------


def _tree_reduce(grad_list: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Pairwise reduction in index order: deterministic regardless of workers."""
    layer = grad_list
    while len(layer) > 1:
        merged = []
        for i in range(0, len(layer) - 1, 2):
            a, b = layer[i], layer[i + 1]
            merged.append({k: a[k] + b[k] for k in a})
        if len(layer) % 2:
            merged.append(layer[-1])
        layer = merged
    return layer[0]


def adam_step(
    state: TrainState, grads: dict[str, np.ndarray], cfg: MetaConfig
) -> TrainState:
    """Standard Adam with bias correction; parameters stay leaf tensors."""
    t = state.step + 1
    b1, b2, eps = cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps
    new_m, new_v = dict(state.adam_m), dict(state.adam_v)

    def update(name: str, p: Tensor) -> Tensor:
        g = grads[name].astype(p.data.dtype)
        m = new_m.get(name)
        v = new_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        data = p.data - cfg.outer_lr * m_hat / (np.sqrt(v_hat) + eps)
        return Tensor(data, requires_grad=True)

    new_params = state.params.map(update)
    return TrainState(
        params=new_params,
        adam_m=new_m,
        adam_v=new_v,
        step=t,
        seed=state.seed,
        phase=state.phase,
    )


def _example_rngs(state: TrainState, index: int):
    return (
        derive_rng(state.seed, "mask", state.step, index),
        derive_rng(state.seed, "teacher", state.step, index),
        derive_rng(state.seed, "dropout", state.step, index),
    )


def _primary_example_loss(
    params: ModelParams,
    image: np.ndarray,
    target: TokenSequence,
    cfg: MetaConfig,
    dictionary: Dictionary,
    rng_teacher: np.random.Generator,
    rng_dropout: np.random.Generator,
    dropout_rate: float,
) -> Tensor:
    padded, _ = prepare_image(image, params.arch)
    features = encode(params.shared, padded, params.arch)
    forced = corrupt_teacher_input(target, cfg.teacher_error_rate, rng_teacher, dictionary)
    input_ids = list(forced)[:-1]  # <sos> plus forced content; model predicts the rest
    logits = decode_logits(
        params.primary, features, input_ids, params.arch,
        dropout_rate=dropout_rate, rng=rng_dropout,
    )
    return primary_loss_from_logits(logits, target)


def _batched_step(
    state: TrainState,
    batch: Sequence[tuple[np.ndarray, TokenSequence]],
    cfg: MetaConfig,
    dictionary: Dictionary,
    meta: bool,
    dropout_rate: float,
    aux_weight: float,
) -> tuple[TrainState, dict[str, float]]:
    if not batch:
        raise ValueError("empty batch")
    all_params = state.params.all_params()
    grad_list: list[dict[str, np.ndarray]] = []
    pri_losses: list[float] = []
    aux_losses: list[float] = []
    for i, (image, target) in enumerate(batch):
        rng_mask, rng_teacher, rng_dropout = _example_rngs(state, i)
        if meta:
            adapted, aux_value = _inner_adapt_traced(state.params, image, cfg, rng_mask)
            loss = _primary_example_loss(
                adapted, image, target, cfg, dictionary,
                rng_teacher, rng_dropout, dropout_rate,
            )
            pri_losses.append(float(loss.data))
            if aux_value is not None:
                aux_losses.append(aux_value)
        else:
            loss = _primary_example_loss(
                state.params, image, target, cfg, dictionary,
                rng_teacher, rng_dropout, dropout_rate,
            )
            pri_losses.append(float(loss.data))
            if aux_weight != 0.0:
                padded, valid = prepare_image(image, state.params.arch)
                aux = auxiliary_loss(state.params, padded, valid, cfg, rng_mask)
                aux_losses.append(float(aux.data))
                loss = ops.add(loss, ops.mul(aux, ops.as_tensor(aux_weight, aux)))
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite loss on batch example {i}")
        g = grad(loss, all_params, create_graph=False)
        grad_list.append({k: v.data for k, v in g.items()})
    total = _tree_reduce(grad_list)
    scale = 1.0 / len(batch)
    mean_grads = {k: v * scale for k, v in total.items()}
    new_state = adam_step(state, mean_grads, cfg)
    metrics = {
        "loss_pri": sum(pri_losses) / len(pri_losses),
        "loss_aux": (sum(aux_losses) / len(aux_losses)) if aux_losses else float("nan"),
    }
    return new_state, metrics


def meta_step(
    state: TrainState,
    batch: Sequence[tuple[np.ndarray, TokenSequence]],
    cfg: MetaConfig,
    dictionary: Dictionary,
    dropout_rate: float = 0.0,
) -> tuple[TrainState, dict[str, float]]:
    """One Algorithm-1 outer update over a batch of (image, target) tasks."""
    return _batched_step(
        state, batch, cfg, dictionary, meta=True,
        dropout_rate=dropout_rate, aux_weight=0.0,
    )


def supervised_step(
    state: TrainState,
    batch: Sequence[tuple[np.ndarray, TokenSequence]],
    cfg: MetaConfig,
    dictionary: Dictionary,
    dropout_rate: float = 0.0,
    aux_weight: float | None = None,
) -> tuple[TrainState, dict[str, float]]:
    """Plain (multi-task) supervised update: L_pri + aux_weight * L_aux."""
    w = cfg.aux_weight if aux_weight is None else aux_weight
    return _batched_step(
        state, batch, cfg, dictionary, meta=False,
        dropout_rate=dropout_rate, aux_weight=w,
    )


# -- training phases ---------------------------------------------------------------


@dataclass
class TrainingData:
    """Handles run_phase needs: the dictionary, corpus config, disk dataset."""

    dictionary: Dictionary
    corpus: "CorpusConfig"
    dataset: "DocDataset | None" = None


def _line_page_height(n_lines: int) -> int:
    """Smallest multiple of 8 that fits n single-line paragraphs."""
    needed = 32 + 20 * (n_lines - 1)
    return ((needed + 7) // 8) * 8


def phase1_batch(
    state: TrainState, data: TrainingData, cfg: MetaConfig, progress: float
) -> list[tuple[np.ndarray, TokenSequence]]:
    """On-the-fly line documents from the synthetic style pool.

    The complexity schedule grows line counts and line lengths; pages are
    sized to the current line count (width fixed at the corpus page width).
    """
    from .docgen import WriterStyle, render_with_retries
    from .tokens import serialize

    max_sections, max_lines, max_chars = cfg.curriculum.complexity(progress)
    if max_sections > 1:
        height = data.corpus.page_height  # full pages at the curriculum tail
    else:
        height = _line_page_height(max_lines)
    batch = []
    for slot in range(cfg.batch_size):
        rng = derive_rng(state.seed, "doc", 1, state.step, slot)
        pool = data.corpus.train_synth_styles
        style_id = int(pool[int(rng.integers(0, len(pool)))])
        style = WriterStyle.from_seed(style_id, data.corpus.seed)
        image, tree = render_with_retries(
            rng, style, max_sections, max_lines, min(data.corpus.min_chars, max_chars),
            max_chars, height, data.corpus.page_width, data.dictionary.alphabet,
        )
        batch.append((image, serialize(tree, data.dictionary)))
    return batch


def phase2_batch(
    state: TrainState, data: TrainingData, cfg: MetaConfig, progress: float
) -> list[tuple[np.ndarray, TokenSequence]]:
    """Mix the synthetic split with the real split per the curriculum ramp."""
    if data.dataset is None:
        raise ValueError("phase 2 requires the on-disk dataset")
    frac = cfg.curriculum.synthetic_fraction(progress)
    synth_ids = data.dataset.split_ids("train_synth")
    real_ids = data.dataset.split_ids("train_real")
    if not synth_ids or not real_ids:
        raise ValueError("dataset is missing a training split")
    batch = []
    for slot in range(cfg.batch_size):
        rng = derive_rng(state.seed, "pick", state.step, slot)
        if rng.random() < frac:
            doc_id = synth_ids[int(rng.integers(0, len(synth_ids)))]
        else:
            doc_id = real_ids[int(rng.integers(0, len(real_ids)))]
        inst = data.dataset.load(doc_id)
        batch.append((inst.image, inst.tokens))
    return batch


def validation_loss(
    state: TrainState, data: TrainingData, cfg: MetaConfig, max_docs: int = 8
) -> float:
    """Mean teacher-forced primary loss on a fixed validation subset."""
    if data.dataset is None:
        return float("nan")
    ids = data.dataset.split_ids("val")[:max_docs]
    if not ids:
        return float("nan")
    total = 0.0
    for doc_id in ids:
        inst = data.dataset.load(doc_id)
        padded, _ = prepare_image(inst.image, state.params.arch)
        features = encode(state.params.shared, padded, state.params.arch)
        input_ids = list(inst.tokens)[:-1]
        logits = decode_logits(state.params.primary, features, input_ids, state.params.arch)
        total += float(primary_loss_from_logits(logits, inst.tokens).data)
    return total / len(ids)


def run_phase(
    state: TrainState,
    phase: int,
    data: TrainingData,
    cfg: MetaConfig,
    steps: int,
    use_meta: bool = True,
    log_path: "Path | str | None" = None,
    val_every: int = 50,
    on_checkpoint: "Callable[[TrainState], None] | None" = None,
    checkpoint_every: int = 200,
    verbose: bool = False,
) -> TrainState:
    """Run one training phase for a fixed number of steps.

    Phase 1 is plain multi-task supervised training on on-the-fly line
    documents; phase 2 is the meta-update on the synthetic/real mix (or the
    same multi-task loss when use_meta is off, for the ablation).
    Training-curve records go to ``log_path`` as tab-separated lines.
    """
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    state = replace(state, phase=phase)
    if steps <= 0:
        return state
    log_lines: list[str] = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if log_file and log_file.tell() == 0:
            log_file.write("step\tloss_pri\tloss_aux\tsynth_frac\tdropout\n")
        for i in range(steps):
            progress = i / max(1, steps)
            dropout_rate = cfg.curriculum.dropout_rate(progress)
            if phase == 1:
                batch = phase1_batch(state, data, cfg, progress)
                state, metrics = supervised_step_batched(
                    state, batch, cfg, data.dictionary, dropout_rate=dropout_rate
                )
                synth_frac = 1.0
            else:
                batch = phase2_batch(state, data, cfg, progress)
                if use_meta:
                    state, metrics = meta_step(
                        state, batch, cfg, data.dictionary, dropout_rate=dropout_rate
                    )
                else:
                    state, metrics = supervised_step_batched(
                        state, batch, cfg, data.dictionary, dropout_rate=dropout_rate
                    )
                synth_frac = cfg.curriculum.synthetic_fraction(progress)
            if log_file:
                log_file.write(
                    f"{state.step}\t{metrics['loss_pri']:.6f}\t"
                    f"{metrics['loss_aux']:.6f}\t{synth_frac:.4f}\t{dropout_rate:.4f}\n"
                )
                log_file.flush()
            if verbose and (i % 10 == 0 or i == steps - 1):
                print(
                    f"phase {phase} step {state.step}: "
                    f"loss_pri={metrics['loss_pri']:.4f} loss_aux={metrics['loss_aux']:.4f}"
                )
            if val_every and (i + 1) % val_every == 0 and data.dataset is not None:
                vloss = validation_loss(state, data, cfg)
                if verbose:
                    print(f"  val loss: {vloss:.4f}")
            if on_checkpoint and (i + 1) % checkpoint_every == 0:
                on_checkpoint(state)
    finally:
        if log_file:
            log_file.close()
    return state


def supervised_step_batched(
    state: TrainState,
    batch: Sequence[tuple[np.ndarray, TokenSequence]],
    cfg: MetaConfig,
    dictionary: Dictionary,
    dropout_rate: float = 0.0,
    aux_weight: float | None = None,
) -> tuple[TrainState, dict[str, float]]:
    """Fast multi-task supervised update for same-size image batches.

    One batched graph instead of per-example graphs; used by phase 1, where
    every document in a batch shares the page size.  Semantics match
    supervised_step (mean over examples of L_pri + w * L_aux).
    """
    from .model import decode_logits_batch, encode_batch, reconstruct_batch
    from .objectives import sequence_cross_entropy_batch, ssim_loss_batch

    if not batch:
        raise ValueError("empty batch")
    w_aux = cfg.aux_weight if aux_weight is None else aux_weight
    shapes = {img.shape for img, _ in batch}
    if len(shapes) != 1:
        raise ValueError("batched step requires equal image sizes")
    arch = state.params.arch
    b = len(batch)
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in batch])
    if images.shape[1] % arch.downsample or images.shape[2] % arch.downsample:
        raise ValueError("batched step requires images already sized to a multiple of F")

    # Teacher-forced inputs, per-step targets and padding weights.
    inputs, targets, weights = [], [], []
    max_len = 0
    for i, (_, tokens) in enumerate(batch):
        _, rng_teacher, _ = _example_rngs(state, i)
        forced = corrupt_teacher_input(tokens, cfg.teacher_error_rate, rng_teacher, dictionary)
        inp = list(forced)[:-1]
        tgt = list(tokens)[1:]
        inputs.append(inp)
        targets.append(tgt)
        max_len = max(max_len, len(inp))
    in_arr = np.ones((b, max_len), dtype=np.int64)  # pad with <eot>
    tg_arr = np.ones((b, max_len), dtype=np.int64)
    w_arr = np.zeros((b, max_len), dtype=np.float32)
    for i, (inp, tgt) in enumerate(zip(inputs, targets)):
        in_arr[i, : len(inp)] = inp
        tg_arr[i, : len(tgt)] = tgt
        w_arr[i, : len(tgt)] = 1.0

    features = encode_batch(state.params.shared, images, arch)
    rng_dropout = derive_rng(state.seed, "dropout", state.step, 0)
    logits = decode_logits_batch(
        state.params.primary, features, in_arr, arch,
        dropout_rate=dropout_rate, rng=rng_dropout,
    )
    loss = sequence_cross_entropy_batch(logits, tg_arr, w_arr)
    loss_pri = float(loss.data)
    loss_aux = float("nan")
    if w_aux != 0.0:
        masked = np.stack([
            mask_image(images[i], cfg.mask, _example_rngs(state, i)[0])[0].data
            for i in range(b)
        ])
        rec = reconstruct_batch(state.params.shared, state.params.auxiliary, masked, arch)
        aux = ssim_loss_batch(rec, Tensor(images), cfg.ssim)
        loss_aux = float(aux.data)
        loss = ops.add(loss, ops.mul(aux, ops.as_tensor(w_aux, aux)))
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite batched supervised loss")
    all_params = state.params.all_params()
    g = grad(loss, all_params, create_graph=False)
    mean_grads = {k: v.data for k, v in g.items()}
    new_state = adam_step(state, mean_grads, cfg)
    return new_state, {"loss_pri": loss_pri, "loss_aux": loss_aux}
