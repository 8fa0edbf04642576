"""Task losses and the patch-masking procedure for the reconstruction branch.

The auxiliary loss is 1 - SSIM between the reconstruction and the clean
image, computed over local windows by default (handwriting structure is
local; a global variant stays available via config).  The primary loss is
the summed per-step cross entropy of the token decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeMismatchError, Tensor
from .tokens import TokenSequence


@dataclass(frozen=True)
class MaskSpec:
    """Patch masking: exactly floor(mask_ratio * patches) patches zeroed."""

    patch_size: int = 4
    mask_ratio: float = 0.75
    fill_value: float = 0.0


@dataclass(frozen=True)
class SsimConfig:
    """Stabilizers follow the conventional (0.01 L)^2 / (0.03 L)^2 choice."""

    a: float = 1e-4
    b: float = 9e-4
    window: int = 7
    dynamic_range: float = 1.0
    windowed: bool = True

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("SSIM stabilizers must be positive")


def mask_image(
    image, spec: MaskSpec, rng: np.random.Generator
) -> tuple[Tensor, np.ndarray]:
    """Mask random patches; unmasked pixels stay bit-identical.

    Returns the masked image as a fresh constant tensor plus the boolean
    patch grid (True = masked).  Patch selection is uniform without
    replacement.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape
    p = spec.patch_size
    if h % p or w % p:
        raise ShapeMismatchError(
            f"image {h}x{w} not divisible by patch size {p}"
        )
    gh, gw = h // p, w // p
    total = gh * gw
    n_masked = int(np.floor(spec.mask_ratio * total))
    grid = np.zeros(total, dtype=bool)
    if n_masked:
        grid[rng.choice(total, size=n_masked, replace=False)] = True
    grid = grid.reshape(gh, gw)
    out = arr.copy()
    pixel_mask = np.repeat(np.repeat(grid, p, axis=0), p, axis=1)
    out[pixel_mask] = np.asarray(spec.fill_value, dtype=arr.dtype)
    return Tensor(out), grid


def _window_mean(x: Tensor, window: int) -> Tensor:
    scale = ops.as_tensor(1.0 / (window * window), x)
    return ops.mul(ops.window_sum2d(x, window), scale)


def ssim_loss(
    x: Tensor,
    y: Tensor,
    cfg: SsimConfig | None = None,
    valid_mask: np.ndarray | None = None,
) -> Tensor:
    """1 - SSIM(x, y), averaged over valid local windows; differentiable.

    ``valid_mask`` is a boolean HxW array marking real (non-padding) pixels;
    a window counts only when fully inside the valid region.
    """
    cfg = cfg or SsimConfig()
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeMismatchError(
            f"ssim_loss expects matching HxW images, got {x.shape} vs {y.shape}"
        )
    one = Tensor(np.ones((), dtype=x.dtype))

    if not cfg.windowed:
        if valid_mask is None:
            valid = np.ones(x.shape, dtype=bool)
        else:
            valid = np.asarray(valid_mask, dtype=bool)
        m = Tensor(valid.astype(x.data.dtype))
        n = float(valid.sum())
        if n == 0:
            raise ValueError("valid mask excludes every pixel")
        mu_x = ops.mul(ops.sum_(ops.mul(x, m)), ops.as_tensor(1.0 / n, x))
        mu_y = ops.mul(ops.sum_(ops.mul(y, m)), ops.as_tensor(1.0 / n, x))
        ex2 = ops.mul(ops.sum_(ops.mul(ops.square(x), m)), ops.as_tensor(1.0 / n, x))
        ey2 = ops.mul(ops.sum_(ops.mul(ops.square(y), m)), ops.as_tensor(1.0 / n, x))
        exy = ops.mul(ops.sum_(ops.mul(ops.mul(x, y), m)), ops.as_tensor(1.0 / n, x))
        var_x = ops.relu(ops.sub(ex2, ops.square(mu_x)))
        var_y = ops.relu(ops.sub(ey2, ops.square(mu_y)))
        cov = ops.sub(exy, ops.mul(mu_x, mu_y))
        ssim = _ssim_ratio(mu_x, mu_y, var_x, var_y, cov, cfg, x)
        return ops.sub(one, ssim)

    win = cfg.window
    h, w = x.shape
    if h < win or w < win:
        raise ShapeMismatchError(
            f"image {h}x{w} smaller than SSIM window {win}"
        )
    mu_x = _window_mean(x, win)
    mu_y = _window_mean(y, win)
    var_x = ops.relu(ops.sub(_window_mean(ops.square(x), win), ops.square(mu_x)))
    var_y = ops.relu(ops.sub(_window_mean(ops.square(y), win), ops.square(mu_y)))
    cov = ops.sub(_window_mean(ops.mul(x, y), win), ops.mul(mu_x, mu_y))
    ssim_map = _ssim_ratio(mu_x, mu_y, var_x, var_y, cov, cfg, x)

    if valid_mask is None:
        window_ok = np.ones(ssim_map.shape, dtype=x.data.dtype)
    else:
        valid = np.asarray(valid_mask, dtype=np.float64)
        counts = _window_mean(Tensor(valid.astype(x.data.dtype)), win).data
        window_ok = (counts > 1.0 - 1e-6).astype(x.data.dtype)
    n_windows = float(window_ok.sum())
    if n_windows == 0:
        raise ValueError("valid mask excludes every SSIM window")
    mean_ssim = ops.mul(
        ops.sum_(ops.mul(ssim_map, Tensor(window_ok))),
        ops.as_tensor(1.0 / n_windows, x),
    )
    return ops.sub(one, mean_ssim)


def _ssim_ratio(mu_x, mu_y, var_x, var_y, cov, cfg: SsimConfig, ref: Tensor) -> Tensor:
    a = ops.as_tensor(cfg.a, ref)
    b = ops.as_tensor(cfg.b, ref)
    two = ops.as_tensor(2.0, ref)
    num = ops.mul(
        ops.add(ops.mul(two, ops.mul(mu_x, mu_y)), a),
        ops.add(ops.mul(two, cov), b),
    )
    den = ops.mul(
        ops.add(ops.add(ops.square(mu_x), ops.square(mu_y)), a),
        ops.add(ops.add(var_x, var_y), b),
    )
    return ops.div(num, den)


def expected_outputs(target: TokenSequence) -> list[int]:
    """Per-step teacher targets: content tokens followed by <eot>."""
    ids = list(target)
    if not ids or ids[0] != 0:
        raise ValueError("target sequence must begin with <sos>")
    if ids[-1] != 1:
        raise ValueError("target sequence must end with <eot>")
    return ids[1:]


def primary_loss(dists, target: TokenSequence) -> Tensor:
    """Sum over steps of -log p_t(expected token); one step per target + <eot>."""
    expected = expected_outputs(target)
    if isinstance(dists, Tensor):
        stacked = dists
    else:
        stacked = ops.concat([ops.reshape(d, (1, d.size)) for d in dists], axis=0)
    if stacked.shape[0] != len(expected):
        raise ShapeMismatchError(
            f"got {stacked.shape[0]} distributions for {len(expected)} target steps"
        )
    picks = ops.mul(
        ops.log(stacked), ops.onehot(expected, stacked.shape[1], stacked.dtype)
    )
    return ops.neg(ops.sum_(picks))


def primary_loss_from_logits(logits: Tensor, target: TokenSequence) -> Tensor:
    """Same quantity as primary_loss, computed stably from decoder logits."""
    return ops.cross_entropy_logits(logits, expected_outputs(target))


def _window_mean_batch(x: Tensor, window: int) -> Tensor:
    """Uniform-window means of a (B, H, W) stack."""
    return _window_mean(x, window)


def ssim_loss_batch(x: Tensor, y: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """Mean windowed SSIM loss over a batch of same-size unpadded images."""
    cfg = cfg or SsimConfig()
    if not cfg.windowed:
        raise ValueError("batched SSIM supports the windowed mode only")
    if x.shape != y.shape or x.ndim != 3:
        raise ShapeMismatchError(
            f"ssim_loss_batch expects matching BxHxW stacks, got {x.shape} vs {y.shape}"
        )
    win = cfg.window
    if x.shape[1] < win or x.shape[2] < win:
        raise ShapeMismatchError(f"images {x.shape[1:]} smaller than window {win}")
    mu_x = _window_mean_batch(x, win)
    mu_y = _window_mean_batch(y, win)
    var_x = ops.relu(ops.sub(_window_mean_batch(ops.square(x), win), ops.square(mu_x)))
    var_y = ops.relu(ops.sub(_window_mean_batch(ops.square(y), win), ops.square(mu_y)))
    cov = ops.sub(_window_mean_batch(ops.mul(x, y), win), ops.mul(mu_x, mu_y))
    ssim_map = _ssim_ratio(mu_x, mu_y, var_x, var_y, cov, cfg, x)  # (B, L)
    one = Tensor(np.ones((), dtype=x.dtype))
    return ops.sub(one, ops.mean(ssim_map))


def sequence_cross_entropy_batch(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over the batch of per-sequence summed cross entropy.

    ``targets`` is (B, L) token ids; ``weights`` is (B, L) with zeros on the
    padding positions.
    """
    b, length, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights)
    if targets.shape != (b, length) or weights.shape != (b, length):
        raise ShapeMismatchError(
            f"targets/weights must be {(b, length)}, got {targets.shape}/{weights.shape}"
        )
    pick = np.zeros((b, length, vocab), dtype=logits.data.dtype)
    rows = np.repeat(np.arange(b), length)
    cols = np.tile(np.arange(length), b)
    pick[rows, cols, targets.reshape(-1)] = weights.reshape(-1).astype(logits.data.dtype)
    picked = ops.mul(ops.log_softmax(logits, axis=-1), Tensor(pick))
    return ops.mul(ops.neg(ops.sum_(picked)), ops.as_tensor(1.0 / b, logits))
