"""Losses, Adam, auto-encoder pre-training and the alternating segmenter/discriminator loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import ContractError, Tensor
from .nets import AutoEncoderConfig, DiscriminatorConfig, ModelParams, SegNetConfig
from .synth import STRATEGIES, AugmentConfig, Case, ConfigurationError, apply_transform, encode_label_volume, sample_transform

logger = logging.getLogger(__name__)

DICE_EPS = 1e-7
LOG_CLAMP = 1e-7
REGULARIZATIONS = ("base", "shape", "adv", "combined")

# stream tags for deriving independent generators from one seed
_SEED_UNET, _SEED_DISC, _SEED_AE, _SEED_DATA, _SEED_AE_DATA = range(1, 6)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1e-4
    lambda2: float = 1e-2
    lr_ae: float = 1e-2
    lr_main: float = 1e-4
    epochs: int = 10
    ae_epochs: int | None = None  # defaults to ``epochs``
    batch_size: int = 8
    seed: int = 0
    strategy: str = "multi"
    regularization: str = "combined"
    depth: int = 3
    base_channels: int = 8
    code_channels: int = 32
    disc_depth: int = 3
    disc_base_channels: int = 8
    augment: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.regularization not in REGULARIZATIONS:
            raise ConfigurationError(f"unknown regularization {self.regularization!r}")

    @property
    def uses_shape(self) -> bool:
        return self.regularization in ("shape", "combined")

    @property
    def uses_adv(self) -> bool:
        return self.regularization in ("adv", "combined")

    @property
    def head(self) -> str:
        return "multi" if self.strategy == "multi" else "binary"


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# -------------------------------------------------------------------- losses
def _as_tensor(t) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(t)


def dice_loss(y_hat: Tensor, y) -> Tensor:
    """1 - mean over classes of the soft Dice, averaged over the batch.

    Both inputs are (N, C, H, W) over foreground channels only.
    """
    y = _as_tensor(y)
    if y_hat.shape != y.shape or y_hat.ndim != 4:
        raise ContractError(f"dice_loss shape mismatch: {y_hat.shape} vs {y.shape}")
    inter = (y_hat * y).sum(axis=(2, 3))
    denom = y_hat.sum(axis=(2, 3)) + y.sum(axis=(2, 3)).data + DICE_EPS
    return 1.0 - (2.0 * inter / denom).mean()


Encoder = Callable[[ModelParams, Tensor], Tensor]


def frozen(params: ModelParams) -> ModelParams:
    """View of ``params`` whose tensors carry no gradient (shares arrays and running moments)."""
    return ModelParams(params.kind, params.config, {k: Tensor(v.data) for k, v in params.tensors.items()}, params.bn)


def shape_loss(y_hat: Tensor, y, params_F: ModelParams | None, encoder: Encoder | None = None) -> Tensor:
    """Squared Euclidean distance between latent codes, summed over the code map, batch mean.

    The encoder weights are frozen. ``encoder`` defaults to the trained shape
    encoder in eval mode.
    """
    y = _as_tensor(y)
    if y_hat.shape != y.shape:
        raise ContractError(f"shape_loss shape mismatch: {y_hat.shape} vs {y.shape}")
    if encoder is None:
        if params_F is None:
            raise ContractError("shape_loss needs encoder parameters")
        if params_F.config.in_channels != y_hat.shape[1]:
            raise ContractError(
                f"auto-encoder expects {params_F.config.in_channels} channels, segmentation gives {y_hat.shape[1]}"
            )
        params_F = frozen(params_F)

        def encoder(p, t):
            return nets.encode(p, t, "eval")

    diff = encoder(params_F, y_hat) - encoder(params_F, y.detach())
    return ad.square(diff).sum() * (1.0 / y_hat.shape[0])


def _clamped(t: Tensor) -> Tensor:
    return ad.clip(t, LOG_CLAMP, 1.0 - LOG_CLAMP)


def disc_loss(d_fake: Tensor, d_real: Tensor) -> Tensor:
    """Binary cross-entropy pushing fake maps to 0 and real maps to 1."""
    d_fake, d_real = _as_tensor(d_fake), _as_tensor(d_real)
    return (-ad.log(1.0 - _clamped(d_fake))).mean() + (-ad.log(_clamped(d_real))).mean()


def adv_loss(d_fake: Tensor) -> Tensor:
    return (-ad.log(_clamped(_as_tensor(d_fake)))).mean()


def foreground(t: Tensor, head: str) -> Tensor:
    return t[:, 1:] if head == "multi" else t


@dataclass
class LossTerms:
    total: Tensor
    dice: float
    shape: float = 0.0
    adv: float = 0.0


def combined_terms(
    y_hat: Tensor,
    y,
    x,
    params_F: ModelParams | None,
    params_D: ModelParams | None,
    lambda1: float,
    lambda2: float,
    head: str = "multi",
    adv_stub: bool = False,
) -> LossTerms:
    y = _as_tensor(y)
    x = _as_tensor(x)
    fg_hat, fg = foreground(y_hat, head), foreground(y, head)
    ld = dice_loss(fg_hat, fg)
    total = ld
    terms = LossTerms(total, ld.item())
    if params_F is not None:
        ls = shape_loss(fg_hat, fg, params_F)
        terms.shape = ls.item()
        total = total + lambda1 * ls
    if adv_stub:
        total = total + lambda2 * Tensor(0.0)
    elif params_D is not None:
        la = adv_loss(nets.discriminate(frozen(params_D), y_hat, x))
        terms.adv = la.item()
        total = total + lambda2 * la
    terms.total = total
    return terms


def combined_loss(y_hat, y, x, params_F, params_D, lambda1: float, lambda2: float, head: str = "multi") -> Tensor:
    """Dice + lambda1 * shape + lambda2 * adversarial; absent networks drop their term."""
    return combined_terms(y_hat, y, x, params_F, params_D, lambda1, lambda2, head).total


# ---------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``; missing grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state


def _apply_adam(params: ModelParams, state: AdamState, lr: float) -> None:
    tensors = params.parameters()
    adam_step(tensors, [t.grad for t in tensors], state, lr)
    params.zero_grad()


# -------------------------------------------------------------- slice data
@dataclass
class SliceSet:
    """Training slices: images (S, H, W), head-target masks (S, K, H, W)."""

    images: np.ndarray
    masks: np.ndarray
    case_ids: list[str]
    head: str

    def __len__(self) -> int:
        return len(self.images)

    @property
    def foreground(self) -> np.ndarray:
        return self.masks[:, 1:] if self.head == "multi" else self.masks


def make_slices(cases: Sequence[Case], strategy: str, structure: int | None = None) -> SliceSet:
    """Stack all axial slices of ``cases``; ``structure`` (1-based) selects the individual-strategy class."""
    if not cases:
        raise ContractError("empty dataset")
    images, masks, ids = [], [], []
    for case in cases:
        enc = encode_label_volume(case.labels, case.num_classes, strategy)
        if strategy == "individual":
            if structure is None:
                raise ConfigurationError("individual strategy needs a structure index")
            enc = enc[:, structure - 1 : structure]
        images.append(case.image)
        masks.append(enc)
        ids.extend([case.case_id] * case.image.shape[0])
    head = "multi" if strategy == "multi" else "binary"
    return SliceSet(np.concatenate(images), np.concatenate(masks), ids, head)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _augmented_batch(data: SliceSet, idx: np.ndarray, rng: np.random.Generator | None, aug: AugmentConfig):
    """Image batch (B, 1, H, W) and head-target batch (B, K, H, W)."""
    imgs, fgs = [], []
    fg_all = data.foreground
    for i in idx:
        img, fg = data.images[i], fg_all[i]
        if rng is not None:
            img, fg = apply_transform(img, fg, sample_transform(rng, img.shape, aug))
        imgs.append(img)
        fgs.append(fg)
    x = np.stack(imgs)[:, None]
    fg = np.stack(fgs).astype(np.float64)
    if data.head == "multi":
        y = np.concatenate([1.0 - fg.sum(axis=1, keepdims=True), fg], axis=1)
    else:
        y = fg
    return x, y


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} loss")


# --------------------------------------------------------------- auto-encoder
@dataclass
class AETrainResult:
    params: ModelParams  # encoder and decoder halves share one parameter set
    history: list[dict]

    @property
    def epoch_losses(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for rec in self.history:
            out.setdefault(rec["epoch"], []).append(rec["dice"])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def autoencoder_config(cfg: TrainConfig, num_classes: int) -> AutoEncoderConfig:
    fg = num_classes if cfg.head == "multi" else 1
    return AutoEncoderConfig(in_channels=fg, depth=cfg.depth, code_channels=cfg.code_channels, base_channels=cfg.base_channels, head=cfg.head)


def train_autoencoder(data: SliceSet, cfg: TrainConfig, structure: int = 0) -> AETrainResult:
    """Fit the shape auto-encoder to ground-truth masks with the Dice loss."""
    if len(data) == 0:
        raise ContractError("train_autoencoder needs at least one mask")
    n_fg = data.foreground.shape[1]
    ae_cfg = replace(autoencoder_config(cfg, n_fg), in_channels=n_fg)
    params = nets.build_autoencoder(ae_cfg, derive_seed(cfg.seed, _SEED_AE, structure))
    state = AdamState()
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, _SEED_AE_DATA, structure)))
    aug = AugmentConfig()
    history = []
    epochs = cfg.ae_epochs if cfg.ae_epochs is not None else cfg.epochs
    for epoch in range(epochs):
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            _, y = _augmented_batch(data, idx, rng if cfg.augment else None, aug)
            fg = foreground(Tensor(y), data.head)
            rec = nets.reconstruct(params, fg, "train")
            loss = dice_loss(foreground(rec, data.head), fg)
            _check_finite(loss.item(), "auto-encoder")
            loss.backward()
            _apply_adam(params, state, cfg.lr_ae)
            history.append({"epoch": epoch, "batch": b, "dice": loss.item()})
    recalibrate_batch_norm(params, data.foreground.astype(np.float64), nets.reconstruct, cfg.batch_size)
    return AETrainResult(params, history)


def reconstruction_dice(params: ModelParams, data: SliceSet, batch_size: int = 32) -> float:
    """Mean over structures of the hard Dice between reconstructions and masks, pooled over slices."""
    fg_all = data.foreground
    inter = np.zeros(fg_all.shape[1])
    total = np.zeros(fg_all.shape[1])
    for start in range(0, len(data), batch_size):
        fg = fg_all[start : start + batch_size].astype(np.float64)
        rec = nets.reconstruct(params, Tensor(fg), "eval").data
        hard = hard_masks(rec, data.head)
        inter += (hard * fg).sum(axis=(0, 2, 3))
        total += hard.sum(axis=(0, 2, 3)) + fg.sum(axis=(0, 2, 3))
    return float(np.mean(2 * inter / np.maximum(total, 1e-12)))


def recalibrate_batch_norm(params: ModelParams, inputs: np.ndarray, forward, batch_size: int = 16) -> None:
    """Replace running moments by the equal-weight average of batch moments over ``inputs``.

    Momentum averages taken during training lag behind the final weights;
    one pass over the unaugmented data with frozen weights fixes eval mode.
    """
    for s in params.bn.values():
        s.mean = np.zeros_like(s.mean)
        s.var = np.zeros_like(s.var)
        s.cumulative = 0
    view = frozen(params)
    try:
        for start in range(0, len(inputs), batch_size):
            forward(view, Tensor(inputs[start : start + batch_size]), "train")
    finally:
        for s in params.bn.values():
            s.cumulative = None


def hard_masks(probs: np.ndarray, head: str) -> np.ndarray:
    """Binarize head output: argmax over C+1 channels (multi) or threshold 0.5, foreground channels only."""
    if head == "multi":
        k = probs.shape[1]
        arg = probs.argmax(axis=1)
        return np.stack([arg == c for c in range(1, k)], axis=1).astype(np.float64)
    return (probs > 0.5).astype(np.float64)


# ------------------------------------------------------ segmenter + discriminator
def segnet_config(cfg: TrainConfig, num_classes: int) -> SegNetConfig:
    return SegNetConfig(num_classes=num_classes, depth=cfg.depth, base_channels=cfg.base_channels, head=cfg.head)


@dataclass
class TrainResult:
    params_S: ModelParams
    params_D: ModelParams | None
    history: list[dict]

    def __iter__(self):
        yield self.params_S
        yield self.params_D

    @property
    def trajectory(self) -> list[float]:
        return [rec["total"] for rec in self.history]

    def epoch_log(self) -> list[str]:
        """Tab-separated lines: epoch, mean dice, shape, adv and disc terms."""
        lines = ["epoch\tdice\tshape\tadv\tdisc"]
        by_epoch: dict[int, list[dict]] = {}
        for rec in self.history:
            by_epoch.setdefault(rec["epoch"], []).append(rec)
        for epoch, recs in sorted(by_epoch.items()):
            means = [np.mean([r[k] for r in recs]) for k in ("dice", "shape", "adv", "disc")]
            lines.append(f"{epoch}\t" + "\t".join(f"{m:.10g}" for m in means))
        return lines


def discriminator_update(params_D: ModelParams, state: AdamState, x: np.ndarray, y_hat: Tensor, y: np.ndarray, lr: float) -> float:
    """One step on the discriminator; the prediction is detached from the segmenter graph."""
    xt = Tensor(x)
    d_fake = nets.discriminate(params_D, y_hat.detach(), xt)
    d_real = nets.discriminate(params_D, Tensor(y), xt)
    loss = disc_loss(d_fake, d_real)
    _check_finite(loss.item(), "discriminator")
    loss.backward()
    _apply_adam(params_D, state, lr)
    return loss.item()


def train_main(
    data: SliceSet,
    cfg: TrainConfig,
    params_F: ModelParams | None = None,
    num_classes: int | None = None,
    structure: int = 0,
    adv_stub: bool = False,
) -> TrainResult:
    """Alternating training: per batch, one discriminator step then one segmenter step.

    ``adv_stub`` replaces the adversarial branch with a constant zero loss and
    skips the discriminator entirely.
    """
    if len(data) == 0:
        raise ContractError("train_main needs at least one slice")
    if cfg.uses_shape and params_F is None:
        raise ConfigurationError(f"regularization {cfg.regularization!r} needs a trained auto-encoder")
    if not cfg.uses_shape and params_F is not None:
        raise ConfigurationError(f"regularization {cfg.regularization!r} takes no auto-encoder")
    if data.head != cfg.head:
        raise ConfigurationError(f"slice set head {data.head!r} does not match strategy {cfg.strategy!r}")
    k = data.masks.shape[1]
    if num_classes is None:
        num_classes = k - 1 if data.head == "multi" else 1
    params_S = nets.build_unet(segnet_config(cfg, num_classes), derive_seed(cfg.seed, _SEED_UNET, structure))
    state_S = AdamState()
    params_D = None
    state_D = AdamState()
    if cfg.uses_adv and not adv_stub:
        dcfg = DiscriminatorConfig(in_channels=k + 1, depth=cfg.disc_depth, base_channels=cfg.disc_base_channels)
        params_D = nets.build_discriminator(dcfg, derive_seed(cfg.seed, _SEED_DISC, structure))
    stub = cfg.uses_adv and adv_stub
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, _SEED_DATA, structure)))
    aug = AugmentConfig()
    history = []
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            x, y = _augmented_batch(data, idx, rng if cfg.augment else None, aug)
            y_hat = nets.forward_seg(params_S, Tensor(x), "train")
            ldisc = 0.0
            if params_D is not None:
                ldisc = discriminator_update(params_D, state_D, x, y_hat, y, cfg.lr_main)
            terms = combined_terms(
                y_hat, y, x, params_F if cfg.uses_shape else None, params_D,
                cfg.lambda1, cfg.lambda2, cfg.head, adv_stub=stub,
            )
            total = terms.total.item()
            _check_finite(total, "segmentation")
            terms.total.backward()
            _apply_adam(params_S, state_S, cfg.lr_main)
            history.append(
                {
                    "epoch": epoch,
                    "batch": b,
                    "total": total,
                    "dice": terms.dice,
                    "shape": terms.shape,
                    "adv": terms.adv,
                    "disc": ldisc,
                    "case_ids": sorted({data.case_ids[i] for i in idx}),
                }
            )
        logger.debug("epoch %d dice %.4f", epoch, np.mean([h["dice"] for h in history if h["epoch"] == epoch]))
    recalibrate_batch_norm(params_S, data.images[:, None], nets.forward_seg, cfg.batch_size)
    return TrainResult(params_S, params_D, history)
