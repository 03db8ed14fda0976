"""Training loops: plain reconstruction for the UNet, adversarial for the GANs.

The UNet minimizes the mean squared reconstruction error with early
stopping on a held-out validation slice of the training windows. The
adversarial models run a fixed number of generator steps; each step is
preceded by several critic updates under the Wasserstein objective with
a gradient penalty, and the generator objective combines the critic
score with heavily weighted L1 (and optionally cosine) reconstruction
terms.

Determinism contract: with a fixed config seed, identical starting
parameters, and single-threaded execution, two runs produce identical
histories and parameters.
"""

from __future__ import annotations

import copy
import csv
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_pipeline import DatasetSplit, Plane, WindowPair
from .errors import DivergenceError, EmptyDataError, SpecError
from .losses import cosine_distance, gradient_penalty, l1_loss, l2_loss
from .models import PairCritic, SkipGenerator, TrainedModel


@dataclass
class TrainConfig:
    learning_rate: float = 2.0e-4
    batch_size: int = 8
    # UNet schedule
    max_epochs: int = 100
    patience: int = 10
    unet_betas: tuple[float, float] = (0.9, 0.999)
    # adversarial schedule
    generator_steps: int = 1650
    critic_steps: int = 5
    gan_betas: tuple[float, float] = (0.5, 0.9)
    adversarial_weight: float = 1.0
    l1_weight: float = 100.0
    cosine_weight: float = 0.0
    gp_weight: float = 10.0
    # validation protocol
    val_fraction: float = 0.1
    val_every: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        for name in ("adversarial_weight", "l1_weight", "cosine_weight", "gp_weight"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be >= 0")
        if self.patience < 1 or self.max_epochs < 1:
            raise SpecError("patience and max_epochs must be >= 1")
        if self.generator_steps < 1 or self.critic_steps < 1:
            raise SpecError("generator_steps and critic_steps must be >= 1")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    best_step: int | None = None  # epoch (UNet) or generator step (GAN) with min val loss

    def append(self, **values) -> None:
        self.rows.append(values)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows if name in row and row[name] is not None]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns: list[str] = []
        for row in self.rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(self.rows)


def pairs_to_tensors(pairs: list[WindowPair]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack window pairs into (inputs, targets) NCHW float32 tensors."""
    inputs = np.stack([p.input.data for p in pairs]).transpose(0, 3, 1, 2)
    targets = np.stack([p.target.data for p in pairs]).transpose(0, 3, 1, 2)
    return (
        torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32)),
        torch.from_numpy(np.ascontiguousarray(targets, dtype=np.float32)),
    )


def split_validation(
    pairs: list[WindowPair], fraction: float, seed: int
) -> tuple[list[WindowPair], list[WindowPair]]:
    """Carve a validation set out of training windows, whole subjects first.

    With two or more subjects, subjects are held out (in seeded order)
    until the validation set reaches the requested fraction; with a single
    subject the tail windows are held out instead.
    """
    if not pairs:
        raise EmptyDataError("no training windows")
    subjects = sorted({p.subject_id for p in pairs})
    rng = random.Random(seed)
    target = max(1, round(fraction * len(pairs)))
    if len(subjects) >= 2:
        order = list(subjects)
        rng.shuffle(order)
        held: set[str] = set()
        count = 0
        for subject in order:
            if count >= target or len(held) == len(subjects) - 1:
                break
            held.add(subject)
            count += sum(1 for p in pairs if p.subject_id == subject)
        val = [p for p in pairs if p.subject_id in held]
        train = [p for p in pairs if p.subject_id not in held]
    else:
        n_val = min(target, len(pairs) - 1) or 1
        train, val = pairs[:-n_val], pairs[-n_val:]
        if not train:  # single window: validate on the training window itself
            train = list(pairs)
    return train, val


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_index = None
        self.misses = 0

    def update(self, index: int, value: float) -> bool:
        """Record one validation value; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_index = index
            self.misses = 0
        else:
            self.misses += 1
        return self.misses >= self.patience


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {what}; aborting at last finite state")


def _validation_loss(generator, val_inputs, val_targets, batch_size: int) -> float:
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            total = 0.0
            count = 0
            for start in range(0, val_inputs.shape[0], batch_size):
                xb = val_inputs[start : start + batch_size]
                yb = val_targets[start : start + batch_size]
                total += float(l2_loss(generator(xb), yb)) * xb.shape[0]
                count += xb.shape[0]
    finally:
        generator.train(was_training)
    return total / count


def train_unet(
    model, split: DatasetSplit, config: TrainConfig, plane: Plane | None = None
) -> tuple[TrainedModel, TrainHistory]:
    """Minimize reconstruction MSE with patience-based early stopping."""
    if not split.train:
        raise EmptyDataError("training set is empty")
    torch.manual_seed(config.seed)
    train_pairs, val_pairs = split_validation(
        split.train, config.val_fraction, config.seed
    )
    inputs, targets = pairs_to_tensors(train_pairs)
    val_inputs, val_targets = pairs_to_tensors(val_pairs)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.unet_betas
    )
    history = TrainHistory()
    stopper = EarlyStopper(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    order_rng = random.Random(config.seed)
    n = inputs.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = list(range(n))
        order_rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = inputs[idx]
            yb = targets[idx]
            optimizer.zero_grad()
            loss = l2_loss(model(xb), yb)
            _check_finite(loss, "training loss")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= n
        val_loss = _validation_loss(model, val_inputs, val_targets, config.batch_size)
        history.append(epoch=epoch, train_l2=epoch_loss, val_l2=val_loss)
        improved = val_loss < stopper.best
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break

    history.best_step = stopper.best_index
    model.load_state_dict(best_state)
    trained = TrainedModel(spec=model.spec, generator=model, plane=plane)
    return trained, history


def _batch_stream(inputs, targets, batch_size: int, generator: torch.Generator):
    """Yield shuffled batches forever, reshuffling each pass."""
    n = inputs.shape[0]
    while True:
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield inputs[idx], targets[idx]


def train_gan(
    generator: SkipGenerator,
    critic: PairCritic,
    split: DatasetSplit,
    config: TrainConfig,
    plane: Plane | None = None,
) -> tuple[TrainedModel, TrainHistory]:
    """Alternating critic/generator updates for a fixed number of generator steps."""
    if not split.train:
        raise EmptyDataError("training set is empty")
    torch.manual_seed(config.seed)
    data_rng = torch.Generator().manual_seed(config.seed)
    gp_rng = torch.Generator().manual_seed(config.seed + 1)

    train_pairs, val_pairs = split_validation(
        split.train, config.val_fraction, config.seed
    )
    inputs, targets = pairs_to_tensors(train_pairs)
    val_inputs, val_targets = pairs_to_tensors(val_pairs)
    batches = _batch_stream(inputs, targets, config.batch_size, data_rng)

    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.learning_rate, betas=config.gan_betas
    )
    opt_d = torch.optim.Adam(
        critic.parameters(), lr=config.learning_rate, betas=config.gan_betas
    )
    history = TrainHistory()
    best_val = float("inf")
    last_good = (
        copy.deepcopy(generator.state_dict()),
        copy.deepcopy(critic.state_dict()),
    )
    generator.train()
    critic.train()

    try:
        for step in range(1, config.generator_steps + 1):
            critic_loss = penalty_value = 0.0
            for _ in range(config.critic_steps):
                xb, yb = next(batches)
                with torch.no_grad():
                    fake = generator(xb)
                real_pair = torch.cat([xb, yb], dim=1)
                fake_pair = torch.cat([xb, fake], dim=1)
                penalty = gradient_penalty(
                    critic, real_pair, fake_pair, generator=gp_rng
                )
                d_loss = (
                    critic(fake_pair).mean()
                    - critic(real_pair).mean()
                    + config.gp_weight * penalty
                )
                _check_finite(d_loss, "critic loss")
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                critic_loss = float(d_loss.detach())
                penalty_value = float(penalty.detach())

            xb, yb = next(batches)
            fake = generator(xb)
            adversarial = -critic(torch.cat([xb, fake], dim=1)).mean()
            recon_l1 = l1_loss(fake, yb)
            g_loss = (
                config.adversarial_weight * adversarial
                + config.l1_weight * recon_l1
            )
            cosine_value = None
            if config.cosine_weight > 0:
                recon_cos = cosine_distance(fake, yb)
                g_loss = g_loss + config.cosine_weight * recon_cos
                cosine_value = float(recon_cos.detach())
            _check_finite(g_loss, "generator loss")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            val_loss = None
            if step % config.val_every == 0 or step == config.generator_steps:
                val_loss = _validation_loss(
                    generator, val_inputs, val_targets, config.batch_size
                )
                if val_loss < best_val:
                    best_val = val_loss
                    history.best_step = step
                last_good = (
                    copy.deepcopy(generator.state_dict()),
                    copy.deepcopy(critic.state_dict()),
                )
            history.append(
                step=step,
                critic_loss=critic_loss,
                penalty=penalty_value,
                generator_loss=float(g_loss.detach()),
                adversarial=float(adversarial.detach()),
                l1=float(recon_l1.detach()),
                cosine=cosine_value,
                val_l2=val_loss,
            )
    except DivergenceError:
        generator.load_state_dict(last_good[0])
        critic.load_state_dict(last_good[1])
        raise

    trained = TrainedModel(
        spec=generator.spec, generator=generator, critic=critic, plane=plane
    )
    return trained, history
