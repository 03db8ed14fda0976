"""Gradient-weighted activation heatmaps and reconstruction comparison grids.

The saliency map of a window at a named layer weights that layer's
activation channels by the spatial mean of the objective's gradient,
rectifies the weighted sum, upsamples it to slice size, and min-max
normalizes to [0, 1]. A constant-output model yields zero gradients
everywhere; that map is returned flagged as degenerate rather than
raising.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from .data_pipeline import SliceStack, WindowPair
from .errors import ConfigError, LayerError, ShapeError
from .losses import l2_loss
from .models import TrainedModel

DEFAULT_LAYERS = ("enc1", "sa.dec1")  # first convolution stage; fourth attention site


def default_layers(generator) -> list[str]:
    """The default target layers that actually exist in this generator."""
    modules = dict(generator.named_modules())
    layers = [layer for layer in DEFAULT_LAYERS if layer in modules]
    return layers or ["enc1"]


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    layer: str
    objective: str
    window_id: str
    degenerate: bool
    raw_lo: float
    raw_hi: float

    def sidecar(self) -> dict:
        return {
            "layer": self.layer,
            "objective": self.objective,
            "window_id": self.window_id,
            "degenerate": self.degenerate,
            "normalization_bounds": [self.raw_lo, self.raw_hi],
        }


def _resolve_objective(objective, model, inputs, window):
    """Return (name, scalar tensor fn(output))."""
    if callable(objective):
        return getattr(objective, "__name__", "custom"), objective
    target = torch.from_numpy(
        np.ascontiguousarray(window.target.data, dtype=np.float32)
    ).permute(2, 0, 1).unsqueeze(0)
    if objective == "reconstruction_l2":
        return objective, lambda out: -l2_loss(out, target)
    if objective == "critic_score":
        critic = getattr(model, "critic", None)
        if critic is None:
            raise ConfigError("critic_score objective needs a model with a critic")
        return objective, lambda out: critic(torch.cat([inputs, out], dim=1)).mean()
    raise ConfigError(f"unknown saliency objective {objective!r}")


def grad_cam(
    model,
    window: WindowPair,
    layer: str,
    objective="reconstruction_l2",
) -> SaliencyMap:
    """Saliency of one window at a named generator layer.

    ``layer`` is any module name from the generator graph (see
    ``module.named_modules()``); the objective is reduced to a scalar and
    differentiated against that layer's activation.
    """
    generator = model.generator if isinstance(model, TrainedModel) else model
    modules = dict(generator.named_modules())
    if layer not in modules or layer == "":
        raise LayerError(f"no layer named {layer!r} in the generator graph")

    inputs = torch.from_numpy(
        np.ascontiguousarray(window.input.data, dtype=np.float32)
    ).permute(2, 0, 1).unsqueeze(0)
    name, objective_fn = _resolve_objective(objective, model, inputs, window)

    captured: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        captured.append(output)

    handle = modules[layer].register_forward_hook(hook)
    was_training = generator.training
    generator.eval()
    try:
        output = generator(inputs)
        if not captured:
            raise LayerError(f"layer {layer!r} produced no activation")
        activation = captured[0]
        score = objective_fn(output)
        grads = torch.autograd.grad(
            score, activation, retain_graph=False, allow_unused=True
        )[0]
    finally:
        handle.remove()
        generator.train(was_training)

    height, width = window.input.data.shape[:2]
    window_id = f"{window.scan_id}:{window.input.slice_indices[0]}"
    if grads is None:
        grads = torch.zeros_like(activation)
    weights = grads.mean(dim=(2, 3), keepdim=True)  # channel weights
    cam = torch.relu((weights * activation).sum(dim=1, keepdim=True))
    cam = F.interpolate(
        cam, size=(height, width), mode="bilinear", align_corners=False
    )[0, 0]
    raw = cam.detach().numpy().astype(np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= lo:
        return SaliencyMap(
            values=np.zeros((height, width)),
            layer=layer,
            objective=name,
            window_id=window_id,
            degenerate=True,
            raw_lo=lo,
            raw_hi=hi,
        )
    return SaliencyMap(
        values=(raw - lo) / (hi - lo),
        layer=layer,
        objective=name,
        window_id=window_id,
        degenerate=False,
        raw_lo=lo,
        raw_hi=hi,
    )


def save_saliency(smap: SaliencyMap, path) -> Path:
    """Write the heatmap PNG plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(smap.values, cmap="inferno", vmin=0.0, vmax=1.0)
    ax.set_title(f"{smap.layer} ({smap.objective})", fontsize=9)
    ax.axis("off")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    path.with_suffix(".json").write_text(
        json.dumps(smap.sidecar(), indent=2, sort_keys=True)
    )
    return path


def render_grid(
    input_stack: SliceStack,
    target_stack: SliceStack,
    recon_stack,
    psnr_db: float,
    path,
) -> Path:
    """Side-by-side panel: one row per slice, columns input/target/reconstruction."""
    recon = np.asarray(recon_stack.data if isinstance(recon_stack, SliceStack) else recon_stack)
    if not (input_stack.data.shape == target_stack.data.shape == recon.shape):
        raise ShapeError(
            f"grid stacks disagree: {input_stack.data.shape}, "
            f"{target_stack.data.shape}, {recon.shape}"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    channels = input_stack.data.shape[2]
    fig, axes = plt.subplots(channels, 3, figsize=(7.5, 2.5 * channels), squeeze=False)
    columns = [
        ("input", input_stack.data),
        ("target", target_stack.data),
        ("reconstruction", recon),
    ]
    for row in range(channels):
        for col, (title, stack) in enumerate(columns):
            ax = axes[row][col]
            ax.imshow(stack[:, :, row], cmap="gray", vmin=0.0, vmax=1.0)
            if row == 0:
                ax.set_title(title, fontsize=10)
            ax.axis("off")
    psnr_text = "inf" if math.isinf(psnr_db) else f"{psnr_db:.2f}"
    fig.suptitle(f"PSNR {psnr_text} dB", fontsize=11)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
