"""Trainable models and their numerical core: the image preprocessor (an
encoder-decoder with skips), the sequence approximator (a small CRNN emitting
per-timestep log-probabilities), CTC loss with an explicit forward-backward
gradient, greedy decoding, a decoupled-weight-decay Adam optimizer, and
checkpoint I/O.

Blank is always index 0 of the logit columns; characters map to 1..K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "Alphabet",
    "Preprocessor",
    "Approximator",
    "preprocess",
    "approximate",
    "ctc_loss",
    "ctc_loss_batch",
    "greedy_decode",
    "AdamW",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class Alphabet:
    """Ordered character set; logit column 0 is reserved for the CTC blank."""

    characters: str
    blank_index: int = 0

    def __post_init__(self) -> None:
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("alphabet characters must be distinct")
        if self.blank_index != 0:
            raise ValueError("blank_index is fixed at 0")

    @property
    def size(self) -> int:
        """Number of logit columns: |characters| + 1 for blank."""
        return len(self.characters) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self.characters.index(ch) + 1 for ch in text]
        except ValueError:
            bad = next(ch for ch in text if ch not in self.characters)
            raise ValueError(f"character {bad!r} not in alphabet") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.characters[i - 1] for i in indices)


# ---------------------------------------------------------------------------
# CTC loss: log-space forward-backward with an analytic gradient.
# ---------------------------------------------------------------------------

_NEG_INF = float("-inf")


def _extended_targets(targets: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Interleave blanks: label (l1..lU) becomes (b, l1, b, l2, ..., b), padded."""
    batch, max_len = targets.shape
    s_max = 2 * max_len + 1
    ext = torch.zeros((batch, s_max), dtype=torch.long)
    ext[:, 1::2] = targets
    s_lengths = 2 * lengths + 1
    return ext, s_lengths


def _ctc_forward_backward(log_probs: torch.Tensor, targets: torch.Tensor,
                          lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample CTC losses and gradients w.r.t. the log-probabilities.

    log_probs: (B, T, C) log-probability rows; targets: (B, L) indices in
    1..C-1 padded with 0; lengths: (B,) true label lengths. Returns
    (losses (B,), grads (B, T, C)); the gradient of -log P w.r.t. log_probs
    is minus the symbol posterior (forward-backward occupancy).
    """
    batch, timesteps, n_classes = log_probs.shape
    lp = log_probs.to(torch.float64)
    ext, s_lengths = _extended_targets(targets, lengths)
    s_max = ext.shape[1]

    # Minimum timesteps: label length plus one blank between each adjacent repeat.
    repeats = torch.zeros(batch, dtype=torch.long)
    for b in range(batch):
        lab = targets[b, : lengths[b]]
        repeats[b] = int(torch.sum(lab[1:] == lab[:-1])) if lengths[b] > 1 else 0
    min_t = lengths + repeats
    if torch.any(min_t > timesteps):
        bad = int(torch.argmax((min_t > timesteps).to(torch.int)))
        raise ValueError(
            f"label of length {int(lengths[bad])} (with {int(repeats[bad])} adjacent repeats) "
            f"needs at least {int(min_t[bad])} timesteps, got {timesteps}")

    idx_b = torch.arange(batch).unsqueeze(1)  # (B, 1)
    emit = lp[:, :, :]  # alias for clarity
    # Emission log-prob of every extended state at a given t: emit[t][b, s] = lp[b, t, ext[b, s]].
    valid = torch.arange(s_max).unsqueeze(0) < s_lengths.unsqueeze(1)  # (B, S)

    # Transition structure: state s can come from s, s-1, and s-2 when the
    # symbol differs from the one two back (and is not blank).
    can_skip = torch.zeros((batch, s_max), dtype=torch.bool)
    if s_max >= 3:
        can_skip[:, 2:] = (ext[:, 2:] != 0) & (ext[:, 2:] != ext[:, :-2])

    alpha = torch.full((batch, timesteps, s_max), _NEG_INF, dtype=torch.float64)
    alpha[:, 0, 0] = emit[idx_b.squeeze(1), 0, ext[:, 0]]
    has_two = s_lengths > 1
    if s_max > 1:
        alpha[has_two, 0, 1] = emit[has_two, 0, ext[has_two, 1]]
    for t in range(1, timesteps):
        prev = alpha[:, t - 1, :]
        stay = prev
        # Shift right by one/two states, truncated to the extended width.
        step = torch.cat([torch.full((batch, 1), _NEG_INF, dtype=torch.float64), prev], dim=1)[:, :s_max]
        skip = torch.cat([torch.full((batch, 2), _NEG_INF, dtype=torch.float64), prev], dim=1)[:, :s_max]
        skip = torch.where(can_skip, skip, torch.tensor(_NEG_INF, dtype=torch.float64))
        merged = torch.logsumexp(torch.stack([stay, step, skip]), dim=0)
        alpha[:, t, :] = merged + emit[idx_b, t, ext]
    alpha = torch.where(valid.unsqueeze(1), alpha, torch.tensor(_NEG_INF, dtype=torch.float64))

    beta = torch.full((batch, timesteps, s_max), _NEG_INF, dtype=torch.float64)
    last = (s_lengths - 1).clamp(min=0)
    beta[idx_b.squeeze(1), timesteps - 1, last] = emit[idx_b.squeeze(1), timesteps - 1,
                                                       ext[idx_b.squeeze(1), last]]
    has_two_last = s_lengths > 1
    beta[has_two_last, timesteps - 1, last[has_two_last] - 1] = emit[
        has_two_last, timesteps - 1, ext[has_two_last, last[has_two_last] - 1]]
    # Skip-from-ahead mirrors can_skip shifted: state s feeds from s+2 when ext[s+2] qualifies.
    can_skip_fwd = torch.zeros((batch, s_max), dtype=torch.bool)
    if s_max >= 3:
        can_skip_fwd[:, :-2] = can_skip[:, 2:]
    for t in range(timesteps - 2, -1, -1):
        nxt = beta[:, t + 1, :]
        stay = nxt
        # Shift left by one/two states, truncated to the extended width.
        step = torch.cat([nxt, torch.full((batch, 1), _NEG_INF, dtype=torch.float64)], dim=1)[:, 1 : 1 + s_max]
        skip = torch.cat([nxt, torch.full((batch, 2), _NEG_INF, dtype=torch.float64)], dim=1)[:, 2 : 2 + s_max]
        skip = torch.where(can_skip_fwd, skip, torch.tensor(_NEG_INF, dtype=torch.float64))
        merged = torch.logsumexp(torch.stack([stay, step, skip]), dim=0)
        beta[:, t, :] = merged + emit[idx_b, t, ext]
    beta = torch.where(valid.unsqueeze(1), beta, torch.tensor(_NEG_INF, dtype=torch.float64))

    two_final = torch.stack([
        alpha[idx_b.squeeze(1), timesteps - 1, last],
        torch.where(has_two, alpha[idx_b.squeeze(1), timesteps - 1, (last - 1).clamp(min=0)],
                    torch.tensor(_NEG_INF, dtype=torch.float64)),
    ])
    log_p = torch.logsumexp(two_final, dim=0)  # (B,)
    losses = -log_p

    # Occupancy: gamma[b, t, s] = exp(alpha + beta - emit - log_p); gradient
    # w.r.t. log_probs accumulates -gamma onto each state's symbol column.
    emit_ts = emit[idx_b.unsqueeze(2), torch.arange(timesteps).view(1, -1, 1), ext.unsqueeze(1)]
    log_gamma = alpha + beta - emit_ts - log_p.view(-1, 1, 1)
    log_gamma = torch.where(valid.unsqueeze(1), log_gamma, torch.tensor(_NEG_INF, dtype=torch.float64))
    gamma = torch.exp(log_gamma)
    grads = torch.zeros_like(lp)
    grads.scatter_add_(2, ext.unsqueeze(1).expand(batch, timesteps, s_max), gamma)
    grads = -grads
    return losses, grads


class _CtcLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor):
        with torch.no_grad():
            losses, grads = _ctc_forward_backward(log_probs, targets, lengths)
        ctx.save_for_backward(grads.to(log_probs.dtype))
        return losses.to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (grads,) = ctx.saved_tensors
        return grads * grad_out.view(-1, 1, 1), None, None


def ctc_loss_batch(log_probs: torch.Tensor, targets: torch.Tensor,
                   lengths: torch.Tensor) -> torch.Tensor:
    """Per-sample CTC losses, differentiable w.r.t. log_probs (B, T, C)."""
    return _CtcLossFn.apply(log_probs, targets, lengths)


def ctc_loss(logits: np.ndarray, label: str, alphabet: Alphabet) -> tuple[float, np.ndarray]:
    """CTC loss and gradient for one (T, |alphabet|+1) matrix of log-probabilities.

    loss = -log of the total probability of every alignment collapsing to the
    label; the gradient w.r.t. each log-probability entry is minus its symbol's
    forward-backward occupancy. Raises ValueError when T cannot fit the label.
    """
    arr = torch.from_numpy(np.asarray(logits, dtype=np.float64)).unsqueeze(0)
    encoded = alphabet.encode(label)
    targets = torch.tensor([encoded], dtype=torch.long) if encoded else torch.zeros((1, 0), dtype=torch.long)
    lengths = torch.tensor([len(encoded)], dtype=torch.long)
    losses, grads = _ctc_forward_backward(arr, targets, lengths)
    return float(losses[0]), grads[0].numpy()


def greedy_decode(logits: np.ndarray | torch.Tensor, alphabet: Alphabet) -> str:
    """Best-path decode: per-row argmax, collapse adjacent repeats, drop blanks.

    Argmax ties resolve to the lowest index, so decoding is deterministic.
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    best = np.argmax(logits, axis=-1)
    out = []
    prev = -1
    for idx in best:
        if idx != prev and idx != alphabet.blank_index:
            out.append(alphabet.characters[idx - 1])
        prev = idx
    return "".join(out)


# ---------------------------------------------------------------------------
# Models.
# ---------------------------------------------------------------------------


class Preprocessor(nn.Module):
    """Encoder-decoder image cleaner with skip connections and a [0,1] output.

    Input and output are (B, 1, H, W) with H and W divisible by 2**levels.
    The network predicts a logit-space residual on top of the input, so a
    freshly initialized preprocessor is close to the identity; without that,
    the first training epochs feed the OCR engine pure noise and the
    approximator collapses onto empty outputs before cleaning can start.
    """

    def __init__(self, levels: int = 2, base_channels: int = 8):
        super().__init__()
        self.levels = levels
        self.base_channels = base_channels
        self.encoders = nn.ModuleList()
        ch_in = 1
        for i in range(levels):
            ch_out = base_channels * (2 ** i)
            self.encoders.append(nn.Conv2d(ch_in, ch_out, 3, padding=1))
            ch_in = ch_out
        self.bottleneck = nn.Conv2d(ch_in, ch_in * 2, 3, padding=1)
        self.decoders = nn.ModuleList()
        ch = ch_in * 2
        for i in reversed(range(levels)):
            skip_ch = base_channels * (2 ** i)
            self.decoders.append(nn.Conv2d(ch + skip_ch, skip_ch, 3, padding=1))
            ch = skip_ch
        self.head = nn.Conv2d(ch, 1, 3, padding=1)
        # Zero-initialized head: the residual starts at exactly zero, i.e. the
        # fresh model is the identity map (up to the logit squeeze below).
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.pool = nn.MaxPool2d(2)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.levels
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ValueError(f"input height/width must be divisible by {div}, got {tuple(x.shape[-2:])}")
        skips = []
        h = x
        for enc in self.encoders:
            h = self.act(enc(h))
            skips.append(h)
            h = self.pool(h)
        h = self.act(self.bottleneck(h))
        for dec, skip in zip(self.decoders, reversed(skips)):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.act(dec(torch.cat([h, skip], dim=1)))
        base = torch.logit(x * 0.96 + 0.02)  # input squeezed off {0,1} so the logit is finite
        return torch.sigmoid(base + self.head(h))

    @property
    def descriptor(self) -> dict:
        return {"kind": "preprocessor", "levels": self.levels, "base_channels": self.base_channels}


class Approximator(nn.Module):
    """CRNN recognizer: conv stack collapsing height, BiGRU, per-timestep log-probs.

    For input width W the output has T = W // 4 timesteps; the dataset
    guarantees T is at least the glyph count of every strip.

    Inputs arrive white-background (1.0 = paper); the forward pass inverts to
    ink-positive and normalizes each conv block with GroupNorm — without the
    normalization the activation variance decays through the stack and CTC
    training stalls in the all-blank regime.  GroupNorm keeps no running
    statistics, so the module stays a pure function of its parameters.
    """

    def __init__(self, alphabet_size: int, input_height: int = 24, hidden: int = 32):
        super().__init__()
        if input_height % 4:
            raise ValueError("input_height must be divisible by 4")
        self.alphabet_size = alphabet_size
        self.input_height = input_height
        self.hidden = hidden
        self.conv1 = nn.Conv2d(1, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.conv3 = nn.Conv2d(16, 32, 3, padding=1)
        self.collapse = nn.Conv2d(32, 2 * hidden, kernel_size=(input_height // 4, 1))
        self.norm1 = nn.GroupNorm(4, 8)
        self.norm2 = nn.GroupNorm(4, 16)
        self.norm3 = nn.GroupNorm(4, 32)
        self.norm4 = nn.GroupNorm(4, 2 * hidden)
        self.rnn = nn.GRU(2 * hidden, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, alphabet_size)
        self.pool = nn.MaxPool2d(2)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.input_height:
            raise ValueError(f"expected input height {self.input_height}, got {x.shape[-2]}")
        if x.shape[-1] % 4:
            raise ValueError("input width must be divisible by 4")
        h = 1.0 - x
        h = self.pool(self.act(self.norm1(self.conv1(h))))
        h = self.pool(self.act(self.norm2(self.conv2(h))))
        h = self.act(self.norm3(self.conv3(h)))
        h = self.act(self.norm4(self.collapse(h)))  # (B, 2*hidden, 1, T)
        h = h.squeeze(2).transpose(1, 2)  # (B, T, 2*hidden)
        h, _ = self.rnn(h)
        return torch.log_softmax(self.proj(h), dim=-1)

    @property
    def descriptor(self) -> dict:
        return {"kind": "approximator", "alphabet_size": self.alphabet_size,
                "input_height": self.input_height, "hidden": self.hidden}


def _single_image_tensor(image: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.asarray(image)).to(dtype).unsqueeze(0).unsqueeze(0)


def preprocess(model: Preprocessor, image: np.ndarray) -> np.ndarray:
    """Run one H x W image through the preprocessor (no gradients)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(_single_image_tensor(image, dtype))
    return out[0, 0].numpy()


def approximate(model: Approximator, image: np.ndarray) -> np.ndarray:
    """Run one H x W image through the approximator; returns (T, C) log-probs."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(_single_image_tensor(image, dtype))
    return out[0].numpy()


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled multiplicative weight decay over named parameters.

    Gradients are passed explicitly to step(); a non-finite gradient aborts the
    step with an error naming the offending parameter block.
    """

    def __init__(self, named_params: Sequence[tuple[str, torch.Tensor]], lr: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient count does not match parameter count")
        for name, g in zip(self.names, grads):
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / bias1, torch.sqrt(v / bias2) + self.eps, value=-self.lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "m": flatten_tensors(self.m).numpy(),
            "v": flatten_tensors(self.v).numpy(),
            "step": np.array([self.step_count], dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        unflatten_into(torch.from_numpy(arrays["m"]), self.m)
        unflatten_into(torch.from_numpy(arrays["v"]), self.v)
        self.step_count = int(arrays["step"][0])


def flatten_tensors(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    if not tensors:
        return torch.zeros(0)
    return torch.cat([t.detach().reshape(-1) for t in tensors])


def unflatten_into(flat: torch.Tensor, tensors: Sequence[torch.Tensor]) -> None:
    offset = 0
    for t in tensors:
        n = t.numel()
        with torch.no_grad():
            t.copy_(flat[offset : offset + n].view_as(t).to(t.dtype))
        offset += n
    if offset != flat.numel():
        raise ValueError(f"flat vector has {flat.numel()} values, parameters need {offset}")


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, *, preprocessor: Preprocessor, approximator: Approximator,
                    opt_g: AdamW | None, opt_f: AdamW | None, epoch: int, alphabet: Alphabet,
                    numpy_rng_state: dict | None = None) -> None:
    """Write a self-describing training checkpoint (models, optimizers, RNG)."""
    meta = {
        "epoch": epoch,
        "alphabet": alphabet.characters,
        "preprocessor": preprocessor.descriptor,
        "approximator": approximator.descriptor,
        "numpy_rng_state": numpy_rng_state,
    }
    arrays: dict[str, np.ndarray] = {
        "theta": flatten_tensors(list(preprocessor.parameters())).numpy(),
        "phi": flatten_tensors(list(approximator.parameters())).numpy(),
        "torch_rng": torch.get_rng_state().numpy(),
    }
    for tag, opt in (("opt_g", opt_g), ("opt_f", opt_f)):
        if opt is not None:
            for k, arr in opt.state_arrays().items():
                arrays[f"{tag}_{k}"] = arr
    np.savez(Path(path), meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint into freshly constructed models (and optional optimizers)."""
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        arrays = {k: data[k] for k in data.files if k != "meta"}
    alphabet = Alphabet(meta["alphabet"])
    g = Preprocessor(levels=meta["preprocessor"]["levels"],
                     base_channels=meta["preprocessor"]["base_channels"])
    f = Approximator(alphabet_size=meta["approximator"]["alphabet_size"],
                     input_height=meta["approximator"]["input_height"],
                     hidden=meta["approximator"]["hidden"])
    unflatten_into(torch.from_numpy(arrays["theta"]), list(g.parameters()))
    unflatten_into(torch.from_numpy(arrays["phi"]), list(f.parameters()))
    out = {"preprocessor": g, "approximator": f, "epoch": meta["epoch"], "alphabet": alphabet,
           "numpy_rng_state": meta["numpy_rng_state"],
           "torch_rng_state": torch.from_numpy(arrays["torch_rng"].copy()),
           "optimizer_arrays": {}}
    for tag in ("opt_g", "opt_f"):
        if f"{tag}_m" in arrays:
            out["optimizer_arrays"][tag] = {k: arrays[f"{tag}_{k}"] for k in ("m", "v", "step")}
    return out
