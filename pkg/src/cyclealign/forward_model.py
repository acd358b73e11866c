"""Pretrained, frozen forward-dynamics model for domain Y.

F predicts the next observation as ``y + scale * MLP(normalize(y, u))``.
The last layer starts at zero so an untrained model is the identity map.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from cyclealign import data, nn

HIDDEN_SIZES = (64, 128, 32)


class FrozenModelError(RuntimeError):
    """Attempt to modify a frozen forward model."""


@dataclass
class ForwardConfig:
    epochs: int = 20
    lr: float = 1e-3
    halve_every: int = 3
    batch: int = 32
    seed: int = 0


@dataclass(eq=False)
class ForwardModel:
    params: nn.MlpParams
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: np.ndarray
    frozen: bool = False
    loss_trace: list = field(default_factory=list)

    @property
    def state_dim(self):
        return self.params.spec.output_dim

    @property
    def action_dim(self):
        return self.params.spec.input_dim - self.state_dim

    def freeze(self):
        for a in self.params.arrays() + [self.in_mean, self.in_std, self.out_scale]:
            a.setflags(write=False)
        self.frozen = True
        return self

    def digest(self):
        import hashlib

        return hashlib.sha256(to_bytes(self)).hexdigest()


def new_model(state_dim, action_dim, seed=0, in_mean=None, in_std=None, out_scale=None):
    spec = nn.MlpSpec((state_dim + action_dim,) + HIDDEN_SIZES + (state_dim,), "relu", "linear")
    params = nn.mlp_init(spec, seed)
    params.weights[-1][:] = 0.0
    d = state_dim + action_dim
    return ForwardModel(
        params,
        np.zeros(d) if in_mean is None else np.asarray(in_mean, dtype=np.float64).copy(),
        np.ones(d) if in_std is None else np.asarray(in_std, dtype=np.float64).copy(),
        np.ones(state_dim) if out_scale is None else np.asarray(out_scale, dtype=np.float64).copy(),
    )


def _check_dims(F, y, u):
    if np.shape(y)[-1] != F.state_dim or np.shape(u)[-1] != F.action_dim:
        raise nn.ShapeError(f"forward model expects state dim {F.state_dim} and action dim "
                            f"{F.action_dim}, got {np.shape(y)} and {np.shape(u)}")


def predict(F: ForwardModel, y, u):
    """Predicted next observation for a single pair or a batch (numpy in, numpy out)."""
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_dims(F, y, u)
    z = (np.concatenate([y, u], axis=-1) - F.in_mean) / F.in_std
    return y + F.out_scale * nn.mlp_forward(F.params, z)


def predict_on_tape(F: ForwardModel, y: nn.Var, u: nn.Var, tape: nn.Tape, trainable=False):
    """Differentiable prediction; gradients reach ``y`` and ``u``, never a frozen F."""
    if trainable and F.frozen:
        raise FrozenModelError("forward model is frozen")
    _check_dims(F, y.value, u.value)
    z = nn.affine(nn.concat([y, u]), 1.0 / F.in_std, -F.in_mean / F.in_std)
    delta = nn.mlp_forward(F.params, z, tape, trainable=trainable)
    return nn.add(y, nn.affine(delta, F.out_scale, 0.0))


def train_forward(dataset_y: data.TrajectoryDataset, config: ForwardConfig = None,
                  on_epoch=None) -> ForwardModel:
    """Fit F on domain-Y triples by minimising the mean L1 next-state error.

    Adam with ``config.lr`` halved every ``config.halve_every`` epochs; returns
    the frozen model with one mean training loss per epoch in ``loss_trace``.
    """
    config = config or ForwardConfig()
    if len(dataset_y) == 0:
        raise ValueError("cannot train a forward model on an empty dataset")
    inputs = np.concatenate([dataset_y.obs, dataset_y.actions], axis=1)
    delta = dataset_y.next_obs - dataset_y.obs
    F = new_model(dataset_y.obs_dim, dataset_y.action_dim, config.seed,
                  inputs.mean(axis=0), np.maximum(inputs.std(axis=0), 1e-8),
                  np.maximum(delta.std(axis=0), 1e-8))
    batch = min(config.batch, len(dataset_y))
    sampler = data.BatchSampler(len(dataset_y), batch, [config.seed, 1])
    state = nn.AdamState.for_params(F.params.arrays())
    steps = sampler.batches_per_epoch()
    for epoch in range(config.epochs):
        lr = config.lr * 0.5 ** (epoch // config.halve_every)
        total = 0.0
        for _ in range(steps):
            y, u, y_next = data.sample_batch(dataset_y, batch, sampler)
            tape = nn.Tape()
            pred = predict_on_tape(F, tape.constant(y), tape.constant(u), tape, trainable=True)
            loss = nn.l1_loss(pred, y_next)
            grads = nn.backprop(tape, loss)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite forward-model loss at epoch {epoch}")
            nn.adam_step(F.params, grads, state, lr)
            total += float(loss.value)
        F.loss_trace.append(total / steps)
        if on_epoch is not None:
            on_epoch(epoch, F.loss_trace[-1])
    return F.freeze()


def eval_forward(F: ForwardModel, dataset: data.TrajectoryDataset) -> float:
    """Mean L1 between predicted and recorded next observations."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return nn.l1_loss(predict(F, dataset.obs, dataset.actions), dataset.next_obs)


# ---------------------------------------------------------------------------
# checkpoint: CYAL parameter block, normalization block, frozen flag


def write(stream, F: ForwardModel):
    nn.write_params(stream, F.params)
    stream.write(struct.pack("<I", len(F.in_mean)))
    stream.write(np.asarray(F.in_mean, dtype="<f8").tobytes())
    stream.write(np.asarray(F.in_std, dtype="<f8").tobytes())
    stream.write(struct.pack("<I", len(F.out_scale)))
    stream.write(np.asarray(F.out_scale, dtype="<f8").tobytes())
    stream.write(struct.pack("<B", 1 if F.frozen else 0))


def read(stream) -> ForwardModel:
    params = nn.read_params(stream)
    (d,) = struct.unpack("<I", nn._read_exact(stream, 4, "normalization size"))
    mean = np.frombuffer(nn._read_exact(stream, 8 * d, "input means"), dtype="<f8").astype(np.float64)
    std = np.frombuffer(nn._read_exact(stream, 8 * d, "input stds"), dtype="<f8").astype(np.float64)
    (n,) = struct.unpack("<I", nn._read_exact(stream, 4, "output size"))
    scale = np.frombuffer(nn._read_exact(stream, 8 * n, "output scale"), dtype="<f8").astype(np.float64)
    (flag,) = struct.unpack("<B", nn._read_exact(stream, 1, "frozen flag"))
    F = ForwardModel(params, mean, std, scale)
    return F.freeze() if flag else F


def to_bytes(F: ForwardModel) -> bytes:
    buf = io.BytesIO()
    write(buf, F)
    return buf.getvalue()


def from_bytes(blob: bytes) -> ForwardModel:
    return read(io.BytesIO(blob))


def save(F: ForwardModel, path):
    data.write_atomic(path, to_bytes(F))


def load(path) -> ForwardModel:
    with open(path, "rb") as f:
        return read(f)
