"""Dense feed-forward velocity network with exact reverse-mode gradients.

The network maps (action, time, observation) to a velocity vector of the
action's dimensionality. Time enters as the raw scalar plus 8 sinusoidal
features sin/cos(2^k*pi*t) for k=0..3, giving the net resolution near the
endpoints. Training is plain Adam on the mean squared velocity residual,
with gradients computed by hand-written backprop so they can be checked
against finite differences parameter by parameter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCheckpoint,
    InvalidArgument,
    TrainingDiverged,
    UnsupportedVersion,
)

TIME_FREQS = (1.0, 2.0, 4.0, 8.0)
TIME_FEATURE_DIM = 1 + 2 * len(TIME_FREQS)

CHECKPOINT_MAGIC = "flowdj-checkpoint"
CHECKPOINT_VERSION = 1


def time_features(t):
    """Embed times in [0,1] as (t, sin/cos harmonics); accepts scalar or 1-d array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    cols = [t]
    for f in TIME_FREQS:
        cols.append(np.sin(math.pi * f * t))
        cols.append(np.cos(math.pi * f * t))
    return np.stack(cols, axis=1)


@dataclass
class VelocityModel:
    """Weights and architecture of the velocity network v(a, t, o)."""

    weights: list  # list of (W, b) pairs, W shape (fan_in, fan_out)
    action_dim: int
    obs_dim: int
    hidden: list
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.action_dim + TIME_FEATURE_DIM + self.obs_dim

    @property
    def out_dim(self) -> int:
        return self.action_dim

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.weights)

    def copy(self) -> "VelocityModel":
        return dataclasses.replace(
            self, weights=[(W.copy(), b.copy()) for W, b in self.weights]
        )


def init_model(action_dim: int, obs_dim: int, hidden, seed: int) -> VelocityModel:
    """Fan-in-scaled uniform init (biases zero), deterministic for a fixed seed."""
    if action_dim < 1:
        raise InvalidArgument(f"action_dim must be >= 1, got {action_dim}")
    if obs_dim < 0:
        raise InvalidArgument(f"obs_dim must be >= 0, got {obs_dim}")
    hidden = list(hidden)
    if not hidden or any(h < 1 for h in hidden):
        raise InvalidArgument(f"hidden widths must be non-empty and >= 1, got {hidden}")

    rng = np.random.default_rng(seed)
    in_dim = action_dim + TIME_FEATURE_DIM + obs_dim
    dims = [in_dim] + hidden + [action_dim]
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = math.sqrt(1.0 / fan_in)
        W = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        weights.append((W, b))
    return VelocityModel(weights, action_dim, obs_dim, hidden)


def _assemble_inputs(model, a, t, o):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != model.action_dim:
        raise InvalidArgument(
            f"action dim {a.shape[1]} does not match model action_dim {model.action_dim}"
        )
    tf = time_features(t)
    if tf.shape[0] == 1 and a.shape[0] > 1:
        tf = np.broadcast_to(tf, (a.shape[0], tf.shape[1]))
    if model.obs_dim == 0:
        return np.concatenate([a, tf], axis=1)
    if o is None:
        raise InvalidArgument(f"model expects obs_dim {model.obs_dim}, got none")
    o = np.asarray(o, dtype=np.float64)
    if o.ndim == 1:
        o = np.broadcast_to(o[None, :], (a.shape[0], o.shape[0]))
    if o.shape[1] != model.obs_dim:
        raise InvalidArgument(
            f"obs dim {o.shape[1]} does not match model obs_dim {model.obs_dim}"
        )
    return np.concatenate([a, tf, o], axis=1)


def forward_batch(model: VelocityModel, a, t, o=None) -> np.ndarray:
    """Batched forward pass; rows of a (and o) with per-row times t."""
    x = _assemble_inputs(model, a, t, o)
    h = x
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(model.weights):
        z = h @ W + b
        h = z if l == last else np.tanh(z)
    return h


def eval_velocity(model: VelocityModel, a, t, o=None) -> np.ndarray:
    """Evaluate v(a, t, o) for one action vector; pure in (weights, inputs)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (model.action_dim,):
        raise InvalidArgument(
            f"action shape {a.shape} does not match ({model.action_dim},)"
        )
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise InvalidArgument(f"t must be in [0,1], got {t}")
    if not np.all(np.isfinite(a)) or not math.isfinite(t):
        raise InvalidArgument("non-finite input to eval_velocity")
    if o is not None:
        o = np.asarray(o, dtype=np.float64)
        if o.shape != (model.obs_dim,):
            raise InvalidArgument(
                f"obs shape {o.shape} does not match ({model.obs_dim},)"
            )
        if not np.all(np.isfinite(o)):
            raise InvalidArgument("non-finite observation")
    elif model.obs_dim != 0:
        raise InvalidArgument(f"model expects obs_dim {model.obs_dim}, got none")
    return forward_batch(model, a[None, :], t, o)[0]


@dataclass
class AdamState:
    """Adam optimiser moments, mirroring the model's weight shapes."""

    m: list
    v: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self) -> "AdamState":
        return dataclasses.replace(
            self,
            m=[(mW.copy(), mb.copy()) for mW, mb in self.m],
            v=[(vW.copy(), vb.copy()) for vW, vb in self.v],
        )


def init_adam(
    model: VelocityModel,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    zeros = lambda: [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.weights]
    return AdamState(zeros(), zeros(), 0, learning_rate, beta1, beta2, epsilon)


def loss_and_grads(model: VelocityModel, at, t, target_v, obs=None):
    """Batch-mean squared L2 residual and its exact gradients per layer."""
    x = _assemble_inputs(model, at, t, obs)
    y = np.asarray(target_v, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    n = x.shape[0]

    hs = [x]
    last = len(model.weights) - 1
    h = x
    for l, (W, b) in enumerate(model.weights):
        z = h @ W + b
        h = z if l == last else np.tanh(z)
        if l != last:
            hs.append(h)
    out = h

    resid = out - y
    loss = float(np.mean(np.sum(resid * resid, axis=1)))

    g = 2.0 * resid / n
    grads = [None] * len(model.weights)
    for l in range(last, -1, -1):
        grads[l] = (hs[l].T @ g, g.sum(axis=0))
        if l > 0:
            g = (g @ model.weights[l][0].T) * (1.0 - hs[l] * hs[l])
    return loss, grads


def train_step(model: VelocityModel, opt: AdamState, batch):
    """One Adam update on a coupling batch; returns (loss-before-update, model, opt).

    Raises TrainingDiverged (with the offending step index) if the loss, a
    gradient, or any updated weight or moment is non-finite.
    """
    if len(batch.at) == 0:
        raise InvalidArgument("empty batch")
    loss, grads = loss_and_grads(model, batch.at, batch.t, batch.target_v, batch.obs)
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite loss", opt.step_count)
    for gW, gb in grads:
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise TrainingDiverged("non-finite gradient", opt.step_count)

    step = opt.step_count + 1
    b1, b2, eps, lr = opt.beta1, opt.beta2, opt.epsilon, opt.learning_rate
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_w, new_m, new_v = [], [], []
    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(
        model.weights, grads, opt.m, opt.v
    ):
        mW2 = b1 * mW + (1.0 - b1) * gW
        mb2 = b1 * mb + (1.0 - b1) * gb
        vW2 = b2 * vW + (1.0 - b2) * gW * gW
        vb2 = b2 * vb + (1.0 - b2) * gb * gb
        W2 = W - lr * (mW2 / bc1) / (np.sqrt(vW2 / bc2) + eps)
        b2_ = b - lr * (mb2 / bc1) / (np.sqrt(vb2 / bc2) + eps)
        if not (np.all(np.isfinite(W2)) and np.all(np.isfinite(b2_))):
            raise TrainingDiverged("non-finite weight after update", opt.step_count)
        new_w.append((W2, b2_))
        new_m.append((mW2, mb2))
        new_v.append((vW2, vb2))

    model2 = dataclasses.replace(model, weights=new_w)
    opt2 = dataclasses.replace(opt, m=new_m, v=new_v, step_count=step)
    return loss, model2, opt2


@dataclass
class NormStats:
    """Per-dimension z-score statistics from the training split."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    def normalize_obs(self, o):
        return (np.asarray(o, dtype=np.float64) - self.obs_mean) / self.obs_std

    def normalize_act(self, a):
        return (np.asarray(a, dtype=np.float64) - self.act_mean) / self.act_std

    def denormalize_act(self, a):
        return np.asarray(a, dtype=np.float64) * self.act_std + self.act_mean

    def to_dict(self):
        return {
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "act_mean": self.act_mean.tolist(),
            "act_std": self.act_std.tolist(),
        }

    @staticmethod
    def from_dict(d):
        return NormStats(
            np.asarray(d["obs_mean"], dtype=np.float64),
            np.asarray(d["obs_std"], dtype=np.float64),
            np.asarray(d["act_mean"], dtype=np.float64),
            np.asarray(d["act_std"], dtype=np.float64),
        )

    @staticmethod
    def identity(obs_dim: int, action_dim: int) -> "NormStats":
        return NormStats(
            np.zeros(obs_dim), np.ones(obs_dim), np.zeros(action_dim), np.ones(action_dim)
        )


def compute_norm_stats(obs: np.ndarray, actions: np.ndarray) -> NormStats:
    """Z-score stats with a floor on std so constant dimensions stay finite."""
    floor = 1e-8
    return NormStats(
        obs.mean(axis=0) if obs.size else np.zeros(obs.shape[1]),
        np.maximum(obs.std(axis=0), floor) if obs.size else np.ones(obs.shape[1]),
        actions.mean(axis=0),
        np.maximum(actions.std(axis=0), floor),
    )


@dataclass
class Checkpoint:
    """Self-describing, portable snapshot of a trained model."""

    model: VelocityModel
    opt: AdamState
    stats: NormStats
    config: dict = field(default_factory=dict)
    seed: int = 0
    format_version: int = CHECKPOINT_VERSION


def _fmt_row(row) -> str:
    return " ".join(f"{x:.17g}" for x in row)


def _tensor_lines(name: str, arr: np.ndarray):
    a2 = arr if arr.ndim == 2 else arr[None, :]
    yield f"tensor {name} {a2.shape[0]} {a2.shape[1]}"
    for row in a2:
        yield _fmt_row(row)


def checkpoint_to_text(ckpt: Checkpoint) -> str:
    """Serialize to the portable text format (17-significant-digit decimals)."""
    header = {
        "arch": {
            "action_dim": ckpt.model.action_dim,
            "obs_dim": ckpt.model.obs_dim,
            "hidden": list(ckpt.model.hidden),
            "activation": ckpt.model.activation,
            "time_freqs": list(TIME_FREQS),
        },
        "stats": ckpt.stats.to_dict(),
        "config": ckpt.config,
        "seed": ckpt.seed,
        "opt": {
            "learning_rate": ckpt.opt.learning_rate,
            "beta1": ckpt.opt.beta1,
            "beta2": ckpt.opt.beta2,
            "epsilon": ckpt.opt.epsilon,
            "step_count": ckpt.opt.step_count,
        },
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for l, (W, b) in enumerate(ckpt.model.weights):
        lines.extend(_tensor_lines(f"W{l}", W))
        lines.extend(_tensor_lines(f"b{l}", b))
    for l, ((mW, mb), (vW, vb)) in enumerate(zip(ckpt.opt.m, ckpt.opt.v)):
        lines.extend(_tensor_lines(f"mW{l}", mW))
        lines.extend(_tensor_lines(f"mb{l}", mb))
        lines.extend(_tensor_lines(f"vW{l}", vW))
        lines.extend(_tensor_lines(f"vb{l}", vb))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nsha256 {digest}\n{body}"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename) so readers never see partial files."""
    path = os.fspath(path)
    text = checkpoint_to_text(ckpt)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_tensor_block(lines, i):
    parts = lines[i].split()
    if len(parts) != 4 or parts[0] != "tensor":
        raise CorruptCheckpoint(f"malformed tensor header at line {i + 1}")
    name, rows, cols = parts[1], int(parts[2]), int(parts[3])
    if i + rows >= len(lines):
        raise CorruptCheckpoint(f"truncated tensor block for {name}")
    data = np.empty((rows, cols))
    for r in range(rows):
        vals = lines[i + 1 + r].split()
        if len(vals) != cols:
            raise CorruptCheckpoint(f"tensor {name}: row {r} has {len(vals)} values, wanted {cols}")
        data[r] = [float(v) for v in vals]
    if not np.all(np.isfinite(data)):
        raise CorruptCheckpoint(f"tensor {name}: non-finite entries")
    return name, data, i + 1 + rows


def checkpoint_from_text(text: str) -> Checkpoint:
    nl = text.find("\n")
    if nl < 0:
        raise CorruptCheckpoint("missing header line")
    first = text[:nl].split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic line")
    try:
        version = int(first[1])
    except ValueError as e:
        raise CorruptCheckpoint("unreadable version") from e
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint format_version {version} not supported")

    nl2 = text.find("\n", nl + 1)
    if nl2 < 0:
        raise CorruptCheckpoint("missing digest line")
    dparts = text[nl + 1 : nl2].split()
    if len(dparts) != 2 or dparts[0] != "sha256":
        raise CorruptCheckpoint("bad digest line")
    body = text[nl2 + 1 :]
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != dparts[1]:
        raise CorruptCheckpoint("integrity digest mismatch")

    lines = body.split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint("unreadable header json") from e

    tensors = {}
    i = 1
    while i < len(lines) and lines[i]:
        try:
            name, data, i = _parse_tensor_block(lines, i)
        except (ValueError, IndexError) as e:
            raise CorruptCheckpoint(f"malformed tensor data: {e}") from e
        tensors[name] = data

    arch = header["arch"]
    n_layers = len(arch["hidden"]) + 1
    try:
        weights = [(tensors[f"W{l}"], tensors[f"b{l}"][0]) for l in range(n_layers)]
        m = [(tensors[f"mW{l}"], tensors[f"mb{l}"][0]) for l in range(n_layers)]
        v = [(tensors[f"vW{l}"], tensors[f"vb{l}"][0]) for l in range(n_layers)]
    except KeyError as e:
        raise CorruptCheckpoint(f"missing tensor {e}") from e

    model = VelocityModel(
        weights, arch["action_dim"], arch["obs_dim"], list(arch["hidden"]), arch["activation"]
    )
    o = header["opt"]
    opt = AdamState(
        m, v, o["step_count"], o["learning_rate"], o["beta1"], o["beta2"], o["epsilon"]
    )
    return Checkpoint(
        model, opt, NormStats.from_dict(header["stats"]), header["config"],
        header["seed"], version,
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return checkpoint_from_text(f.read())
