"""Losses, Adam optimization and the desk-scale training loop.

The total objective combines a sign-invariant direction loss, a binary
cross-entropy sign loss, a gate-weighted neighbor-normal MSE and a
coplanarity target for the gates:

    L = l1*L_sin + l2*L_sgn + l3*L_mse + l4*L_tau

with default weights 0.1, 0.1, 0.5 and 1.0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteGradient
from .geometry import KdIndex, PointCloud, extract_patch
from .model import ModelConfig, ModelParams, forward, init_params, sample_global


@dataclass
class TrainConfig:
    lr: float = 9e-4
    decay_epochs: tuple = (400, 600, 800)
    decay_factor: float = 0.2
    batch_size: int = 16
    epochs: int = 50
    samples_per_epoch: int = 4000
    lambda_sin: float = 0.1
    lambda_sgn: float = 0.1
    lambda_mse: float = 0.5
    lambda_tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("lambda_sin", "lambda_sgn", "lambda_mse", "lambda_tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))


def loss_sin(direction, gt_normal):
    """||n x n_hat||, averaged over the batch; invariant to flipping n."""
    direction = direction if isinstance(direction, Tensor) else Tensor(direction)
    if direction.data.ndim == 1:
        direction = ad.reshape(direction, (1, 3))
    gt = np.asarray(gt_normal, dtype=np.float64).reshape(direction.shape)
    crossed = ad.cross(direction, Tensor(gt))
    # epsilon keeps the sqrt differentiable when prediction == ground truth
    sq = ad.add(ad.sum_reduce(ad.square(crossed), axis=-1), Tensor(1e-24))
    return ad.mean_reduce(ad.sqrt(sq))


def loss_sgn(sign_logit, label):
    """Numerically stable binary cross entropy on logits, batch mean."""
    s = sign_logit if isinstance(sign_logit, Tensor) else Tensor(sign_logit)
    y = np.asarray(label, dtype=np.float64).reshape(s.data.shape)
    return ad.mean_reduce(ad.sub(ad.softplus(s), ad.mul(s, Tensor(y))))


def loss_mse(neighbor_normals, gt_normals, gates):
    """Gate-weighted mean squared error over the retained patch points."""
    pred = neighbor_normals if isinstance(neighbor_normals, Tensor) else Tensor(neighbor_normals)
    if pred.data.ndim == 2:
        pred = ad.reshape(pred, (1,) + pred.data.shape)
    gt = np.asarray(gt_normals, dtype=np.float64).reshape(pred.data.shape)
    tau = gates if isinstance(gates, Tensor) else Tensor(gates)
    tau = ad.reshape(tau, pred.data.shape[:-1] + (1,))
    diff = ad.sum_reduce(ad.square(ad.sub(pred, Tensor(gt))), axis=-1, keepdims=True)
    per_sample = ad.mean_reduce(ad.mul(tau, diff), axis=-2)
    return ad.mean_reduce(per_sample)


def coplanarity_target(local_coords, gt_query_normal):
    """Target gates exp(-(p.n_hat)^2 / xi^2) with the adaptive floor on xi."""
    coords = np.asarray(local_coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None, :, :]
    gt = np.asarray(gt_query_normal, dtype=np.float64).reshape(coords.shape[0], 1, 3)
    proj = np.sum(coords * gt, axis=-1)          # (B, N)
    xi = np.maximum(0.05 ** 2, 0.3 * np.mean(proj ** 2, axis=-1, keepdims=True))
    return np.exp(-(proj ** 2) / xi ** 2)


def loss_tau(gates, local_coords, gt_query_normal):
    """Mean squared deviation of the gates from the coplanarity target."""
    target = coplanarity_target(local_coords, gt_query_normal)
    tau = gates if isinstance(gates, Tensor) else Tensor(gates)
    tau = ad.reshape(tau, target.shape)
    return ad.mean_reduce(ad.square(ad.sub(tau, Tensor(target))))


def total_loss(direction, sign_logit, gates, neighbor_normals,
               gt_query_normal, gt_neighbor_normals, local_coords, sign_label,
               config: TrainConfig):
    """Weighted four-term objective; returns (scalar Tensor, component dict)."""
    l_sin = loss_sin(direction, gt_query_normal)
    l_sgn = loss_sgn(sign_logit, sign_label)
    l_mse = loss_mse(neighbor_normals, gt_neighbor_normals, gates)
    l_tau = loss_tau(gates, local_coords, gt_query_normal)
    total = ad.add(
        ad.add(ad.mul(Tensor(config.lambda_sin), l_sin),
               ad.mul(Tensor(config.lambda_sgn), l_sgn)),
        ad.add(ad.mul(Tensor(config.lambda_mse), l_mse),
               ad.mul(Tensor(config.lambda_tau), l_tau)),
    )
    components = {
        "sin": float(l_sin.data),
        "sgn": float(l_sgn.data),
        "mse": float(l_mse.data),
        "tau": float(l_tau.data),
    }
    return total, components


def sign_labels(direction_data, gt_query_normals):
    """1 where the predicted direction already agrees with ground truth.

    Computed from the current forward pass; no gradient flows through it.
    """
    dots = np.sum(np.asarray(direction_data) * np.asarray(gt_query_normals), axis=-1)
    return (dots > 0).astype(np.float64)


class AdamState:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params: ModelParams, state: AdamState, lr: float):
    """One bias-corrected Adam update from the accumulated .grad fields."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate after applying every decay threshold <= epoch."""
    lr = config.lr
    for threshold in config.decay_epochs:
        if epoch >= threshold:
            lr *= config.decay_factor
    return lr


@dataclass
class TrainingSample:
    patch_coords: np.ndarray        # (k, 3) canonical
    global_coords: np.ndarray       # (N_P, 3) canonical
    gt_query_normal: np.ndarray     # (3,)
    gt_neighbor_normals: np.ndarray  # (retained, 3)
    retained_coords: np.ndarray     # (retained, 3)


def build_sample(cloud, index, q, model_cfg: ModelConfig, rng) -> TrainingSample:
    patch = extract_patch(cloud, index, q, model_cfg.patch_size)
    _, global_coords = sample_global(cloud, cloud.points[q],
                                     model_cfg.global_size, model_cfg.random_ratio, rng)
    keep = model_cfg.retained_points
    nbr = patch.neighbor_indices[:keep]
    return TrainingSample(
        patch_coords=patch.local_coords,
        global_coords=global_coords,
        gt_query_normal=cloud.normals[q],
        gt_neighbor_normals=cloud.normals[nbr],
        retained_coords=patch.local_coords[:keep],
    )


def train(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Desk-scale training loop; deterministic given the seed.

    dataset is a list of PointClouds with ground-truth oriented normals.
    Returns (params, history) where history rows carry per-epoch means.
    """
    for cloud in dataset:
        if cloud.normals is None:
            raise ValueError("training clouds need ground-truth normals")
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, train_cfg.seed)
    indexes = [KdIndex(c) for c in dataset]
    state = AdamState()
    steps = max(1, train_cfg.samples_per_epoch // train_cfg.batch_size)
    history = []

    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_at(epoch - 1, train_cfg)
        epoch_total = 0.0
        epoch_parts = {"sin": 0.0, "sgn": 0.0, "mse": 0.0, "tau": 0.0}
        for _ in range(steps):
            samples = []
            for _ in range(train_cfg.batch_size):
                ci = int(rng.integers(len(dataset)))
                q = int(rng.integers(len(dataset[ci])))
                samples.append(build_sample(dataset[ci], indexes[ci], q, model_cfg, rng))
            patch = np.stack([s.patch_coords for s in samples])
            global_pts = np.stack([s.global_coords for s in samples])
            gt_q = np.stack([s.gt_query_normal for s in samples])
            gt_nbr = np.stack([s.gt_neighbor_normals for s in samples])
            retained = np.stack([s.retained_coords for s in samples])

            direction, sign_logit, gates, nbr_normals = forward(
                params, model_cfg, patch, global_pts)
            labels = sign_labels(direction.data, gt_q)
            loss, parts = total_loss(direction, sign_logit, gates, nbr_normals,
                                     gt_q, gt_nbr, retained, labels, train_cfg)
            ad.zero_grads(params.values())
            ad.backward(loss)
            adam_step(params, state, lr)

            epoch_total += float(loss.data)
            for key in epoch_parts:
                epoch_parts[key] += parts[key]
        row = {"epoch": epoch, "lr": lr, "mean_loss": epoch_total / steps}
        row.update({f"mean_{k}": v / steps for k, v in epoch_parts.items()})
        history.append(row)
    params.assert_finite()
    return params, history


def write_history_csv(history, path):
    if not history:
        return
    fields = list(history[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)


def parse_config_file(path):
    """Flat `key = value` config text ('#' comments) into a dict of strings."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


_TRAIN_KEYS = {
    "lr": float,
    "decay_factor": float,
    "batch_size": int,
    "epochs": int,
    "samples_per_epoch": int,
    "lambda_sin": float,
    "lambda_sgn": float,
    "lambda_mse": float,
    "lambda_tau": float,
    "seed": int,
}
_MODEL_KEYS = {
    "patch_size": int,
    "global_size": int,
    "feature_dim": int,
    "heads": int,
    "random_ratio": float,
    "use_patch_encoding": lambda s: s.lower() in ("1", "true", "yes"),
    "use_shape_encoding": lambda s: s.lower() in ("1", "true", "yes"),
    "use_distance_weights": lambda s: s.lower() in ("1", "true", "yes"),
    "use_attention": lambda s: s.lower() in ("1", "true", "yes"),
}


def configs_from_file(path):
    """Build (ModelConfig, TrainConfig) from a flat key-value file."""
    raw = parse_config_file(path)
    train_kwargs = {}
    model_kwargs = {}
    for key, value in raw.items():
        if key in _TRAIN_KEYS:
            train_kwargs[key] = _TRAIN_KEYS[key](value)
        elif key in _MODEL_KEYS:
            model_kwargs[key] = _MODEL_KEYS[key](value)
        elif key == "decay_epochs":
            train_kwargs["decay_epochs"] = tuple(
                int(v) for v in value.split(",") if v.strip()
            )
        elif key == "scales":
            model_kwargs["scales"] = tuple(int(v) for v in value.split(",") if v.strip())
        elif key == "global_scales":
            model_kwargs["global_scales"] = tuple(
                int(v) for v in value.split(",") if v.strip()
            )
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
