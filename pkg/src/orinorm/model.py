"""The learned oriented-normal network.

A query point is described twice: a canonical k-NN patch feeds a local
encoder, and a probability-sampled global subset of the shape feeds a
global encoder of the same block structure. The two codes are fused per
patch point and an attention-weighted head decodes a unit normal direction
together with a sign logit; flipping the direction when the sign
probability falls below 0.5 yields the oriented normal.

All forward passes accept a leading batch axis; single-query prediction is
the B=1 case.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateNormal
from .geometry import KdIndex, PointCloud, extract_patch

CHECKPOINT_MAGIC = b"ONCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    patch_size: int = 128
    global_size: int = 256
    feature_dim: int = 128
    heads: int = 64
    blocks_per_encoder: int = 3
    scales: tuple = ()            # per-block point counts, non-increasing
    global_scales: tuple = ()
    random_ratio: float = 1.0 / 1.5
    # ablation switches
    use_patch_encoding: bool = True
    use_shape_encoding: bool = True
    use_distance_weights: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if not self.scales:
            self.scales = _default_scales(self.patch_size, self.blocks_per_encoder)
        self.blocks_per_encoder = len(self.scales)
        if not self.global_scales:
            self.global_scales = _default_scales(self.global_size, self.blocks_per_encoder)
        if len(self.global_scales) != self.blocks_per_encoder:
            raise ValueError("global_scales must have one entry per block")
        self.scales = tuple(int(s) for s in self.scales)
        self.global_scales = tuple(int(s) for s in self.global_scales)
        if any(b > a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be non-increasing")
        if any(b > a for a, b in zip(self.global_scales, self.global_scales[1:])):
            raise ValueError("global_scales must be non-increasing")
        if self.heads < 1:
            raise ValueError("need at least one attention head")
        if self.feature_dim < self.heads:
            raise ValueError("feature_dim must be >= heads")

    @property
    def retained_points(self):
        """Patch points surviving the encoder's truncation schedule."""
        return self.scales[-1]

    def to_dict(self):
        return {
            "patch_size": self.patch_size,
            "global_size": self.global_size,
            "feature_dim": self.feature_dim,
            "heads": self.heads,
            "blocks_per_encoder": self.blocks_per_encoder,
            "scales": list(self.scales),
            "global_scales": list(self.global_scales),
            "random_ratio": self.random_ratio,
            "use_patch_encoding": self.use_patch_encoding,
            "use_shape_encoding": self.use_shape_encoding,
            "use_distance_weights": self.use_distance_weights,
            "use_attention": self.use_attention,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scales"] = tuple(d.get("scales", ()))
        d["global_scales"] = tuple(d.get("global_scales", ()))
        return cls(**d)


def _default_scales(n, blocks):
    scales = [n]
    for _ in range(blocks - 1):
        scales.append(max(1, scales[-1] // 2))
    return tuple(scales)


@dataclass
class OrientedNormal:
    direction: np.ndarray    # unit 3-vector
    sign_logit: float

    @property
    def sign_probability(self):
        return float(1.0 / (1.0 + np.exp(-self.sign_logit)))

    @property
    def oriented(self):
        return self.direction if self.sign_probability >= 0.5 else -self.direction


class ModelParams:
    """Named map of learnable tensors."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(sorted(self.tensors))

    def items(self):
        return ((k, self.tensors[k]) for k in sorted(self.tensors))

    def values(self):
        return [self.tensors[k] for k in sorted(self.tensors)]

    def assert_finite(self):
        for name, t in self.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in parameter {name}")


def _init_linear(tensors, rng, name, n_in, n_out):
    scale = np.sqrt(2.0 / n_in)
    tensors[f"{name}.w"] = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)),
                                  requires_grad=True)
    # small nonzero biases keep the all-zero query row of a canonical patch
    # off the exact ReLU kink, where finite differences are undefined
    tensors[f"{name}.b"] = Tensor(rng.normal(0.0, 0.01, size=n_out),
                                  requires_grad=True)


def _init_pair(tensors, rng, name, c):
    """A linear map on a two-way feature concatenation, stored as the two
    halves of its weight matrix so the broadcast side is projected once."""
    scale = np.sqrt(2.0 / (2 * c))
    tensors[f"{name}.w1"] = Tensor(rng.normal(0.0, scale, size=(c, c)),
                                   requires_grad=True)
    tensors[f"{name}.w2"] = Tensor(rng.normal(0.0, scale, size=(c, c)),
                                   requires_grad=True)
    tensors[f"{name}.b"] = Tensor(rng.normal(0.0, 0.01, size=c), requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config.feature_dim
    tensors = {}
    for enc in ("patch", "shape"):
        _init_linear(tensors, rng, f"{enc}.D.0", 3, c // 2)
        _init_linear(tensors, rng, f"{enc}.D.1", c // 2, c)
        for b in range(config.blocks_per_encoder):
            for l in range(2):
                base = f"{enc}.b{b}.l{l}"
                # pre-pool width c/2: the pooled code is re-expanded by B
                _init_linear(tensors, rng, f"{base}.C", c, max(c // 2, 4))
                _init_linear(tensors, rng, f"{base}.B", max(c // 2, 4), c)
                _init_pair(tensors, rng, f"{base}.A", c)
                tensors[f"{base}.gamma1"] = Tensor(1.0, requires_grad=True)
                tensors[f"{base}.gamma2"] = Tensor(1.0, requires_grad=True)
    _init_pair(tensors, rng, "fuse.theta", c)
    _init_linear(tensors, rng, "head.I", c, 1)
    _init_linear(tensors, rng, "head.Q", c, config.heads)
    _init_linear(tensors, rng, "head.V", c, c)
    _init_linear(tensors, rng, "head.O.0", c, c)
    _init_linear(tensors, rng, "head.O.1", c, 4)
    _init_linear(tensors, rng, "head.delta", c, 3)
    return ModelParams(tensors)


def _linear(params, name, x):
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    shape = x.shape
    if len(shape) > 2:
        # one large dgemm instead of a stack of small batched ones
        flat = ad.reshape(x, (-1, shape[-1]))
        out = ad.add(ad.matmul(flat, w), b)
        return ad.reshape(out, shape[:-1] + (w.shape[-1],))
    return ad.add(ad.matmul(x, w), b)


def _linear_relu(params, name, x):
    return ad.relu(_linear(params, name, x))


def distance_weights(local_coords, gamma1, gamma2):
    """Per-point weights sigmoid(g1 - g2*dist), normalized to sum to 1.

    local_coords is (..., N, 3) with the query at the origin; returns a
    (..., N, 1) Tensor. The sigmoid is strictly positive, so the
    normalizer never vanishes.
    """
    coords = local_coords.data if isinstance(local_coords, Tensor) else np.asarray(local_coords)
    dist = Tensor(np.linalg.norm(coords, axis=-1, keepdims=True))
    beta = ad.sigmoid(ad.sub(gamma1, ad.mul(gamma2, dist)))
    total = ad.sum_reduce(beta, axis=-2, keepdims=True)
    return ad.div(beta, total)


def local_layer(params, base, features, coords, n_out, use_weights=True):
    """One latent-code extraction layer.

    Weighted per-point MLP, max-pool over all current points, pooled-code
    MLP, then concatenation with each of the n_out nearest surviving
    features and a projection back to the feature width.
    """
    n_cur = features.shape[-2]
    if use_weights:
        w = distance_weights(coords[..., :n_cur, :],
                             params[f"{base}.gamma1"], params[f"{base}.gamma2"])
        weighted = ad.mul(features, w)
    else:
        weighted = features
    pooled = ad.max_reduce(_linear_relu(params, f"{base}.C", weighted),
                           axis=-2, keepdims=True)
    pooled = _linear_relu(params, f"{base}.B", pooled)
    kept = ad.take_prefix(features, features.data.ndim - 2, n_out)
    return ad.relu(_pair_linear(params, f"{base}.A", kept, pooled))


def _encoder(params, enc, coords, scales, use_weights):
    """Stacked two-layer blocks over canonical coordinates (B, N, 3)."""
    z = _linear_relu(params, f"{enc}.D.1",
                     _linear_relu(params, f"{enc}.D.0", Tensor(coords)))
    for b, n_in in enumerate(scales):
        n_out = scales[b + 1] if b + 1 < len(scales) else scales[-1]
        z = local_layer(params, f"{enc}.b{b}.l0", z, coords, n_in, use_weights)
        z = local_layer(params, f"{enc}.b{b}.l1", z, coords, n_out, use_weights)
    return z


def patch_encoder(params, config, patch_coords):
    """Per-point embeddings (B, retained, c); row 0 is the query point."""
    if patch_coords.shape[-2] != config.scales[0]:
        raise ValueError(
            f"patch has {patch_coords.shape[-2]} points, config expects {config.scales[0]}"
        )
    return _encoder(params, "patch", patch_coords, config.scales,
                    config.use_distance_weights)


def shape_encoder(params, config, global_coords):
    """Global latent code (B, c) from the sampled global point set."""
    z = _encoder(params, "shape", global_coords, config.global_scales,
                 config.use_distance_weights)
    return ad.max_reduce(z, axis=-2)


def _pair_linear(params, name, per_point, broadcast_code):
    """Linear map on [per_point : broadcast_code] concatenation; the shared
    code is projected once and broadcast-added over the point axis."""
    a = ad.matmul(_flat2d(per_point), params[f"{name}.w1"])
    a = _unflat(a, per_point.shape)
    b = ad.matmul(_flat2d(broadcast_code), params[f"{name}.w2"])
    b = _unflat(b, broadcast_code.shape)
    return ad.add(ad.add(a, b), params[f"{name}.b"])


def _flat2d(x):
    return ad.reshape(x, (-1, x.shape[-1])) if len(x.shape) > 2 else x


def _unflat(x, ref_shape):
    if len(ref_shape) > 2:
        return ad.reshape(x, ref_shape[:-1] + (x.shape[-1],))
    return x


def fuse(params, local_embeddings, global_code):
    """Tile the global code across patch points, concatenate, project to c."""
    g = ad.reshape(global_code, global_code.shape[:-1] + (1, global_code.shape[-1]))
    return _pair_linear(params, "fuse.theta", local_embeddings, g)


def attention_head(params, config, fused):
    """Decode (direction, sign_logit, gates, neighbor normals) from the fused
    surface embedding (B, N, c)."""
    tau = ad.sigmoid(_linear(params, "head.I", fused))
    gated = ad.mul(tau, fused)
    if config.use_attention:
        scores = ad.softmax(_linear(params, "head.Q", gated), axis=-2)
        att = ad.max_reduce(scores, axis=-1, keepdims=True)
        values = ad.mul(_linear_relu(params, "head.V", gated), att)
        pooled = ad.sum_reduce(values, axis=-2)
    else:
        pooled = ad.max_reduce(_linear_relu(params, "head.V", gated), axis=-2)
    out4 = _linear(params, "head.O.1", _linear_relu(params, "head.O.0", pooled))
    raw_dir = ad.take_prefix(out4, out4.data.ndim - 1, 3)
    sign_logit = ad.index_axis(out4, out4.data.ndim - 1, 3)
    norms = np.linalg.norm(raw_dir.data, axis=-1)
    if np.any(norms < 1e-12):
        raise DegenerateNormal("predicted direction has near-zero magnitude")
    direction = ad.normalize(raw_dir)
    neighbor_normals = _linear(params, "head.delta", fused)
    return direction, sign_logit, tau, neighbor_normals


def forward(params, config, patch_coords, global_coords):
    """Full network forward on batched canonical coordinates.

    patch_coords: (B, k, 3), global_coords: (B, N_P, 3). Returns the
    attention head outputs; disabled branches (ablations) contribute zero
    codes of the right shape.
    """
    c = config.feature_dim
    batch = patch_coords.shape[0]
    if config.use_patch_encoding:
        local = patch_encoder(params, config, patch_coords)
    else:
        local = Tensor(np.zeros((batch, config.retained_points, c)))
    if config.use_shape_encoding:
        global_code = shape_encoder(params, config, global_coords)
    else:
        global_code = Tensor(np.zeros((batch, c)))
    fused = fuse(params, local, global_code)
    return attention_head(params, config, fused)


def sample_global(cloud: PointCloud, q, n_global, zeta, rng):
    """Probability-based global subset around q, nearest-first.

    Sampling gradient clamp(1 - 1.5*d/d_max, 0.05, 1), overridden to 1 on a
    uniformly random index set of floor(n_global*zeta) points; n_global
    points are drawn without replacement proportionally to the normalized
    gradient. Returns (indices, canonical coords) with coordinates
    translated by -q and scaled by 1/bbox_diagonal.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    pts = cloud.points
    n = len(pts)
    q = np.asarray(q, dtype=np.float64)
    dist = np.linalg.norm(pts - q, axis=1)
    if n <= n_global:
        chosen = np.arange(n)
    else:
        upsilon = np.clip(1.0 - 1.5 * dist / dist.max(), 0.05, 1.0)
        n_random = int(n_global * zeta)
        if n_random > 0:
            upsilon[rng.choice(n, size=min(n_random, n), replace=False)] = 1.0
        rho = upsilon / upsilon.sum()
        chosen = rng.choice(n, size=n_global, replace=False, p=rho)
    order = np.lexsort((chosen, dist[chosen]))
    chosen = chosen[order]
    coords = (pts[chosen] - q) / cloud.bbox_diagonal
    return chosen, coords


def sampling_gradient(dist, zeta, n_global, random_set=None):
    """The raw (pre-normalization) sampling gradient for given distances."""
    upsilon = np.clip(1.0 - 1.5 * np.asarray(dist) / np.max(dist), 0.05, 1.0)
    if random_set is not None:
        upsilon[np.asarray(random_set)] = 1.0
    return upsilon


def predict(cloud: PointCloud, q_index, params, config, seed,
            index: KdIndex | None = None) -> OrientedNormal:
    """Oriented normal of point q_index: patch + global encode, fuse, decode."""
    if index is None:
        index = KdIndex(cloud)
    patch = extract_patch(cloud, index, q_index, config.patch_size)
    rng = np.random.default_rng(seed)
    _, global_coords = sample_global(cloud, cloud.points[q_index],
                                     config.global_size, config.random_ratio, rng)
    direction, sign_logit, _, _ = forward(
        params, config,
        patch.local_coords[None, :, :],
        global_coords[None, :, :],
    )
    return OrientedNormal(direction=direction.data[0].copy(),
                          sign_logit=float(sign_logit.data[0]))


def predict_many(cloud: PointCloud, query_indices, params, config, seed,
                 batch_size=16, index: KdIndex | None = None):
    """Oriented normals for many query points, batched for throughput."""
    if index is None:
        index = KdIndex(cloud)
    rng = np.random.default_rng(seed)
    queries = list(query_indices)
    out = np.empty((len(queries), 3))
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        patches = []
        globals_ = []
        for q in chunk:
            patch = extract_patch(cloud, index, q, config.patch_size)
            _, g = sample_global(cloud, cloud.points[q],
                                 config.global_size, config.random_ratio, rng)
            patches.append(patch.local_coords)
            globals_.append(g)
        direction, sign_logit, _, _ = forward(
            params, config, np.stack(patches), np.stack(globals_))
        flip = 1.0 / (1.0 + np.exp(-sign_logit.data)) < 0.5
        normals = direction.data.copy()
        normals[flip] = -normals[flip]
        out[start:start + len(chunk)] = normals
    return out


# ------------------------------------------------------------- checkpointing

def save_checkpoint(path, params: ModelParams, config: ModelConfig):
    """Write a manifest + little-endian float32 checkpoint."""
    names = sorted(params.tensors)
    manifest = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "tensors": []}
    offset = 0
    blobs = []
    for name in names:
        arr = params.tensors[name].data.astype("<f4")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, ModelConfig) promoted to float64."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        payload = fh.read()
    config = ModelConfig.from_dict(manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    return ModelParams(tensors), config
