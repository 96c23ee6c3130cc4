"""Full network assembly, objective, checkpointing, and inference.

Pipeline: a small 3D-conv visual stub produces the feature map f; the pose
branch produces h* and the attention weights that modulate f; the classifier
global-average-pools the modulated map.  Training optimizes cross-entropy
plus the embedding alignment loss and an attention regularizer.  Inference
runs the stub fully convolutionally in space and max-pools per-window
softmax scores.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import attention as attn
from . import embedding as emb
from . import posegraph as pg
from .diffcore import (
    ShapeError,
    Tensor,
    add,
    avg_pool3d,
    clip_min,
    constant,
    conv3d,
    dropout,
    elementwise_mul,
    log,
    matmul,
    mean_axis,
    mul_scalar,
    neg,
    relu,
    softmax_lastdim,
    sub,
    sum_axis,
    transpose,
)

STUB_MID_CHANNELS = 8
PROB_FLOOR = 1e-12

POSE_BACKBONE_KINDS = ("gcn", "recurrent")


@dataclass
class ModelConfig:
    """Extents and switches for one model instance."""

    J: int = 8
    t_p: int = 8
    t_c: int = 4
    m: int = 7
    n: int = 7
    c: int = 32
    d_g: int = 64
    d_a: int = 128
    D_e: int = 256
    alpha: float = 5.0
    beta: float = 2.0
    lambda1: float = 0.8
    lambda2: float = 1e-5
    dropout_rate: float = 0.3
    pose_backbone_kind: str = "gcn"
    attention_enabled: bool = True
    coupler_enabled: bool = True
    embedding_enabled: bool = True
    embedding_loss_kind: str = "ne"
    class_count: int = 8

    def __post_init__(self):
        for name in ("J", "t_p", "t_c", "m", "n", "c", "d_g", "d_a", "D_e", "class_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must lie in [0, 1], got {self.lambda1}")
        if self.lambda2 < 0.0:
            raise ValueError(f"lambda2 must be nonnegative, got {self.lambda2}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.pose_backbone_kind not in POSE_BACKBONE_KINDS:
            raise ValueError(f"pose_backbone_kind must be one of {POSE_BACKBONE_KINDS}")
        if self.embedding_loss_kind not in emb.EMBEDDING_LOSS_KINDS:
            raise ValueError(f"embedding_loss_kind must be one of {emb.EMBEDDING_LOSS_KINDS}")
        if self.embedding_enabled and not self.attention_enabled:
            raise ValueError("embedding requires the attention branch (it reads z1)")

    @property
    def video_extents(self) -> tuple[int, int, int]:
        """(T, H, W) the stub expects at training resolution."""
        return 4 * self.t_c, 8 * self.m, 8 * self.n

    @property
    def feature_width(self) -> int:
        return pg.pose_feature_width(self.pose_backbone_kind, self.J, self.t_p, self.d_g)

    @property
    def classifier_width(self) -> int:
        if self.attention_enabled and not self.coupler_enabled:
            return 2 * self.c
        return self.c


@dataclass
class ForwardOutputs:
    f: Tensor
    f_prime: Tensor
    h_star: Tensor | None
    z1: Tensor | None
    z2: Tensor | None
    a_s: Tensor | None
    a_t: Tensor | None
    a_st: Tensor | None
    f_e_hat: Tensor | None
    p_e_hat: Tensor | None
    class_logits: Tensor | None = None
    class_probs: Tensor | None = None
    embedded: emb.EmbeddedPair | None = None


def _xavier(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int) -> OrderedDict:
    """All learnable tensors, keyed by dotted group names, in fixed order."""
    rng = np.random.default_rng([seed, 0])
    params: OrderedDict[str, Tensor] = OrderedDict()

    def put(name, shape, init=None):
        data = _xavier(rng, shape) if init is None else init
        params[name] = Tensor(data, requires_grad=True)

    mid = STUB_MID_CHANNELS
    put("stub.conv1.w", (mid, 3, 3, 3, 3))
    put("stub.conv1.b", (mid,))
    put("stub.bn1.gamma", (mid,), init=np.ones(mid))
    put("stub.bn1.beta", (mid,))
    put("stub.conv2.w", (config.c, mid, 3, 3, 3))
    put("stub.conv2.b", (config.c,))
    put("stub.bn2.gamma", (config.c,), init=np.ones(config.c))
    put("stub.bn2.beta", (config.c,))

    if config.attention_enabled:
        if config.pose_backbone_kind == "gcn":
            shapes = pg.pose_param_shapes(config.t_p, config.d_g)
        else:
            shapes = pg.recurrent_param_shapes(config.J, config.d_g)
        for name, shape in shapes.items():
            if name.endswith(".gamma"):
                put(f"pose.{name}", shape, init=np.ones(shape))
            else:
                put(f"pose.{name}", shape)
        for name, shape in attn.attention_param_shapes(
            config.feature_width, config.d_a, config.m, config.n, config.t_c
        ).items():
            put(f"attn.{name}", shape)
        d_v = config.m * config.n * config.c
        put("embed.t_v", (config.D_e, d_v))
        put("embed.t_p", (config.D_e, config.m * config.n))
        params["embed.t_v"], params["embed.t_p"] = emb.enforce_norm_constraint(
            params["embed.t_v"], params["embed.t_p"]
        )

    put("cls.w", (config.class_count, config.classifier_width))
    put("cls.b", (config.class_count,))
    return params


def init_bn_state(config: ModelConfig) -> dict:
    state = pg.init_bn_state("stub.", (STUB_MID_CHANNELS, config.c))
    if config.attention_enabled and config.pose_backbone_kind == "gcn":
        state.update(pg.init_bn_state("pose."))
    return state


def _subparams(params: dict, prefix: str) -> dict:
    cut = len(prefix)
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix)}


def visual_backbone_forward(
    video: np.ndarray,
    params: dict,
    config: ModelConfig,
    bn_state: dict,
    *,
    training: bool = False,
    update_running: bool = False,
    allow_larger: bool = False,
) -> Tensor:
    """Two normalized 3D conv layers with a stride-2 pool between.

    Maps (T, H, W, 3) to (t_c, m', n', c); m' = m and n' = n at training
    extents.  Frames are rescaled from [0, 1] to [-1, 1], the input
    convention of the network this stub stands in for.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ShapeError(f"visual backbone expects (T, H, W, 3), got {video.shape}")
    t_req, h_req, w_req = config.video_extents
    t, h, w, _ = video.shape
    if t != t_req or (not allow_larger and (h != h_req or w != w_req)):
        raise ShapeError(f"video extents {video.shape[:3]} do not match config {(t_req, h_req, w_req)}")
    if h < h_req or w < w_req:
        raise ShapeError(f"video extents {video.shape[:3]} below training extents {(t_req, h_req, w_req)}")

    x = constant(np.ascontiguousarray(video.transpose(3, 0, 1, 2)) * 2.0 - 1.0)
    x = conv3d(x, params["stub.conv1.w"], params["stub.conv1.b"], stride=(2, 2, 2), padding=(1, 1, 1))
    x = pg.batchnorm(x, params["stub.bn1.gamma"], params["stub.bn1.beta"],
                     bn_state, "stub.bn1", training, update_running)
    x = avg_pool3d(relu(x), 2)
    x = conv3d(x, params["stub.conv2.w"], params["stub.conv2.b"], stride=(1, 2, 2), padding=(1, 1, 1))
    x = pg.batchnorm(x, params["stub.bn2.gamma"], params["stub.bn2.beta"],
                     bn_state, "stub.bn2", training, update_running)
    x = relu(x)
    return transpose(x, (1, 2, 3, 0))  # (t_c, m', n', c)


def pose_branch(
    poses: np.ndarray,
    params: dict,
    config: ModelConfig,
    a_hat: np.ndarray,
    bn_state: dict,
    training: bool,
    update_running: bool,
):
    """h*, latent vectors, and attention weights from a sampled pose clip."""
    pose_params = _subparams(params, "pose.")
    if config.pose_backbone_kind == "gcn":
        h_star = pg.pose_backbone_forward(
            poses, pose_params, a_hat,
            training=training, bn_state=bn_state, bn_prefix="pose.",
            update_running=update_running,
        )
    else:
        h_star = pg.recurrent_backbone_forward(poses, pose_params, config.d_g)
    z1, z2 = attn.latent_vectors(h_star, _subparams(params, "attn."))
    a_s, a_t = attn.attention_weights(z1, z2, config.m, config.n)
    return h_star, z1, z2, a_s, a_t


def classify(
    f_prime: Tensor,
    params: dict,
    config: ModelConfig,
    training: bool,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Global average pool, dropout, affine head, softmax."""
    pooled = mean_axis(f_prime, axis=(0, 1, 2))
    pooled = dropout(pooled, config.dropout_rate, rng, training)
    logits = add(matmul(params["cls.w"], pooled), params["cls.b"])
    return logits, softmax_lastdim(logits)


def model_forward(
    video: np.ndarray,
    poses: np.ndarray,
    params: dict,
    config: ModelConfig,
    a_hat: np.ndarray | None,
    bn_state: dict,
    training: bool = False,
    rng: np.random.Generator | None = None,
    update_running: bool = False,
) -> ForwardOutputs:
    """Training-resolution forward pass through every enabled branch."""
    f = visual_backbone_forward(
        video, params, config, bn_state,
        training=training, update_running=update_running,
    )
    out = ForwardOutputs(
        f=f, f_prime=f, h_star=None, z1=None, z2=None,
        a_s=None, a_t=None, a_st=None, f_e_hat=None, p_e_hat=None,
    )
    if config.attention_enabled:
        h_star, z1, z2, a_s, a_t = pose_branch(
            poses, params, config, a_hat, bn_state, training, update_running
        )
        out.h_star, out.z1, out.z2, out.a_s, out.a_t = h_star, z1, z2, a_s, a_t
        if config.coupler_enabled:
            out.a_st = attn.couple(a_s, a_t)
            out.f_prime = attn.modulate(f, out.a_st)
        else:
            out.f_prime = attn.dissociated_modulate(f, a_s, a_t)
        if config.embedding_enabled:
            f_s = emb.spatial_pool(f)
            pair = emb.project(f_s, z1, params["embed.t_v"], params["embed.t_p"])
            out.embedded = pair
            out.f_e_hat, out.p_e_hat = pair.f_e_hat, pair.p_e_hat
    out.class_logits, out.class_probs = classify(out.f_prime, params, config, training, rng)
    return out


def attention_regularizer(a_s: Tensor | None, a_t: Tensor | None) -> Tensor:
    """L_a: total spatial weight plus squared distance of A_T entries from 1."""
    if a_s is None:
        return constant(0.0)
    spatial = sum_axis(a_s)
    d = sub(constant(np.ones(a_t.shape)), a_t)
    return add(spatial, sum_axis(elementwise_mul(d, d)))


def cross_entropy(class_probs: Tensor, label: int) -> Tensor:
    k = class_probs.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} outside 0..{k - 1}")
    onehot = constant(np.eye(k)[label])
    picked = sum_axis(elementwise_mul(class_probs, onehot))
    return neg(log(clip_min(picked, PROB_FLOOR)))


def compose_loss(l_c: Tensor, l_e: Tensor, l_a: Tensor, lambda1: float, lambda2: float) -> Tensor:
    """L = lambda1 L_C + (1 - lambda1) L_e + lambda2 L_a, in this exact order."""
    weighted = add(mul_scalar(l_c, lambda1), mul_scalar(l_e, 1.0 - lambda1))
    return add(weighted, mul_scalar(l_a, lambda2))


def compose_loss_value(l_c: float, l_e: float, l_a: float, lambda1: float, lambda2: float) -> float:
    """Float recomposition matching compose_loss operation for operation."""
    return (l_c * lambda1 + l_e * (1.0 - lambda1)) + l_a * lambda2


def total_loss(class_probs: Tensor, label: int, l_e: Tensor, l_a: Tensor, lambda1: float, lambda2: float) -> Tensor:
    if not 0.0 <= lambda1 <= 1.0:
        raise ValueError(f"lambda1 must lie in [0, 1], got {lambda1}")
    return compose_loss(cross_entropy(class_probs, label), l_e, l_a, lambda1, lambda2)


def sample_losses(out: ForwardOutputs, label: int, config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(L_C, L_e, L_a) for one sample; disabled terms are constant zero."""
    l_c = cross_entropy(out.class_probs, label)
    if config.embedding_enabled:
        l_e = emb.embedding_loss(out.embedded, config.embedding_loss_kind)
    else:
        l_e = constant(0.0)
    l_a = attention_regularizer(out.a_s, out.a_t)
    return l_c, l_e, l_a


def fully_convolutional_inference(
    video: np.ndarray,
    poses: np.ndarray,
    params: dict,
    config: ModelConfig,
    a_hat: np.ndarray | None,
    bn_state: dict,
) -> np.ndarray:
    """Class probabilities with the stub run at full spatial extent.

    The classifier is applied to every training-sized spatial window of the
    full feature map; per-window softmax scores are max-pooled elementwise
    and renormalized.  A single window reduces to the plain classify path.
    """
    f_full = visual_backbone_forward(video, params, config, bn_state, allow_larger=True)
    _, m_full, n_full, _ = f_full.shape
    m, n = config.m, config.n

    a_t = None
    a_s_full = None
    if config.attention_enabled:
        _, _, _, a_s, a_t = pose_branch(poses, params, config, a_hat, bn_state, False, False)
        a_s_full = attn.resize_bilinear(a_s.data, m_full, n_full)

    window_probs = []
    for i in range(m_full - m + 1):
        for j in range(n_full - n + 1):
            f_win = constant(f_full.data[:, i : i + m, j : j + n, :])
            if config.attention_enabled:
                a_s_win = constant(a_s_full[i : i + m, j : j + n])
                if config.coupler_enabled:
                    f_mod = attn.modulate(f_win, attn.couple(a_s_win, a_t))
                else:
                    f_mod = attn.dissociated_modulate(f_win, a_s_win, a_t)
            else:
                f_mod = f_win
            _, probs = classify(f_mod, params, config, training=False)
            window_probs.append(probs.data)

    if len(window_probs) == 1:
        return window_probs[0].copy()
    pooled = np.maximum.reduce(window_probs)
    return pooled / pooled.sum()


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"VPC1"
_VERSION = 1


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    fh.write(arr.tobytes())


def _read_block(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(path, config: ModelConfig, topology: pg.SkeletonTopology, params: dict, bn_state: dict) -> None:
    header = {
        "config": asdict(config),
        "topology": {
            "joint_count": topology.joint_count,
            "bones": sorted([list(b) for b in topology.bones]),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            _write_block(fh, name, tensor.data)
        fh.write(struct.pack("<I", len(bn_state)))
        for name in sorted(bn_state):
            _write_block(fh, name, bn_state[name])


def load_checkpoint(path):
    """Returns (config, topology, params, bn_state); values are bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        topology = pg.SkeletonTopology(
            joint_count=header["topology"]["joint_count"],
            bones=frozenset(tuple(b) for b in header["topology"]["bones"]),
        )
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = OrderedDict()
        for _ in range(n_params):
            name, data = _read_block(fh)
            params[name] = Tensor(data, requires_grad=True)
        (n_bn,) = struct.unpack("<I", _read_exact(fh, 4))
        bn_state = {}
        for _ in range(n_bn):
            name, data = _read_block(fh)
            bn_state[name] = data.copy()
    return config, topology, params, bn_state
