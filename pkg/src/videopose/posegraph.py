"""Skeleton graph and the pose feature backbone.

A skeleton is a weighted graph over J joints: bone-connected pairs get weight
alpha, unconnected pairs beta, the diagonal stays zero.  Per frame, joint
coordinates pass through one graph convolution with the symmetrically
normalized adjacency; frames are stacked into an image over the (joints x
frames) plane and pushed through a small conv stack to give the pose feature
vector.  A stacked recurrent encoder is provided as the baseline backbone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    ShapeError,
    Tensor,
    add,
    add_scalar,
    broadcast_mul,
    concat,
    constant,
    conv2d,
    elementwise_mul,
    matmul,
    mean_axis,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    sub,
    tanh,
    transpose,
)

# conv-stack output channels, applied over the (joints x frames) plane
CONV_CHANNELS = (64, 64, 128)
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint count plus the set of bones as unordered index pairs."""

    joint_count: int
    bones: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.joint_count < 1:
            raise ValueError(f"joint_count must be positive, got {self.joint_count}")
        canon = set()
        for pair in self.bones:
            i, j = int(pair[0]), int(pair[1])
            if i == j:
                raise ValueError(f"self-pair ({i}, {j}) is not a bone")
            if not (0 <= i < self.joint_count and 0 <= j < self.joint_count):
                raise ValueError(f"bone ({i}, {j}) references a joint >= {self.joint_count}")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "bones", frozenset(canon))
        if self.joint_count > 1 and not self._connected():
            warnings.warn("skeleton bone graph is not connected", stacklevel=2)

    def _connected(self) -> bool:
        adj = {i: set() for i in range(self.joint_count)}
        for i, j in self.bones:
            adj[i].add(j)
            adj[j].add(i)
        seen = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return len(seen) == self.joint_count

    def save(self, path) -> None:
        lines = [str(self.joint_count)]
        lines += [f"{i} {j}" for i, j in sorted(self.bones)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        with open(path, encoding="utf-8") as fh:
            rows = [ln.strip() for ln in fh]
        rows = [ln for ln in rows if ln and not ln.startswith("#")]
        if not rows:
            raise ValueError(f"{path}: empty topology file")
        try:
            j = int(rows[0])
        except ValueError:
            raise ValueError(f"{path}: first line must be the joint count, got {rows[0]!r}") from None
        bones = set()
        for lineno, ln in enumerate(rows[1:], start=2):
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 'i j', got {ln!r}")
            bones.add((int(parts[0]), int(parts[1])))
        return cls(joint_count=j, bones=frozenset(bones))


def default_topology(joint_count: int = 8) -> SkeletonTopology:
    """A connected tree over joint_count joints: a spine with short branches."""
    bones = set()
    spine_len = (joint_count + 1) // 2
    for i in range(spine_len - 1):
        bones.add((i, i + 1))
    # hang the remaining joints off alternating spine nodes
    for k, j in enumerate(range(spine_len, joint_count)):
        bones.add((k % spine_len, j))
    return SkeletonTopology(joint_count=joint_count, bones=frozenset(bones))


@dataclass(frozen=True)
class WeightedAdjacency:
    E: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        e = np.asarray(self.E, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"adjacency must be square, got {e.shape}")
        if not np.array_equal(e, e.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diagonal(e) != 0.0):
            raise ValueError("adjacency diagonal must be exactly zero")
        off = e[~np.eye(e.shape[0], dtype=bool)]
        if off.size and not np.all(np.isin(off, [self.alpha, self.beta])):
            raise ValueError("off-diagonal entries must be alpha or beta")
        object.__setattr__(self, "E", e)


def build_adjacency(topology: SkeletonTopology, alpha: float, beta: float) -> WeightedAdjacency:
    """Weighted adjacency: alpha on bones, beta elsewhere, zero diagonal."""
    if not (np.isfinite(alpha) and np.isfinite(beta)):
        raise ValueError("alpha and beta must be finite")
    j = topology.joint_count
    e = np.full((j, j), float(beta))
    np.fill_diagonal(e, 0.0)
    for a, b in topology.bones:
        e[a, b] = e[b, a] = float(alpha)
    return WeightedAdjacency(E=e, alpha=float(alpha), beta=float(beta))


def normalize_adjacency(adj: WeightedAdjacency) -> np.ndarray:
    """Symmetric degree normalization of E + I.

    Degrees sum the self-loop-augmented rows; rows of zero degree are
    rejected before the inverse square root.
    """
    a = adj.E + np.eye(adj.E.shape[0])
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("zero-degree row in adjacency; cannot normalize")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]


def gcn_frame(p_t: Tensor, a_hat: np.ndarray, w_t: Tensor) -> Tensor:
    """One graph convolution: A_hat @ G @ W where G is the J x 3 coordinate matrix."""
    if p_t.ndim != 2 or p_t.shape[0] != 3:
        raise ShapeError(f"gcn_frame: pose frame must be 3 x J, got {p_t.shape}")
    if a_hat.shape != (p_t.shape[1], p_t.shape[1]):
        raise ShapeError(f"gcn_frame: adjacency {a_hat.shape} does not match J={p_t.shape[1]}")
    g = transpose(p_t, (1, 0))
    return matmul(matmul(constant(a_hat), g), w_t)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: dict,
    key: str,
    training: bool,
    update_running: bool,
) -> Tensor:
    """Per-channel normalization of a channels-first (C, *spatial) map.

    Normalization always uses the current map's own statistics: samples
    flow through one at a time here, and per-sample statistics carry class
    signal (pose layouts differ by class), so swapping in stored averages
    at evaluation changes the learned function instead of denoising it.
    Running statistics are still tracked (momentum 0.9) and checkpointed;
    updates are opt-in so pure closures (gradient checks) stay mutation
    free.
    """
    spatial = tuple(range(1, len(x.shape)))
    mu = mean_axis(x, axis=spatial)
    centered = sub(x, broadcast_mul(constant(np.ones(x.shape)), mu, axes=(0,)))
    var = mean_axis(elementwise_mul(centered, centered), axis=spatial)
    if training and update_running:
        m = BN_MOMENTUM
        state[key + ".mean"] = m * state[key + ".mean"] + (1 - m) * mu.data
        state[key + ".var"] = m * state[key + ".var"] + (1 - m) * var.data
    inv_std = pow_scalar(add_scalar(var, BN_EPS), -0.5)
    normed = broadcast_mul(centered, inv_std, axes=(0,))
    scaled = broadcast_mul(normed, gamma, axes=(0,))
    return add(scaled, broadcast_mul(constant(np.ones(x.shape)), beta, axes=(0,)))


def init_bn_state(prefix: str = "", channels: tuple = CONV_CHANNELS) -> dict:
    state = {}
    for i, ch in enumerate(channels, start=1):
        state[f"{prefix}bn{i}.mean"] = np.zeros(ch)
        state[f"{prefix}bn{i}.var"] = np.ones(ch)
    return state


def pose_backbone_forward(
    poses: np.ndarray,
    params: dict,
    a_hat: np.ndarray,
    *,
    training: bool = False,
    bn_state: dict | None = None,
    bn_prefix: str = "",
    update_running: bool = False,
) -> Tensor:
    """GCN backbone: per-frame graph conv, residual, conv stack, flatten.

    poses is the raw (3, J, t_p) coordinate array; gradients flow to the
    per-frame GCN weights w_t.{k}, the shared residual projection w_res, and
    the conv/norm parameters.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[0] != 3:
        raise ShapeError(f"pose_backbone_forward: poses must be (3, J, t_p), got {poses.shape}")
    t_p = poses.shape[2]
    if f"w_t.{t_p - 1}" not in params or f"w_t.{t_p}" in params:
        have = sum(1 for k in params if k.startswith("w_t."))
        raise ShapeError(f"pose_backbone_forward: {have} frame weights for t_p={t_p} frames")
    if bn_state is None:
        if update_running:
            raise ValueError("update_running needs a bn_state dict")
        bn_state = init_bn_state()

    w_res = params["w_res"]
    columns = []
    for t in range(t_p):
        p_t = constant(poses[:, :, t])
        f_t = gcn_frame(p_t, a_hat, params[f"w_t.{t}"])
        res = matmul(transpose(p_t, (1, 0)), w_res)
        x_t = add(f_t, res)  # (J, d_g)
        columns.append(reshape(transpose(x_t, (1, 0)), (x_t.shape[1], x_t.shape[0], 1)))
    x = concat(columns, axis=2)  # (d_g, J, t_p)

    for i in range(1, 4):
        x = conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=(1, 1), padding=(1, 1))
        x = batchnorm(
            x, params[f"bn{i}.gamma"], params[f"bn{i}.beta"],
            bn_state, f"{bn_prefix}bn{i}", training, update_running,
        )
        x = relu(x)
    return reshape(x, (x.size,))


def recurrent_backbone_forward(poses: np.ndarray, params: dict, hidden: int) -> Tensor:
    """Stacked 3-layer recurrent encoding; h* concatenates the top layer's steps.

    Gates are packed (input, forget, cell, output) along the first axis of
    each weight block.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[0] != 3:
        raise ShapeError(f"recurrent_backbone_forward: poses must be (3, J, t_p), got {poses.shape}")
    t_p = poses.shape[2]
    selectors = []
    for k in range(4):
        sel = np.zeros((hidden, 4 * hidden))
        sel[:, k * hidden : (k + 1) * hidden] = np.eye(hidden)
        selectors.append(constant(sel))

    h = [constant(np.zeros(hidden)) for _ in range(3)]
    c = [constant(np.zeros(hidden)) for _ in range(3)]
    outputs = []
    for t in range(t_p):
        x = constant(poses[:, :, t].reshape(-1, order="C"))
        for layer in range(3):
            pre = add(
                add(matmul(params[f"lstm{layer}.w_x"], x), matmul(params[f"lstm{layer}.w_h"], h[layer])),
                params[f"lstm{layer}.b"],
            )
            gi = sigmoid(matmul(selectors[0], pre))
            gf = sigmoid(matmul(selectors[1], pre))
            gg = tanh(matmul(selectors[2], pre))
            go = sigmoid(matmul(selectors[3], pre))
            c[layer] = add(elementwise_mul(gf, c[layer]), elementwise_mul(gi, gg))
            h[layer] = elementwise_mul(go, tanh(c[layer]))
            x = h[layer]
        outputs.append(h[2])
    return concat(outputs, axis=0)


def pose_param_shapes(t_p: int, d_g: int) -> dict:
    """Shapes for the GCN backbone parameter group, in creation order."""
    shapes = {f"w_t.{t}": (3, d_g) for t in range(t_p)}
    shapes["w_res"] = (3, d_g)
    cin = d_g
    for i, cout in enumerate(CONV_CHANNELS, start=1):
        shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.b"] = (cout,)
        shapes[f"bn{i}.gamma"] = (cout,)
        shapes[f"bn{i}.beta"] = (cout,)
        cin = cout
    return shapes


def recurrent_param_shapes(joint_count: int, hidden: int) -> dict:
    shapes = {}
    in_width = 3 * joint_count
    for layer in range(3):
        shapes[f"lstm{layer}.w_x"] = (4 * hidden, in_width)
        shapes[f"lstm{layer}.w_h"] = (4 * hidden, hidden)
        shapes[f"lstm{layer}.b"] = (4 * hidden,)
        in_width = hidden
    return shapes


def pose_feature_width(kind: str, joint_count: int, t_p: int, d_g: int) -> int:
    """Length of h* for each backbone kind."""
    if kind == "gcn":
        return CONV_CHANNELS[-1] * joint_count * t_p
    if kind == "recurrent":
        return d_g * t_p
    raise ValueError(f"unknown pose backbone kind {kind!r}")
