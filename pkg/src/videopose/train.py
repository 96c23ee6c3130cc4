"""SGD training, evaluation, and the ablation harness.

Everything here is deterministic for a fixed (seed, config) pair: parameter
init, batch shuffling, and dropout each draw from their own seeded stream,
so two runs produce bit-identical histories and checkpoints.
"""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import posegraph as pg
from .data import SampleRecord, uniform_sample_poses
from .diffcore import NonFiniteError, Tape, Tensor, backward, mean_axis, stack
from .embedding import enforce_norm_constraint

# sub-streams of the run seed; init_params uses stream 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 10
    batch_size: int = 8
    seed: int = 0
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: the rate drops by decay_factor every decay_every epochs."""

    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.base_lr * config.decay_factor ** (epoch // config.decay_every)


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """One plain gradient step; parameters without a gradient stay untouched.

    ``grads`` is keyed by Tensor identity as returned by backward().  A
    non-finite gradient aborts the step naming the offending parameter.
    """

    new_params = {}
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            new_params[name] = p
            continue
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteError(f"gradient for parameter {name!r} is not finite")
        new_params[name] = Tensor(p.data - lr * g.data, requires_grad=True)
    return new_params


def _renormalize_projections(params: dict) -> dict:
    # keep the embedding projections on their constraint surface; a no-op
    # direction-wise when their gradients were zero, but applied
    # unconditionally so loss-weight-only config changes stay bit-comparable
    if "embed.t_v" in params:
        t_v, t_p_mat = enforce_norm_constraint(params["embed.t_v"], params["embed.t_p"])
        params = dict(params)
        params["embed.t_v"] = t_v
        params["embed.t_p"] = t_p_mat
    return params


@dataclass
class EpochStats:
    epoch: int
    loss: float
    loss_classification: float
    loss_embedding: float
    loss_attention: float
    train_accuracy: float


@dataclass
class TrainResult:
    params: dict
    bn_state: dict
    history: list[EpochStats]
    config: TrainConfig
    topology: pg.SkeletonTopology
    a_hat: np.ndarray


def prepare_adjacency(config: mdl.ModelConfig, topology: pg.SkeletonTopology | None = None):
    """Resolve (topology, normalized adjacency) for a model config."""

    if topology is None:
        topology = pg.default_topology(config.J)
    if topology.joint_count != config.J:
        raise ValueError(
            f"topology has {topology.joint_count} joints, model expects {config.J}"
        )
    adj = pg.build_adjacency(topology, config.alpha, config.beta)
    return topology, pg.normalize_adjacency(adj)


def train_loop(
    records: list[SampleRecord],
    config: TrainConfig,
    topology: pg.SkeletonTopology | None = None,
    progress=None,
    warm_start: tuple[dict, dict] | None = None,
) -> TrainResult:
    """Train on ``records`` and return params plus history.

    Each epoch shuffles, walks fixed-size batches (the trailing partial
    batch included), backpropagates the composite loss averaged over the
    batch, and takes one SGD step per batch.  History rows carry the
    epoch-mean loss terms and the training-mode accuracy.

    Parameters start from a fresh seeded init unless ``warm_start``
    supplies a (params, bn_state) pair, typically from a checkpoint; its
    tensors must match the fresh init's names and shapes.
    """

    if not records:
        raise ValueError("cannot train on an empty dataset")
    mcfg = config.model
    for rec in records:
        if not 0 <= rec.label < mcfg.class_count:
            raise ValueError(
                f"sample {rec.sample_id} has label {rec.label}, "
                f"model expects 0..{mcfg.class_count - 1}"
            )
    topology, a_hat = prepare_adjacency(mcfg, topology)

    params = dict(mdl.init_params(mcfg, config.seed))
    bn_state = mdl.init_bn_state(mcfg)
    if warm_start is not None:
        given_params, given_bn = warm_start
        for name, p in params.items():
            if name not in given_params:
                raise ValueError(f"warm start is missing parameter {name!r}")
            if given_params[name].data.shape != p.data.shape:
                raise ValueError(
                    f"warm start parameter {name!r} has shape "
                    f"{given_params[name].data.shape}, expected {p.data.shape}"
                )
        params = {
            name: Tensor(given_params[name].data.copy(), requires_grad=True)
            for name in params
        }
        bn_state = {
            name: np.array(given_bn.get(name, value), dtype=np.float64)
            for name, value in bn_state.items()
        }
    params = _renormalize_projections(params)
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE_STREAM])
    dropout_rng = np.random.default_rng([config.seed, _DROPOUT_STREAM])

    pose_windows = [uniform_sample_poses(rec.poses, mcfg.t_p) for rec in records]

    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = shuffle_rng.permutation(len(records))
        sums = np.zeros(3)
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            with Tape() as tape:
                per_term: tuple[list, list, list] = ([], [], [])
                for idx in batch:
                    rec = records[int(idx)]
                    out = mdl.model_forward(
                        rec.video.astype(np.float64),
                        pose_windows[int(idx)],
                        params,
                        mcfg,
                        a_hat,
                        bn_state,
                        training=True,
                        rng=dropout_rng,
                        update_running=True,
                    )
                    l_c, l_e, l_a = mdl.sample_losses(out, rec.label, mcfg)
                    for slot, term in zip(per_term, (l_c, l_e, l_a)):
                        slot.append(term)
                    pred = int(np.argmax(out.class_probs.data))
                    correct += pred == rec.label
                    sums += (float(l_c.data), float(l_e.data), float(l_a.data))
                means = [mean_axis(stack(slot, axis=0), 0) for slot in per_term]
                loss = mdl.compose_loss(*means, mcfg.lambda1, mcfg.lambda2)
                grads = backward(tape, loss)
            params = sgd_step(params, grads, lr)
            params = _renormalize_projections(params)

        n = len(records)
        l_c_mean, l_e_mean, l_a_mean = (sums / n).tolist()
        stats = EpochStats(
            epoch=epoch,
            loss=mdl.compose_loss_value(
                l_c_mean, l_e_mean, l_a_mean, mcfg.lambda1, mcfg.lambda2
            ),
            loss_classification=l_c_mean,
            loss_embedding=l_e_mean,
            loss_attention=l_a_mean,
            train_accuracy=correct / n,
        )
        history.append(stats)
        if progress is not None:
            progress(stats)

    return TrainResult(params, bn_state, history, config, topology, a_hat)


HISTORY_COLUMNS = ("epoch", "L", "L_C", "L_e", "L_a", "train_acc")


def write_history_csv(path: str, history: list[EpochStats]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % (
                    row.epoch,
                    row.loss,
                    row.loss_classification,
                    row.loss_embedding,
                    row.loss_attention,
                    row.train_accuracy,
                )
            )


def read_history_csv(path: str) -> list[EpochStats]:
    history = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(HISTORY_COLUMNS):
            raise ValueError(f"{path}: unexpected history header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != len(HISTORY_COLUMNS):
                raise ValueError(f"{path}: line {lineno}: expected 6 fields")
            history.append(
                EpochStats(
                    int(parts[0]),
                    *(float(p) for p in parts[1:5]),
                    float(parts[5]),
                )
            )
    return history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    # label -> recall, or None when the class has no test samples
    per_class: dict[int, float | None]
    confusion: np.ndarray  # (class_count, class_count) true x predicted
    predictions: list[tuple[str, int, int]]  # (sample_id, label, predicted)


def evaluate(
    records: list[SampleRecord],
    params: dict,
    config: mdl.ModelConfig,
    a_hat: np.ndarray,
    bn_state: dict,
) -> EvalReport:
    """Score records with sliding-window inference at each sample's native size."""

    if not records:
        raise ValueError("cannot evaluate an empty dataset")
    confusion = np.zeros((config.class_count, config.class_count), dtype=np.int64)
    predictions = []
    for rec in records:
        probs = mdl.fully_convolutional_inference(
            rec.video.astype(np.float64),
            uniform_sample_poses(rec.poses, config.t_p),
            params,
            config,
            a_hat,
            bn_state,
        )
        pred = int(np.argmax(probs))
        confusion[rec.label, pred] += 1
        predictions.append((rec.sample_id, rec.label, pred))
    per_class: dict[int, float | None] = {}
    for cls in range(config.class_count):
        total = int(confusion[cls].sum())
        per_class[cls] = float(confusion[cls, cls] / total) if total else None
    accuracy = float(np.trace(confusion) / len(records))
    return EvalReport(accuracy, per_class, confusion, predictions)


def write_eval_csv(path: str, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,label,predicted\n")
        for sample_id, label, pred in report.predictions:
            fh.write(f"{sample_id},{label},{pred}\n")


# ---------------------------------------------------------------------------
# ablation harness


def ablation_grid() -> list[tuple[str, dict]]:
    """Every model variant the comparison table covers.

    One visual-backbone-only row, the attention models without the
    embedding branch (both pose backbones, with and without the space-time
    coupler), and the full model across the four embedding-loss kinds.
    Variants without an embedding loss put all classification weight on
    lambda1 so the composite loss has no dangling zero-weight term.
    """

    grid: list[tuple[str, dict]] = [
        (
            "backbone_only",
            dict(
                attention_enabled=False,
                coupler_enabled=False,
                embedding_enabled=False,
                lambda1=1.0,
            ),
        )
    ]
    for kind in mdl.POSE_BACKBONE_KINDS:
        for coupled in (True, False):
            tag = "coupled" if coupled else "dissoc"
            grid.append(
                (
                    f"attn_{kind}_{tag}",
                    dict(
                        pose_backbone_kind=kind,
                        coupler_enabled=coupled,
                        embedding_enabled=False,
                        lambda1=1.0,
                    ),
                )
            )
    for kind in mdl.POSE_BACKBONE_KINDS:
        for coupled in (True, False):
            tag = "coupled" if coupled else "dissoc"
            for loss_kind in ("ne", "kl_fp", "kl_pf", "kl_bi"):
                grid.append(
                    (
                        f"full_{kind}_{tag}_{loss_kind}",
                        dict(
                            pose_backbone_kind=kind,
                            coupler_enabled=coupled,
                            embedding_enabled=True,
                            embedding_loss_kind=loss_kind,
                        ),
                    )
                )
    return grid


@dataclass
class AblationRow:
    variant: str
    seed: int
    accuracy: float  # NaN when the run failed


def ablate(
    train_records: list[SampleRecord],
    test_records: list[SampleRecord],
    base: TrainConfig,
    seeds: tuple[int, ...],
    variants: tuple[str, ...] | None = None,
    topology: pg.SkeletonTopology | None = None,
    progress=None,
) -> list[AblationRow]:
    """Train and score every (variant, seed) cell of the comparison grid.

    ``variants`` restricts the grid by name.  A failed cell is recorded
    with NaN accuracy and a warning rather than aborting the sweep.
    """

    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    grid = ablation_grid()
    known = {name for name, _ in grid}
    if variants is not None:
        missing = set(variants) - known
        if missing:
            raise ValueError(f"unknown ablation variants: {sorted(missing)}")
        grid = [(name, ov) for name, ov in grid if name in variants]
    rows = []
    for name, overrides in grid:
        variant_model = dataclasses.replace(base.model, **overrides)
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, model=variant_model)
            started = time.time()
            try:
                result = train_loop(train_records, cfg, topology=topology)
                report = evaluate(
                    test_records,
                    result.params,
                    variant_model,
                    result.a_hat,
                    result.bn_state,
                )
                accuracy = report.accuracy
            except (ValueError, NonFiniteError) as exc:
                warnings.warn(f"ablation cell ({name}, seed {seed}) failed: {exc}")
                accuracy = float("nan")
            rows.append(AblationRow(name, seed, accuracy))
            if progress is not None:
                progress(rows[-1], time.time() - started)
    return rows


def summarize_ablation(rows: list[AblationRow]) -> dict[str, tuple[float, float]]:
    """variant -> (mean, std) over its non-failed seeds."""

    by_variant: dict[str, list[float]] = {}
    for row in rows:
        if np.isfinite(row.accuracy):
            by_variant.setdefault(row.variant, []).append(row.accuracy)
    return {
        name: (float(np.mean(vals)), float(np.std(vals)))
        for name, vals in by_variant.items()
    }


def write_ablation_csv(path: str, rows: list[AblationRow]) -> None:
    with open(path, "w") as fh:
        fh.write("variant,seed,accuracy\n")
        for row in rows:
            fh.write("%s,%d,%.17g\n" % (row.variant, row.seed, row.accuracy))


def write_ablation_summary_csv(path: str, rows: list[AblationRow]) -> None:
    summary = summarize_ablation(rows)
    with open(path, "w") as fh:
        fh.write("variant,mean_accuracy,std_accuracy,seeds\n")
        counts: dict[str, int] = {}
        for row in rows:
            counts[row.variant] = counts.get(row.variant, 0) + np.isfinite(row.accuracy)
        for name, (mean, std) in summary.items():
            fh.write("%s,%.17g,%.17g,%d\n" % (name, mean, std, counts[name]))


@dataclass
class GradcheckRow:
    backbone_kind: str
    loss_kind: str
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)


def toy_gradcheck_config(backbone_kind: str, loss_kind: str) -> mdl.ModelConfig:
    """Small extents that still exercise every branch of the network."""

    return mdl.ModelConfig(
        J=4, t_p=3, t_c=2, m=2, n=2, c=3, d_g=8, d_a=6, D_e=4,
        class_count=3, dropout_rate=0.0,
        pose_backbone_kind=backbone_kind, embedding_loss_kind=loss_kind,
    )


def gradcheck_report(
    max_coords_per_param: int = 4,
    step: float = 1e-5,
    backbone_kinds: tuple = mdl.POSE_BACKBONE_KINDS,
    loss_kinds: tuple | None = None,
) -> list[GradcheckRow]:
    """Finite-difference audit of d(total loss)/d(params) on toy extents.

    Runs one cell per backbone kind x embedding-loss kind.  Evaluation mode
    keeps the forward pass deterministic (no dropout draws) while every
    parameter group still reaches the loss.
    """

    from .embedding import EMBEDDING_LOSS_KINDS
    from .diffcore import finite_difference_check

    if loss_kinds is None:
        loss_kinds = EMBEDDING_LOSS_KINDS
    rows = []
    for b_idx, backbone_kind in enumerate(backbone_kinds):
        for l_idx, loss_kind in enumerate(loss_kinds):
            config = toy_gradcheck_config(backbone_kind, loss_kind)
            data_rng = np.random.default_rng([11, b_idx, l_idx])
            t, h, w = config.video_extents
            video = data_rng.uniform(0.0, 1.0, size=(t, h, w, 3))
            poses = data_rng.normal(0.0, 0.3, size=(3, config.J, config.t_p))
            label = int(data_rng.integers(config.class_count))
            params = mdl.init_params(config, seed=0)
            bn_state = mdl.init_bn_state(config)
            _, a_hat = prepare_adjacency(config)

            def fn(p, _cfg=config, _label=label, _video=video, _poses=poses, _bn=bn_state, _a=a_hat):
                out = mdl.model_forward(_video, _poses, p, _cfg, _a, _bn)
                l_c, l_e, l_a = mdl.sample_losses(out, _label, _cfg)
                return mdl.compose_loss(l_c, l_e, l_a, _cfg.lambda1, _cfg.lambda2)

            worst, details = finite_difference_check(
                fn, params, step=step,
                max_coords_per_param=max_coords_per_param,
                rng=np.random.default_rng([7, b_idx, l_idx]),
                return_details=True,
            )
            worst_param = max(details, key=details.get)
            rows.append(GradcheckRow(backbone_kind, loss_kind, worst, worst_param, details))
    return rows
