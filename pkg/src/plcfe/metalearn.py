"""Gradient-based meta-learning over few-shot episodes.

A small encoder plus linear N-way head is meta-trained with MAML (first-
order by default, exact second-order behind a flag), or episodically with
a prototype head as a second supervised method. Epoch-end snapshots become
the evaluation models that the progressive episode sampler consumes.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, replace

import numpy as np

from . import episodes as episodes_mod
from ._binio import ByteReader, ByteWriter
from .cfe import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    KIND_FEWSHOT_MODEL,
    _read_mlp_descriptor,
    _read_mlp_payload,
    _write_mlp_descriptor,
    _write_mlp_payload,
)
from .cluster import ClusterModel, PseudoLabeledDataset
from .errors import FormatError, NumericError, ParameterError, ShapeError, StateError
from .numcore import (
    MlpParams,
    grads_to_vector,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    params_to_vector,
    vector_to_params,
)


@dataclass
class MamlConfig:
    """Meta-training hyperparameters, sized for small dense models on
    synthetic data."""

    inner_lr: float = 0.05
    inner_steps: int = 5
    outer_lr: float = 0.05
    meta_batch_size: int = 4
    epochs: int = 10
    steps_per_epoch: int = 50
    first_order: bool = True
    seed: int = 0
    encoder_hidden: tuple[int, ...] = (32,)
    encoder_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        # inner_lr 0 is the degenerate identity inner loop, kept legal
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ParameterError("maml.inner_lr must be >= 0 and maml.outer_lr > 0")
        if self.inner_steps < 1:
            raise ParameterError("maml.inner_steps must be >= 1")
        if self.meta_batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ParameterError("maml batch/epoch sizes must be positive")


@dataclass
class FewShotModel:
    """Encoder plus linear N-way classification head."""

    encoder: MlpParams
    head_w: np.ndarray  # (ways, encoder_dim)
    head_b: np.ndarray  # (ways,)

    def __post_init__(self):
        if self.head_w.shape[1] != self.encoder.output_dim:
            raise ShapeError("head input dim must equal encoder output dim")
        if self.head_b.shape != (self.head_w.shape[0],):
            raise ShapeError("head bias must have one entry per way")

    @property
    def ways(self) -> int:
        return self.head_w.shape[0]

    def clone(self) -> "FewShotModel":
        return FewShotModel(self.encoder.clone(), self.head_w.copy(), self.head_b.copy())


def init_fewshot_model(
    input_dim: int, ways: int, config: MamlConfig, rng: np.random.Generator
) -> FewShotModel:
    encoder = init_mlp(
        (input_dim, *config.encoder_hidden, config.encoder_dim), config.activation, rng
    )
    head_w = rng.normal(0.0, np.sqrt(1.0 / config.encoder_dim), size=(ways, config.encoder_dim))
    head_b = np.zeros(ways)
    return FewShotModel(encoder, head_w, head_b)


def model_scores(model: FewShotModel, features: np.ndarray) -> np.ndarray:
    """N-way logits for a batch of raw feature rows."""
    hidden = mlp_forward(model.encoder, features)
    return hidden @ model.head_w.T + model.head_b


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the scores."""
    n = scores.shape[0]
    probs = softmax(scores)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def model_params_vector(model: FewShotModel) -> np.ndarray:
    return np.concatenate(
        [params_to_vector(model.encoder), model.head_w.ravel(), model.head_b.ravel()]
    )


def model_with_vector(model: FewShotModel, vector: np.ndarray) -> FewShotModel:
    enc_size = params_to_vector(model.encoder).size
    encoder = vector_to_params(vector[:enc_size], model.encoder)
    w_size = model.head_w.size
    head_w = vector[enc_size : enc_size + w_size].reshape(model.head_w.shape).copy()
    head_b = vector[enc_size + w_size :].copy()
    return FewShotModel(encoder, head_w, head_b)


def model_loss_and_grad(
    model: FewShotModel, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy over (features, labels) and its flat gradient over all
    model parameters."""
    hidden, cache = mlp_forward_cached(model.encoder, features)
    logits = hidden @ model.head_w.T + model.head_b
    loss, d_logits = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    g_head_w = d_logits.T @ hidden
    g_head_b = d_logits.sum(axis=0)
    d_hidden = d_logits @ model.head_w
    enc_grads = mlp_backward(model.encoder, cache, d_hidden)
    flat = np.concatenate([grads_to_vector(enc_grads), g_head_w.ravel(), g_head_b.ravel()])
    return loss, flat


def sgd_steps(loss_and_grad, theta: np.ndarray, alpha: float, steps: int):
    """Generic inner-loop engine: `steps` gradient-descent updates.

    loss_and_grad maps a flat parameter vector to (loss, gradient).
    Returns (final theta, trajectory of visited thetas including the
    start, losses)."""
    trajectory = [np.asarray(theta, dtype=np.float64).copy()]
    losses = []
    for _ in range(steps):
        loss, grad = loss_and_grad(trajectory[-1])
        if not np.isfinite(loss):
            raise NumericError("non-finite loss during adaptation")
        losses.append(loss)
        trajectory.append(trajectory[-1] - alpha * grad)
    return trajectory[-1], trajectory, losses


def maml_inner_adapt(
    model: FewShotModel,
    support_x: np.ndarray,
    support_y: np.ndarray,
    alpha: float,
    steps: int,
) -> FewShotModel:
    """Adapt a copy of the model to a support set with plain gradient
    descent on cross-entropy; the input model is untouched."""
    if support_x.shape[0] == 0:
        raise ParameterError("support set is empty")

    def fn(vec):
        return model_loss_and_grad(model_with_vector(model, vec), support_x, support_y)

    theta, _, _ = sgd_steps(fn, model_params_vector(model), alpha, steps)
    return model_with_vector(model, theta)


def _hessian_vector_product(loss_and_grad, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    # central difference of the analytic gradient along v; exact for
    # quadratics, ~1e-8 relative otherwise
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v)
    r = 1e-5 * (1.0 + float(np.linalg.norm(theta))) / v_norm
    _, g_plus = loss_and_grad(theta + r * v)
    _, g_minus = loss_and_grad(theta - r * v)
    return (g_plus - g_minus) / (2.0 * r)


def maml_meta_gradient(
    model: FewShotModel,
    features: np.ndarray,
    tasks: list[episodes_mod.FewShotTask],
    config: MamlConfig,
) -> tuple[np.ndarray, float]:
    """Meta-gradient of the mean post-adaptation query loss over a task
    batch.

    first_order=True uses the query gradient at the adapted parameters;
    otherwise the gradient is pulled back through every inner step with
    Hessian-vector products.
    """
    theta0 = model_params_vector(model)
    total = np.zeros_like(theta0)
    total_loss = 0.0
    for task_id, task in enumerate(tasks):
        s_idx, s_way = task.support_pairs()
        q_idx, q_way = task.query_pairs()

        def support_fn(vec):
            return model_loss_and_grad(model_with_vector(model, vec), features[s_idx], s_way)

        try:
            theta, trajectory, _ = sgd_steps(support_fn, theta0, config.inner_lr, config.inner_steps)
            q_loss, q_grad = model_loss_and_grad(
                model_with_vector(model, theta), features[q_idx], q_way
            )
        except NumericError as exc:
            raise NumericError(f"task {task_id}: {exc}") from exc
        if config.first_order:
            meta = q_grad
        else:
            meta = q_grad
            for step_theta in reversed(trajectory[:-1]):
                meta = meta - config.inner_lr * _hessian_vector_product(
                    support_fn, step_theta, meta
                )
        total += meta
        total_loss += q_loss
    return total / len(tasks), total_loss / len(tasks)


def maml_meta_step(
    model: FewShotModel,
    features: np.ndarray,
    tasks: list[episodes_mod.FewShotTask],
    config: MamlConfig,
) -> tuple[FewShotModel, float]:
    """Apply one outer update; an empty task batch leaves the model as is."""
    if not tasks:
        return model, float("nan")
    meta_grad, mean_loss = maml_meta_gradient(model, features, tasks, config)
    vec = model_params_vector(model) - config.outer_lr * meta_grad
    return model_with_vector(model, vec), mean_loss


def proto_classify(
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    query_embeddings: np.ndarray,
) -> np.ndarray:
    """Negative squared distance of each query embedding to each way's
    support prototype (per-way mean)."""
    support_labels = np.asarray(support_labels)
    ways = int(support_labels.max()) + 1
    prototypes = np.empty((ways, support_embeddings.shape[1]))
    for c in range(ways):
        rows = support_embeddings[support_labels == c]
        if rows.shape[0] == 0:
            raise ParameterError(f"way {c} has no support embeddings")
        prototypes[c] = rows.mean(axis=0)
    diff = query_embeddings[:, None, :] - prototypes[None, :, :]
    return -np.sum(diff * diff, axis=2)


def proto_loss_and_grad(
    model: FewShotModel,
    support_x: np.ndarray,
    support_y: np.ndarray,
    query_x: np.ndarray,
    query_y: np.ndarray,
) -> tuple[float, list]:
    """Episodic prototype loss: cross-entropy of queries against softmaxed
    negative distances, with gradients for the encoder only."""
    n_s = support_x.shape[0]
    stacked = np.vstack([support_x, query_x])
    hidden, cache = mlp_forward_cached(model.encoder, stacked)
    e_s, e_q = hidden[:n_s], hidden[n_s:]
    ways = int(np.asarray(support_y).max()) + 1
    counts = np.bincount(support_y, minlength=ways).astype(np.float64)
    scores = proto_classify(e_s, support_y, e_q)
    loss, d_scores = cross_entropy(scores, query_y)
    prototypes = np.stack([e_s[support_y == c].mean(axis=0) for c in range(ways)])
    diff = e_q[:, None, :] - prototypes[None, :, :]  # (nq, ways, d)
    grad_q = -2.0 * np.sum(d_scores[:, :, None] * diff, axis=1)
    grad_proto = 2.0 * np.sum(d_scores[:, :, None] * diff, axis=0)
    grad_s = grad_proto[support_y] / counts[support_y][:, None]
    enc_grads = mlp_backward(model.encoder, cache, np.vstack([grad_s, grad_q]))
    return loss, enc_grads


def proto_meta_step(
    model: FewShotModel,
    features: np.ndarray,
    tasks: list[episodes_mod.FewShotTask],
    lr: float,
) -> tuple[FewShotModel, float]:
    """Average the episodic prototype gradients over the batch and take one
    encoder step; the linear head is untouched."""
    if not tasks:
        return model, float("nan")
    acc = None
    total_loss = 0.0
    for task in tasks:
        s_idx, s_way = task.support_pairs()
        q_idx, q_way = task.query_pairs()
        loss, grads = proto_loss_and_grad(
            model, features[s_idx], s_way, features[q_idx], q_way
        )
        total_loss += loss
        if acc is None:
            acc = [(gw.copy(), gb.copy()) for gw, gb in grads]
        else:
            acc = [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(acc, grads)]
    scale = lr / len(tasks)
    layers = [
        (w - scale * gw, b - scale * gb)
        for (w, b), (gw, gb) in zip(model.encoder.layers, acc)
    ]
    new_encoder = MlpParams(layers, model.encoder.activation)
    return FewShotModel(new_encoder, model.head_w.copy(), model.head_b.copy()), total_loss / len(tasks)


@dataclass
class EvalResult:
    mean_accuracy: float
    ci95: float
    task_count: int
    per_task: np.ndarray


def evaluate_fewshot(
    model: FewShotModel,
    features: np.ndarray,
    tasks: list[episodes_mod.FewShotTask],
    method: str = "maml",
    adapt: bool = True,
    config: MamlConfig | None = None,
) -> EvalResult:
    """Per-task query accuracy, with a 1.96 * std / sqrt(T) half-width.

    For maml, each task optionally adapts a copy of the model on its
    support set before classifying queries with the head. For proto,
    queries are matched to support prototypes in encoder space.
    """
    if not tasks:
        raise ParameterError("need at least one task")
    accs = np.empty(len(tasks))
    for t, task in enumerate(tasks):
        s_idx, s_way = task.support_pairs()
        q_idx, q_way = task.query_pairs()
        if method == "maml":
            used = model
            if adapt:
                cfg = config if config is not None else MamlConfig()
                used = maml_inner_adapt(
                    model, features[s_idx], s_way, cfg.inner_lr, cfg.inner_steps
                )
            preds = np.argmax(model_scores(used, features[q_idx]), axis=1)
        elif method == "proto":
            e_s = mlp_forward(model.encoder, features[s_idx])
            e_q = mlp_forward(model.encoder, features[q_idx])
            preds = np.argmax(proto_classify(e_s, s_way, e_q), axis=1)
        else:
            raise ParameterError(f"unknown method {method!r}")
        accs[t] = float(np.mean(preds == q_way))
    mean = float(accs.mean())
    ci = float(1.96 * accs.std(ddof=1) / np.sqrt(len(tasks))) if len(tasks) > 1 else 0.0
    return EvalResult(mean_accuracy=mean, ci95=ci, task_count=len(tasks), per_task=accs)


@dataclass
class SnapshotEvaluationModel:
    """Epoch-end copy of a MAML-style model, used to score candidate
    clusters; finetuning runs the same inner adaptation the meta-learner
    uses."""

    model: FewShotModel
    epoch: int
    inner_lr: float
    finetune_steps: int = 5

    def predict_scores(self, features: np.ndarray) -> np.ndarray:
        return model_scores(self.model, features)

    def finetuned(self, support_x: np.ndarray, support_y: np.ndarray) -> "SnapshotEvaluationModel":
        adapted = maml_inner_adapt(
            self.model, support_x, support_y, self.inner_lr, self.finetune_steps
        )
        return replace(self, model=adapted)


@dataclass
class _ProtoScorer:
    encoder: MlpParams
    prototypes: np.ndarray

    def predict_scores(self, features: np.ndarray) -> np.ndarray:
        embeddings = mlp_forward(self.encoder, features)
        diff = embeddings[:, None, :] - self.prototypes[None, :, :]
        return -np.sum(diff * diff, axis=2)

    def finetuned(self, support_x: np.ndarray, support_y: np.ndarray) -> "_ProtoScorer":
        e_s = mlp_forward(self.encoder, support_x)
        ways = int(np.asarray(support_y).max()) + 1
        protos = np.stack([e_s[support_y == c].mean(axis=0) for c in range(ways)])
        return _ProtoScorer(self.encoder, protos)


@dataclass
class ProtoEvaluationModel:
    """Prototype-head snapshot; scoring requires finetuning first because
    prototypes come from the support set."""

    model: FewShotModel
    epoch: int

    def predict_scores(self, features: np.ndarray) -> np.ndarray:
        raise StateError("prototype evaluation model must be finetuned on a support set first")

    def finetuned(self, support_x: np.ndarray, support_y: np.ndarray) -> _ProtoScorer:
        base = _ProtoScorer(self.model.encoder, np.zeros((1, self.model.encoder.output_dim)))
        return base.finetuned(support_x, support_y)


def snapshot_eval_model(
    model: FewShotModel,
    epoch: int,
    method: str = "maml",
    inner_lr: float = 0.05,
    finetune_steps: int = 5,
):
    """Deep-copied epoch-end snapshot registered as the current evaluation
    model; later training never mutates it."""
    snap = copy.deepcopy(model)
    if method == "maml":
        return SnapshotEvaluationModel(snap, epoch, inner_lr, finetune_steps)
    if method == "proto":
        return ProtoEvaluationModel(snap, epoch)
    raise ParameterError(f"unknown method {method!r}")


def meta_train(
    features: np.ndarray,
    pld: PseudoLabeledDataset,
    cluster_model: ClusterModel,
    episode_config: episodes_mod.EpisodeConfig,
    config: MamlConfig,
    method: str = "maml",
    episode_mode: str = "standard",
    rng: np.random.Generator | None = None,
) -> tuple[FewShotModel, dict]:
    """Meta-train on pseudo-labeled episodes.

    episode_mode "progressive" switches to the entropy-guided sampler once
    the first epoch-end snapshot exists; before that, tasks are standard.
    Returns the model and a history dict with per-epoch mean query loss
    and the fraction of progressive tasks.
    """
    if method not in ("maml", "proto"):
        raise ParameterError(f"unknown method {method!r}")
    if episode_mode not in ("standard", "progressive"):
        raise ParameterError(f"unknown episode mode {episode_mode!r}")
    if rng is None:
        raise ParameterError("meta_train requires an explicit generator")
    model = init_fewshot_model(features.shape[1], episode_config.ways, config, rng)
    eval_model = None
    epoch_losses: list[float] = []
    progressive_tasks = 0
    total_tasks = 0
    for epoch in range(config.epochs):
        losses = np.empty(config.steps_per_epoch)
        for step in range(config.steps_per_epoch):
            # one gate draw per mini-batch of tasks
            use_progressive = (
                episode_mode == "progressive"
                and eval_model is not None
                and rng.uniform() > episode_config.gate_threshold
            )
            tasks = []
            for _ in range(config.meta_batch_size):
                if use_progressive:
                    task = episodes_mod.progressive_task(
                        pld, cluster_model, eval_model, episode_config, rng
                    )
                else:
                    task = episodes_mod.sample_standard_task(pld, episode_config, rng)
                progressive_tasks += int(task.progressive)
                total_tasks += 1
                tasks.append(task)
            if method == "maml":
                model, loss = maml_meta_step(model, features, tasks, config)
            else:
                model, loss = proto_meta_step(model, features, tasks, config.outer_lr)
            losses[step] = loss
        epoch_losses.append(float(losses.mean()))
        eval_model = snapshot_eval_model(
            model, epoch, method=method, inner_lr=config.inner_lr
        )
    history = {
        "epoch_query_loss": epoch_losses,
        "progressive_fraction": progressive_tasks / total_tasks if total_tasks else 0.0,
    }
    return model, history


def save_model(model: FewShotModel, path) -> None:
    """Few-shot model in the shared versioned checkpoint container."""
    writer = ByteWriter()
    writer.write_bytes(CHECKPOINT_MAGIC)
    writer.write_u16(CHECKPOINT_VERSION)
    writer.write_u16(KIND_FEWSHOT_MODEL)
    _write_mlp_descriptor(writer, model.encoder)
    writer.write_u32(model.head_w.shape[0])
    writer.write_u32(model.head_w.shape[1])
    _write_mlp_payload(writer, model.encoder)
    writer.write_f64_array(model.head_w)
    writer.write_f64_array(model.head_b)
    with open(path, "wb") as fh:
        fh.write(writer.getvalue())


def load_model(path) -> FewShotModel:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = ByteReader(data)
    reader.expect_magic(CHECKPOINT_MAGIC)
    at = reader.offset
    version = reader.read_u16("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=at)
    at = reader.offset
    kind = reader.read_u16("kind")
    if kind != KIND_FEWSHOT_MODEL:
        raise FormatError(f"checkpoint kind {kind} is not a few-shot model", offset=at)
    activation, shapes = _read_mlp_descriptor(reader)
    ways = reader.read_u32("head ways")
    head_in = reader.read_u32("head input dim")
    encoder = _read_mlp_payload(reader, activation, shapes)
    head_w = reader.read_f64_array(ways * head_in, "head weights").reshape(ways, head_in)
    head_b = reader.read_f64_array(ways, "head bias")
    reader.expect_end()
    return FewShotModel(encoder, head_w, head_b)


def write_eval_csv(result: EvalResult, ways: int, shots: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_count", "shots", "ways", "mean_acc", "ci95"])
        writer.writerow(
            [result.task_count, shots, ways, f"{result.mean_accuracy:.6f}", f"{result.ci95:.6f}"]
        )
