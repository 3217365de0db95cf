"""Functional perturbations of a backbone and independent-model builders.

Functional copies come from fine-tuning on a synthetic downstream task,
magnitude pruning, or embedding distillation into a fresh student.
Independent models are trained from scratch on a masked-pixel
reconstruction objective and never see the watermark bundle, the trigger
set, or any message.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nnengine import (
    MlpNetwork,
    OptimizerState,
    backward,
    forward_batch,
    init_network,
    l1_unstructured_prune,
    optimizer_step,
)
from .synth import gen_synthetic_images
from .watermark import ModelBundle

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("finetune", "prune", "distill", "independent")

# Omega models drifting beyond this relative embedding error are not
# functional copies any more and are dropped from populations.
FUNCTIONALITY_LIMIT = 0.5


@dataclass
class AttackSpec:
    kind: str
    epochs: int = 0
    lr: float = 1e-3
    fraction: float = 0.0
    student_hidden: tuple[int, ...] | None = None
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("prune fraction must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class DownstreamTask:
    """Synthetic labeled classification data in the backbone's input space."""

    inputs: np.ndarray  # (B, s)
    labels: np.ndarray  # (B,) ints in [0, n_classes)
    n_classes: int
    seed: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels must align")


def make_blob_task(
    s: int, n_classes: int = 4, n_samples: int = 512, seed: int = 0, spread: float = 0.08
) -> DownstreamTask:
    """Gaussian blobs around distinct texture centers, one per class."""
    rng = np.random.default_rng(seed)
    centers = gen_synthetic_images(n_classes, s, seed + 1)
    labels = rng.integers(0, n_classes, size=n_samples)
    inputs = centers[labels] + spread * rng.standard_normal((n_samples, s))
    return DownstreamTask(inputs=inputs, labels=labels, n_classes=n_classes, seed=seed)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def finetune_attack(
    backbone: MlpNetwork,
    task: DownstreamTask,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[MlpNetwork, float]:
    """Fine-tune every backbone layer through a fresh linear head with
    cross-entropy; the head is discarded. Returns (backbone, accuracy)."""
    net = backbone.copy()
    k = net.output_dim
    rng = np.random.default_rng(seed)
    head = init_network([k, task.n_classes], ["identity"], rng)
    st_net = OptimizerState.fresh(net, lr=lr)
    st_head = OptimizerState.fresh(head, lr=lr)
    n_samples = task.inputs.shape[0]
    onehot = np.eye(task.n_classes)[task.labels]
    for _ in range(epochs):
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            idx = order[start : start + batch_size]
            emb, tr_net = forward_batch(net, task.inputs[idx])
            logits, tr_head = forward_batch(head, emb)
            probs = _softmax(logits)
            if not np.isfinite(probs).all():
                raise RuntimeError("fine-tuning diverged: non-finite logits")
            g_logits = (probs - onehot[idx]) / idx.size
            g_head = backward(head, tr_head, g_logits)
            g_net = backward(net, tr_net, g_head.wrt_input)
            optimizer_step(head, g_head, st_head)
            optimizer_step(net, g_net, st_net)
    emb, _ = forward_batch(net, task.inputs)
    logits, _ = forward_batch(head, emb)
    accuracy = float((logits.argmax(axis=1) == task.labels).mean())
    return net, accuracy


def prune_attack(backbone: MlpNetwork, fraction: float) -> MlpNetwork:
    """Global smallest-magnitude weight pruning, biases exempt."""
    return l1_unstructured_prune(backbone, fraction)


def distill_attack(
    teacher: MlpNetwork,
    student_hidden: tuple[int, ...],
    data_seed: int,
    epochs: int,
    lr: float = 1e-3,
    n_inputs: int = 5000,
    batch_size: int = 256,
    seed: int = 0,
    student_init: MlpNetwork | None = None,
) -> tuple[MlpNetwork, float]:
    """Train a student to match the teacher's embeddings on synthetic
    unlabeled inputs. Returns (student, final mean squared matching loss).

    By default the student is a fresh random network with the given hidden
    widths; student_init warm-starts from an existing network instead.
    """
    s, k = teacher.input_dim, teacher.output_dim
    if student_init is not None:
        student = student_init.copy()
    else:
        dims = [s, *student_hidden, k]
        student = init_network(
            dims, ["tanh"] * (len(dims) - 2) + ["identity"], np.random.default_rng(seed)
        )
    if student.output_dim != k or student.input_dim != s:
        raise ValueError("student must map the teacher's input to its output space")
    inputs = gen_synthetic_images(n_inputs, s, data_seed)
    targets, _ = forward_batch(teacher, inputs)
    state = OptimizerState.fresh(student, lr=lr)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(n_inputs)
        for start in range(0, n_inputs, batch_size):
            idx = order[start : start + batch_size]
            out, trace = forward_batch(student, inputs[idx])
            diff = out - targets[idx]
            if not np.isfinite(diff).all():
                raise RuntimeError("distillation diverged: non-finite outputs")
            grads = backward(student, trace, 2.0 * diff / idx.size)
            optimizer_step(student, grads, state)
    out, _ = forward_batch(student, inputs)
    final_loss = float(((out - targets) ** 2).mean())
    return student, final_loss


def make_independent(
    dims,
    seed: int,
    pretrain_data_seed: int,
    epochs: int = 40,
    n_images: int = 400,
    mask_fraction: float = 0.25,
    lr: float = 2e-3,
    batch_size: int = 128,
) -> MlpNetwork:
    """Backbone trained from scratch to reconstruct masked pixels through
    its embedding bottleneck; a linear reconstruction head is used during
    training and discarded. The routine sees only its own synthetic data."""
    dims = list(dims)
    s, k = dims[0], dims[-1]
    rng = np.random.default_rng(seed)
    backbone = init_network(dims, ["tanh"] * (len(dims) - 2) + ["identity"], rng)
    head = init_network([k, s], ["identity"], rng)
    images = gen_synthetic_images(n_images, s, pretrain_data_seed)
    st_backbone = OptimizerState.fresh(backbone, lr=lr)
    st_head = OptimizerState.fresh(head, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(n_images)
        for start in range(0, n_images, batch_size):
            idx = order[start : start + batch_size]
            batch = images[idx]
            mask = rng.random(batch.shape) < mask_fraction
            emb, tr_b = forward_batch(backbone, np.where(mask, 0.0, batch))
            recon, tr_h = forward_batch(head, emb)
            g_out = 2.0 * (recon - batch) / idx.size
            g_head = backward(head, tr_h, g_out)
            g_backbone = backward(backbone, tr_b, g_head.wrt_input)
            optimizer_step(head, g_head, st_head)
            optimizer_step(backbone, g_backbone, st_backbone)
    return backbone


def relative_embedding_error(
    model: MlpNetwork, reference: MlpNetwork, inputs: np.ndarray
) -> float:
    """Mean per-input embedding distance relative to the reference norm."""
    out_m, _ = forward_batch(model, inputs)
    out_r, _ = forward_batch(reference, inputs)
    norms = np.sqrt((out_r**2).sum(axis=1))
    dists = np.sqrt(((out_m - out_r) ** 2).sum(axis=1))
    return float((dists / np.maximum(norms, 1e-12)).mean())


def apply_attack(bundle: ModelBundle, spec: AttackSpec) -> MlpNetwork:
    """Run one functional-copy attack against the watermarked backbone."""
    base = bundle.watermarked_f
    if spec.kind == "prune":
        return prune_attack(base, spec.fraction)
    if spec.kind == "finetune":
        task = make_blob_task(base.input_dim, n_classes=spec.n_classes, seed=spec.seed)
        net, _ = finetune_attack(base, task, spec.epochs, spec.lr, seed=spec.seed)
        return net
    if spec.kind == "distill":
        hidden = spec.student_hidden
        if hidden is None:
            hidden = tuple(layer.out_dim for layer in base.layers[:-1])
        student, _ = distill_attack(
            base, hidden, data_seed=spec.seed + 17, epochs=spec.epochs, lr=spec.lr,
            seed=spec.seed,
        )
        return student
    raise ValueError(f"not a functional-copy attack: {spec.kind}")


@dataclass
class PopulationResult:
    models: list[MlpNetwork]
    rows: list[dict] = field(default_factory=list)  # manifest: index, kind, seed, params
    excluded: int = 0


def _random_omega_spec(rng: np.random.Generator, seed: int) -> AttackSpec:
    """Default functional-copy mixture: fine-tuning and pruning, the
    perturbations a copy survives with its watermark intact at this scale.
    Distillation (fresh student on synthetic data) strips the watermark and
    mostly fails the functionality gate, so it joins a population only via
    explicit specs."""
    kind = rng.choice(["finetune", "prune"])
    if kind == "prune":
        return AttackSpec(kind="prune", fraction=float(rng.uniform(0.05, 0.45)), seed=seed)
    return AttackSpec(kind="finetune", epochs=int(rng.integers(1, 4)), lr=1e-3, seed=seed)


def sample_model_population(
    bundle: ModelBundle,
    kind: str,
    m_models: int,
    seed: int,
    specs: list[AttackSpec] | None = None,
    heldout_inputs: np.ndarray | None = None,
) -> PopulationResult:
    """M functional copies (kind="omega") or M independent models
    (kind="xi"), with per-model seeds derived from the master seed plus the
    model index.

    Omega copies failing the functionality check (relative embedding error
    beyond FUNCTIONALITY_LIMIT on held-out inputs) are excluded with a
    warning. Explicit specs override the randomized attack mixture and are
    cycled over the M slots.
    """
    if kind not in ("omega", "xi"):
        raise ValueError("kind must be 'omega' or 'xi'")
    if m_models < 1:
        raise ValueError("need at least one model")
    result = PopulationResult(models=[])
    if heldout_inputs is None:
        heldout_inputs = gen_synthetic_images(128, bundle.s, seed + 999)
    mix_rng = np.random.default_rng(seed)
    backbone_dims = [bundle.s] + [l.out_dim for l in bundle.frozen_f.layers]
    for index in range(m_models):
        model_seed = seed + index
        if kind == "xi":
            model = make_independent(
                backbone_dims, seed=model_seed, pretrain_data_seed=model_seed + 10_000
            )
            result.models.append(model)
            result.rows.append({"index": index, "kind": "independent", "seed": model_seed})
            continue
        if specs is not None:
            base_spec = specs[index % len(specs)]
            spec = AttackSpec(
                kind=base_spec.kind,
                epochs=base_spec.epochs,
                lr=base_spec.lr,
                fraction=base_spec.fraction,
                student_hidden=base_spec.student_hidden,
                n_classes=base_spec.n_classes,
                seed=model_seed,
            )
        else:
            spec = _random_omega_spec(mix_rng, model_seed)
        model = apply_attack(bundle, spec)
        error = relative_embedding_error(model, bundle.watermarked_f, heldout_inputs)
        if error >= FUNCTIONALITY_LIMIT:
            logger.warning(
                "omega model %d (%s) excluded: relative embedding error %.3f",
                index,
                spec.kind,
                error,
            )
            result.excluded += 1
            continue
        result.models.append(model)
        result.rows.append(
            {
                "index": index,
                "kind": spec.kind,
                "seed": model_seed,
                "epochs": spec.epochs,
                "lr": spec.lr,
                "fraction": spec.fraction,
            }
        )
    return result
