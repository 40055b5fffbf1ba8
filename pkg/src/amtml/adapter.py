"""Per-instance teacher importance weights and soft-target fusion.

Each teacher t owns a latent factor theta_t; a shared vector nu scores the
interaction between theta_t and the student's pooled instance
representation delta_i::

    score[i, t] = sum_c nu[c] * theta_t[c] * delta_i[c]
    weight[i]   = softmax(score[i])
    target[i]   = sum_t weight[i, t] * soft_t[i]
"""
import csv
from dataclasses import dataclass, field
import io

import numpy as np

from amtml import nn
from amtml import tensor as tc
from amtml.errors import ShapeError, StateError
from amtml.tensor import Tensor


class AdapterParams:
    def __init__(self, thetas, nu, trainable=True):
        if not thetas:
            raise ShapeError("adapter needs at least one teacher factor")
        d = nu.shape[0]
        for t, th in enumerate(thetas):
            if th.shape != (d,):
                raise ShapeError(f"theta {t} has dims {th.dims}, expected [{d}]")
        self.thetas = list(thetas)
        self.nu = nu
        self.trainable = trainable

    @classmethod
    def init(cls, m, d, seed=0, identical=False, trainable=True):
        """theta_t ~ N(0, 0.1) i.i.d., nu = ones. ``identical`` draws a single
        theta shared (by value) across teachers."""
        rng = np.random.default_rng(seed)
        if identical:
            base = rng.normal(0.0, 0.1, size=d)
            thetas = [Tensor(base.copy(), requires_grad=True) for _ in range(m)]
        else:
            thetas = [Tensor(rng.normal(0.0, 0.1, size=d), requires_grad=True) for _ in range(m)]
        return cls(thetas, Tensor(np.ones(d), requires_grad=True), trainable=trainable)

    @property
    def m(self):
        return len(self.thetas)

    @property
    def d(self):
        return self.nu.shape[0]

    def parameters(self):
        return self.thetas + [self.nu]

    def named_tensors(self):
        out = {f"theta.{t}": th for t, th in enumerate(self.thetas)}
        out["nu"] = self.nu
        return out


@dataclass
class TeacherBundle:
    """Frozen teachers plus their held-out accuracies (used for group mapping)."""

    models: list
    val_accuracy: list = field(default_factory=list)

    def __post_init__(self):
        if not self.val_accuracy:
            self.val_accuracy = [0.0] * len(self.models)
        if len(self.val_accuracy) != len(self.models):
            raise ShapeError("one validation accuracy per teacher is required")
        for model in self.models:
            for p in model.parameters():
                p.requires_grad = False
                p.grad = None

    @property
    def m(self):
        return len(self.models)

    @property
    def num_classes(self):
        return self.models[0].num_classes

    def outputs(self, features, T, with_features=True, batch_size=512):
        """Soft-targets at temperature ``T`` (m x N x K) and, optionally, each
        teacher's feature maps (list of m arrays)."""
        soft, feats = [], []
        features = np.asarray(features)
        for model in self.models:
            logit_chunks, feat_chunks = [], []
            for s in range(0, len(features), batch_size):
                tr = nn.forward(model, features[s:s + batch_size].astype(np.float64))
                logit_chunks.append(tr.logits.data)
                if with_features:
                    feat_chunks.append(tr.feature_map.data)
            z = np.concatenate(logit_chunks) / T
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            soft.append(e / e.sum(axis=1, keepdims=True))
            if with_features:
                feats.append(np.concatenate(feat_chunks))
        return np.stack(soft), (feats if with_features else None)


def instance_repr(student_feature_map, detach=False):
    fm = student_feature_map
    if detach:
        fm = fm.detach()
    if fm.data.ndim == 4:
        return tc.batch_global_max_pool(fm)
    if fm.data.ndim == 2:
        return fm
    raise ShapeError(f"instance_repr expects batch x C x H x W or batch x C, got {fm.dims}")


def teacher_scores(params, delta):
    if delta.data.ndim != 2 or delta.shape[1] != params.d:
        raise ShapeError(f"adapter dimension {params.d} does not match instance representation {delta.dims}")
    cols = []
    for theta in params.thetas:
        proj = tc.reshape(tc.mul(theta, params.nu), (params.d, 1))
        cols.append(tc.reshape(tc.matmul(delta, proj), (delta.shape[0],)))
    return tc.stack_columns(cols)


def teacher_weights(scores):
    return tc.softmax_t(scores, 1.0)


def integrate_soft_targets(weights, teacher_soft):
    sources = teacher_soft if isinstance(teacher_soft, Tensor) else Tensor(teacher_soft)
    return tc.mix(weights, sources)


def adaptive_targets(params, student_feature_map, teacher_soft, detach=False):
    """Full fusion path; returns ``(integrated_targets, weights)``."""
    delta = instance_repr(student_feature_map, detach=detach)
    w = teacher_weights(teacher_scores(params, delta))
    return integrate_soft_targets(w, teacher_soft), w


def inspect_weights(params, student, features, labels, n_teachers=None, batch_size=512):
    """Per-example teacher weights in dataset order.

    Returns a list of ``(example_id, label, [w_1..w_m])``.
    """
    if n_teachers is not None and n_teachers != params.m:
        raise StateError(f"adapter has {params.m} teacher factors but {n_teachers} teachers were given")
    if tuple(student.feature_shape[:1]) != (params.d,):
        raise StateError(f"adapter dimension {params.d} does not match student feature channels {student.feature_shape[0]}")
    rows = []
    features = np.asarray(features)
    labels = np.asarray(labels)
    saved = [(p, p.requires_grad) for p in student.parameters() + params.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        for s in range(0, len(features), batch_size):
            fm = nn.forward(student, features[s:s + batch_size].astype(np.float64)).feature_map
            w = teacher_weights(teacher_scores(params, instance_repr(fm))).data
            for r, row in enumerate(w):
                rows.append((s + r, int(labels[s + r]), [float(x) for x in row]))
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    return rows


def weights_csv(rows, m):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["example_id", "label"] + [f"w_{t + 1}" for t in range(m)])
    for example_id, label, w in rows:
        writer.writerow([example_id, label] + [f"{x:.6f}" for x in w])
    return buf.getvalue()


def weight_summary(rows):
    """Mean weight per teacher for each class: ``{label: [mean_w_1..]}``."""
    by_class = {}
    for _, label, w in rows:
        by_class.setdefault(label, []).append(w)
    return {k: list(np.mean(v, axis=0)) for k, v in sorted(by_class.items())}
