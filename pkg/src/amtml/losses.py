"""Distillation losses: hard-label CE, temperature KL, triplet angle loss,
multi-group hint regression, and their weighted combination."""
from dataclasses import dataclass
import math

import numpy as np

from amtml import nn
from amtml import tensor as tc
from amtml.errors import DataError, NumericError, ShapeError
from amtml.tensor import Tensor

ANGLE_EPS = 1e-8


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    return tc.neg(tc.mean(tc.pick(tc.log_softmax_t(logits, 1.0), labels)))


def kd_kl(target_probs, student_logits, T, t_squared=True):
    """Batch-mean KL(target || softmax(student / T)), times T**2 by default.

    ``target_probs`` stays in the graph: when it carries gradient (the
    adapter path) that gradient is propagated.
    """
    rows = target_probs.data.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-6):
        raise DataError("target rows must each sum to 1")
    if target_probs.shape != student_logits.shape:
        raise ShapeError(f"kd_kl: target {target_probs.dims} vs student {student_logits.dims}")
    log_q = tc.log_softmax_t(student_logits, T)
    log_p = tc.log(target_probs)
    per_row = tc.sum_rows(tc.mul(target_probs, tc.sub(log_p, log_q)))
    loss = tc.mean(per_row)
    return tc.scale(loss, T * T) if t_squared else loss


def angle_metric(a, b, c, eps=ANGLE_EPS):
    """Cosine of the angle at ``b`` formed by points ``a`` and ``c``.

    Returns ``None`` when either arm is shorter than ``eps``; callers skip
    such triplets.
    """
    u, v = tc.sub(a, b), tc.sub(c, b)
    if np.linalg.norm(u.data) <= eps or np.linalg.norm(v.data) <= eps:
        return None
    return tc.dot(tc.normalize(u), tc.normalize(v))


def huber(x, y):
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        return tc.huber(tc.as_tensor(x), tc.as_tensor(y))
    d = abs(x - y)
    return 0.5 * d * d if d <= 1.0 else d - 0.5


def angle_loss(teacher_targets, student_soft, triplets, eps=ANGLE_EPS):
    """Mean Huber mismatch of triplet angles between teacher and student rows."""
    return tc.angle_huber_mean(teacher_targets, student_soft, triplets, eps)


def hint_loss(teacher_features, student_group_outputs, regressors, mapping, half=False):
    """Sum over teachers of ||u_t - F_t(v_f(t))||^2, averaged over the batch.

    ``mapping[t]`` is the student group guided by teacher ``t``. Teacher
    features are treated as constants. ``half=True`` gives the single-teacher
    FitNet convention with a 1/2 factor.
    """
    if len(teacher_features) != len(regressors) or len(mapping) != len(regressors):
        raise ShapeError("hint_loss needs one regressor and one mapping entry per teacher")
    total = None
    for t, (u, reg) in enumerate(zip(teacher_features, regressors)):
        target = u.detach() if isinstance(u, Tensor) else Tensor(u)
        v = student_group_outputs[mapping[t]]
        pred = reg(v)
        if pred.shape != target.shape:
            raise ShapeError(f"teacher {t}: regressed dims {pred.dims} do not match teacher feature dims {target.dims}")
        diff = tc.sub(pred, target)
        term = tc.scale(tc.sum(tc.mul(diff, diff)), 1.0 / target.shape[0])
        total = term if total is None else tc.add(total, term)
    if total is None:
        return Tensor(0.0)
    return tc.scale(total, 0.5) if half else total


class Regressor:
    """Single-layer map from a student group output to a teacher feature.

    Equal spatial size on both sides gives a 3x3 conv; anything else is
    flattened and mapped with a dense layer, then reshaped to the teacher
    feature shape.
    """

    def __init__(self, student_shape, teacher_shape, seed=0, zero=False):
        self.in_shape = tuple(student_shape)
        self.out_shape = tuple(teacher_shape)
        if len(self.in_shape) == 3 and len(self.out_shape) == 3 and self.in_shape[1:] == self.out_shape[1:]:
            self.layers = [nn.LayerSpec("conv2d", self.in_shape[0], self.out_shape[0])]
        else:
            self.layers = [nn.LayerSpec("dense", math.prod(self.in_shape), math.prod(self.out_shape))]
            if len(self.in_shape) != 1:
                self.layers.insert(0, nn.LayerSpec("flatten"))
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, layer in enumerate(self.layers):
            self.params.update(nn.init_layer_params(i, layer, rng))
        if zero:
            for p in self.params.values():
                p.data[...] = 0.0

    def parameters(self):
        return list(self.params.values())

    def __call__(self, v):
        x = v
        for i in range(len(self.layers)):
            x = nn.apply_layer(self, i, x)
        want = (x.shape[0],) + self.out_shape
        return x if x.shape == want else tc.reshape(x, want)


@dataclass
class LossTerms:
    ce: float
    kd_kl: float
    angle: float
    hint: float
    total: float
    lam: float
    alpha: float
    beta: float

    def as_row(self):
        return [self.ce, self.kd_kl, self.angle, self.hint, self.total]


def total_loss(ce, kd, angle, hint, lam, alpha, beta):
    """(ce + lam*kd) + alpha*angle + beta*hint, on tensors.

    Returns ``(total_tensor, LossTerms)``. Zero-weighted terms may be None.
    """
    parts = {"ce": ce, "kd_kl": kd, "angle": angle, "hint": hint}
    values = {}
    for name, t in parts.items():
        v = 0.0 if t is None else float(t.data) if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} loss component: {v}", component=name)
        values[name] = v
    total = ce
    for t, w in ((kd, lam), (angle, alpha), (hint, beta)):
        if t is not None and w != 0.0 and isinstance(t, Tensor):
            total = tc.add(total, tc.scale(t, w))
    terms = LossTerms(
        ce=values["ce"],
        kd_kl=values["kd_kl"],
        angle=values["angle"],
        hint=values["hint"],
        total=float(total.data),
        lam=lam,
        alpha=alpha,
        beta=beta,
    )
    return total, terms
