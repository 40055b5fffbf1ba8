"""Teacher training, group mapping, triplet sampling and the distillation loop.

Methods:

``indep``   student trained on hard labels only
``okd``     one teacher, CE + lam * KL
``fitnet``  one teacher, CE + beta * (1/2)||u - F(v)||^2 (single stage)
``avgmkd``  m teachers fused with uniform weights, plus angle and hint terms
``amtml``   m teachers fused with learned per-instance weights, plus angle and hint terms
"""
from dataclasses import asdict, dataclass, field
import logging
import math
import time

import numpy as np

from amtml import adapter as ad
from amtml import losses, nn
from amtml import tensor as tc
from amtml.errors import ConfigError, NumericError, ShapeError
from amtml.tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("indep", "okd", "fitnet", "avgmkd", "amtml")
MAPPINGS = ("best_to_high", "best_to_low", "random")
REPORT_COLUMNS = ("epoch", "ce", "kd_kl", "angle", "hint", "total", "train_acc", "test_acc")


def scaled_schedule(epochs):
    """Decay points at the same relative positions as 100/150 of 200 epochs."""
    points = sorted({int(epochs * 0.5), int(epochs * 0.75)} - {0})
    return tuple(points)


@dataclass
class DistillConfig:
    method: str = "amtml"
    T: float = 5.0
    lam: float = 0.7
    alpha: float = 1.0
    beta: float = 2.0
    batch_size: int = 128
    epochs: int = 200
    mapping_strategy: str = "best_to_high"
    triplet_budget: int = 256
    seed: int = 0
    detach_delta: bool = False
    lr: float = 0.1
    decay_epochs: tuple = (100, 150)
    decay_factor: float = 0.1
    momentum: float = 0.9
    t_squared: bool = True
    adapter_trainable: bool = True
    identical_theta: bool = False
    cache_teacher_outputs: bool = False
    hint_rms_normalize: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.mapping_strategy not in MAPPINGS:
            raise ConfigError(f"unknown mapping strategy {self.mapping_strategy!r}")
        if not self.T > 0:
            raise ConfigError(f"temperature must be positive, got {self.T}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.effective_weights()[1] > 0 and self.batch_size < 3:
            raise ConfigError("angle loss needs batch_size >= 3")
        if self.triplet_budget < 0:
            raise ConfigError("triplet_budget must be non-negative")

    def effective_weights(self):
        """(lam, alpha, beta) after method-specific zeroing."""
        if self.method == "indep":
            return 0.0, 0.0, 0.0
        if self.method == "okd":
            return self.lam, 0.0, 0.0
        if self.method == "fitnet":
            return 0.0, 0.0, self.beta
        return self.lam, self.alpha, self.beta

    def as_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class EpochRecord:
    epoch: int
    terms: losses.LossTerms
    train_acc: float
    test_acc: float


@dataclass
class RunReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    final_test_acc: float = float("nan")
    seconds: float = 0.0
    mapping: list = field(default_factory=list)

    def to_text(self):
        """Line-delimited records plus a summary line. Wall-clock time is
        deliberately left out so reruns hash identically."""
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.epochs:
            vals = [r.epoch] + r.terms.as_row() + [r.train_acc, r.test_acc]
            lines.append(",".join([str(vals[0])] + [repr(float(v)) for v in vals[1:]]))
        summary = [f"final_test_acc={self.final_test_acc!r}", f"seed={self.seed}"]
        summary += [f"{k}={_fmt(v)}" for k, v in self.config.items()]
        lines.append("summary," + ",".join(summary))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


@dataclass
class DistillResult:
    student: nn.Model
    adapter: object
    regressors: list
    mapping: list
    report: RunReport


def assign_groups(val_accuracy, n_groups, strategy, rng=None):
    """Bijective teacher -> student-group mapping; ``mapping[t]`` is a group."""
    m = len(val_accuracy)
    if n_groups != m:
        raise ConfigError(f"student has {n_groups} groups but there are {m} teachers")
    if strategy not in MAPPINGS:
        raise ConfigError(f"unknown mapping strategy {strategy!r}")
    ascending = sorted(range(m), key=lambda t: (val_accuracy[t], t))
    if strategy == "best_to_high":
        order = ascending
    elif strategy == "best_to_low":
        order = ascending[::-1]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        order = [int(t) for t in rng.permutation(m)]
    mapping = [0] * m
    for group, t in enumerate(order):
        mapping[t] = group
    return mapping


def sample_triplets(batch_size, budget, rng):
    """Ordered triplets of distinct in-batch indices: all of them if they fit
    in ``budget``, else a uniform sample without replacement."""
    b = int(batch_size)
    if b < 3 or budget <= 0:
        return []
    total = b * (b - 1) * (b - 2)
    if total <= budget:
        return [(i, j, k) for i in range(b) for j in range(b) for k in range(b) if len({i, j, k}) == 3]
    codes = rng.choice(total, size=int(budget), replace=False)
    out = []
    per_i = (b - 1) * (b - 2)
    for code in codes:
        i, rem = divmod(int(code), per_i)
        j, k = divmod(rem, b - 2)
        if j >= i:
            j += 1
        lo, hi = min(i, j), max(i, j)
        if k >= lo:
            k += 1
        if k >= hi:
            k += 1
        out.append((i, j, k))
    return out


def evaluate(model, dataset):
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        return float("nan")
    if model.num_classes != dataset.num_classes:
        raise ShapeError(f"model emits {model.num_classes} classes, dataset has {dataset.num_classes}")
    logits = nn.predict_logits(model, dataset.features)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def _rms(a):
    r = float(np.sqrt(np.mean(np.square(a))))
    return r if r > 0 else 1.0


def _child_seeds(seed, n):
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def train_teacher(arch, dataset, epochs, seed, batch_size=128, lr=0.1, momentum=0.9,
                  decay_epochs=None, clean_labels=None):
    """Cross-entropy training on a 90% split; returns (model, held-out accuracy).

    ``clean_labels`` (full-dataset labels) are used for the held-out score
    when the training labels were deliberately noised.
    """
    init_seed, split_seed, shuffle_seed = _child_seeds(seed, 3)
    model = nn.build_model(arch, dataset.shape, dataset.num_classes, seed=init_seed)
    scored = dataset if clean_labels is None else dataset.with_labels(clean_labels)
    perm_train, perm_val = _split_indices(len(dataset), split_seed)
    train = dataset.subset(perm_train)
    val = scored.subset(perm_val)
    state = nn.SgdState(lr, decay_epochs if decay_epochs is not None else scaled_schedule(epochs), 0.1, momentum)
    rng = np.random.default_rng(shuffle_seed)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            trace = nn.forward(model, train.features[idx].astype(np.float64))
            loss = losses.cross_entropy(trace.logits, train.labels[idx])
            if not math.isfinite(float(loss.data)):
                raise NumericError(f"non-finite teacher loss at epoch {epoch}, batch {s // batch_size}",
                                   epoch=epoch, batch=s // batch_size, component="ce")
            tc.backward(loss)
            try:
                nn.sgd_step(model, None, (), state, epoch)
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {s // batch_size})", epoch=epoch,
                                   batch=s // batch_size, component=exc.component) from exc
    return model, evaluate(model, val)


def _split_indices(n, seed, fraction=0.1):
    n_val = max(1, int(round(n * fraction)))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _active_terms(config):
    """(use_kd, use_hint, use_angle) for a config after method zeroing."""
    _, alpha, beta = config.effective_weights()
    method = config.method
    return (
        method in ("okd", "avgmkd", "amtml"),
        beta != 0.0 and method in ("fitnet", "avgmkd", "amtml"),
        alpha != 0.0 and method in ("avgmkd", "amtml"),
    )


def batch_loss(config, student, x, y, soft=None, feats=None, adapter=None, regressors=(), mapping=(),
               triplets=()):
    """Objective for one mini-batch; returns ``(total_tensor, LossTerms)``.

    ``soft`` is the teachers' temperature-softened output for the batch
    (m x batch x K) and ``feats`` their hint targets, one array per teacher.
    """
    method = config.method
    lam, alpha, beta = config.effective_weights()
    use_kd, use_hint, use_angle = _active_terms(config)
    trace = nn.forward(student, x)
    ce = losses.cross_entropy(trace.logits, y)
    kd = angle = hint = None
    if use_kd or use_angle:
        if method == "amtml":
            target, _ = ad.adaptive_targets(adapter, trace.feature_map, soft, detach=config.detach_delta)
        elif method == "avgmkd":
            target = Tensor(soft.mean(axis=0))
        else:
            target = Tensor(soft[0])
        if use_kd:
            kd = losses.kd_kl(target, trace.logits, config.T, t_squared=config.t_squared)
        if use_angle:
            angle = losses.angle_loss(target, tc.softmax_t(trace.logits, config.T), triplets)
    if use_hint:
        hint = losses.hint_loss(feats, trace.group_outputs, regressors, mapping, half=(method == "fitnet"))
    return losses.total_loss(ce, kd, angle, hint, lam, alpha, beta)


def distill(config, teachers, student_arch, train, test=None, eval_each_epoch=True):
    """Train a student under ``config.method``; see the module docstring."""
    config.validate()
    method = config.method
    m = 0 if teachers is None else teachers.m
    if method in ("okd", "fitnet") and m != 1:
        raise ConfigError(f"{method} needs exactly one teacher, got {m}")
    if method == "avgmkd" and m < 2:
        raise ConfigError(f"avgmkd needs at least two teachers, got {m}")
    if method == "amtml" and m < 1:
        raise ConfigError("amtml needs at least one teacher")
    if m and teachers.num_classes != train.num_classes:
        raise ConfigError(f"teachers emit {teachers.num_classes} classes, data has {train.num_classes}")

    lam, alpha, beta = config.effective_weights()
    _, use_hint, use_angle = _active_terms(config)

    s_init, s_shuffle, s_trip, s_adapter, s_reg, s_map = _child_seeds(config.seed, 6)
    student = nn.build_model(student_arch, train.shape, train.num_classes, seed=s_init)
    mapping, regressors = [], []
    if use_hint:
        student.set_groups(m)
        mapping = assign_groups(teachers.val_accuracy, student.n_groups, config.mapping_strategy,
                                np.random.default_rng(s_map))
        shapes = student.group_shapes()
        reg_seeds = _child_seeds(s_reg, m)
        regressors = [
            losses.Regressor(shapes[mapping[t]], teachers.models[t].feature_shape, seed=reg_seeds[t])
            for t in range(m)
        ]
    adapter = None
    if method == "amtml":
        adapter = ad.AdapterParams.init(m, student.feature_shape[0], seed=s_adapter,
                                        identical=config.identical_theta, trainable=config.adapter_trainable)
        if not config.adapter_trainable:
            for p in adapter.parameters():
                p.requires_grad = False

    state = nn.SgdState(config.lr, config.decay_epochs, config.decay_factor, config.momentum)
    shuffle_rng = np.random.default_rng(s_shuffle)
    trip_rng = np.random.default_rng(s_trip)
    report = RunReport(config=config.as_dict(), seed=config.seed, mapping=list(mapping))
    started = time.perf_counter()
    cached = None

    for epoch in range(config.epochs):
        if m and (cached is None or not config.cache_teacher_outputs):
            cached = teachers.outputs(train.features, config.T, with_features=use_hint)
        soft_all, feats_all = cached if m else (None, None)
        if use_hint and config.hint_rms_normalize:
            feats_all = [f / _rms(f) for f in feats_all]
        order = shuffle_rng.permutation(len(train))
        rows = []
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            triplets = sample_triplets(len(idx), config.triplet_budget, trip_rng) if use_angle else ()
            try:
                total, terms = batch_loss(
                    config, student, train.features[idx].astype(np.float64), train.labels[idx],
                    soft=soft_all[:, idx, :] if m else None,
                    feats=[f[idx] for f in feats_all] if use_hint else None,
                    adapter=adapter, regressors=regressors, mapping=mapping, triplets=triplets,
                )
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {b})", epoch=epoch, batch=b,
                                   component=exc.component) from exc
            if not math.isfinite(terms.total):
                raise NumericError(f"non-finite total loss (epoch {epoch}, batch {b})", epoch=epoch, batch=b,
                                   component="total")
            tc.backward(total)
            try:
                nn.sgd_step(student, adapter if method == "amtml" and config.adapter_trainable else None,
                            regressors, state, epoch)
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {b})", epoch=epoch, batch=b,
                                   component=exc.component) from exc
            rows.append(terms)
            report.batches.append((epoch, b, terms))
        mean_terms = losses.LossTerms(
            *[float(np.mean([getattr(r, f) for r in rows])) for f in ("ce", "kd_kl", "angle", "hint", "total")],
            lam=lam, alpha=alpha, beta=beta,
        )
        train_acc = evaluate(student, train) if eval_each_epoch else float("nan")
        test_acc = evaluate(student, test) if (test is not None and eval_each_epoch) else float("nan")
        report.epochs.append(EpochRecord(epoch, mean_terms, train_acc, test_acc))
        logger.info("epoch %d total %.5f train %.4f test %.4f", epoch, mean_terms.total, train_acc, test_acc)

    report.final_test_acc = evaluate(student, test) if test is not None else float("nan")
    report.seconds = time.perf_counter() - started
    return DistillResult(student, adapter, regressors, mapping, report)
