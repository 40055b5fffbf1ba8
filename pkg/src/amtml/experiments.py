"""The expert-teacher synthetic task used for the directional checks.

Four Gaussian-blob classes, two teachers that are each reliable on half of
them, and a student narrower than either teacher. Sizes and learning rates
are tuned so a run finishes in seconds on one CPU core.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from amtml import adapter as ad
from amtml import data, trainer

TEACHER_ARCH = "dense:16:64,relu,dense:64:16,relu,dense:16:4"
STUDENT_ARCH = "dense:16:32,relu,dense:32:32,relu,dense:32:4"

# Three small students for 16-dim, 4-class inputs. Each body has at least four
# layers so it can be split into up to four hint groups.
STUDENTS = {
    "stu1": STUDENT_ARCH,
    "stu2": "dense:16:24,relu,dense:24:24,relu,dense:24:24,relu,dense:24:4",
    "stu3": "dense:16:48,relu,dense:48:16,relu,dense:16:4",
}


@dataclass
class ExpertTask:
    classes: int = 4
    per_class: int = 600
    n_test: int = 400
    dim: int = 16
    separation: float = 1.5
    noise: float = 1.0
    subsets: list = field(default_factory=lambda: [[0, 1], [2, 3]])
    teacher_arch: str = TEACHER_ARCH
    teacher_epochs: int = 30
    teacher_lr: float = 0.05
    student_arch: str = STUDENT_ARCH
    epochs: int = 60
    lr: float = 0.01

    def make(self, seed):
        """Returns ``(train, test, teachers)`` for one seed."""
        full = data.gen_blobs(self.classes, self.per_class, self.dim, self.separation, self.noise, seed)
        train, test = data.split(full, self.n_test, seed)
        teachers = data.make_expert_teachers(data.ExpertSplitSpec(self.subsets), train, self.teacher_arch, seed,
                                             epochs=self.teacher_epochs, lr=self.teacher_lr)
        return train, test, teachers

    def config(self, method, seed, **overrides):
        cfg = trainer.DistillConfig(method=method, epochs=self.epochs, lr=self.lr,
                                    decay_epochs=trainer.scaled_schedule(self.epochs), seed=seed)
        return replace(cfg, **overrides)


def expert_weight(task, params, student, ds):
    """Mean adapter weight that each class's expert receives, averaged over
    classes."""
    summary = ad.weight_summary(ad.inspect_weights(params, student, ds.features, ds.labels))
    owner = {c: t for t, s in enumerate(task.subsets) for c in s}
    return float(np.mean([summary[c][owner[c]] for c in summary]))


def run_seed(task, seed, methods=("okd", "avgmkd", "amtml")):
    """Train teachers once, then every requested method. Single-teacher OKD
    runs once per teacher, keyed ``okd_<t>``."""
    train, test, teachers = task.make(seed)
    out = {"teacher_val": list(teachers.val_accuracy)}
    for method in methods:
        if method in ("okd", "fitnet"):
            for t in range(teachers.m):
                single = ad.TeacherBundle([teachers.models[t]], [teachers.val_accuracy[t]])
                res = trainer.distill(task.config(method, seed), single, task.student_arch, train, test,
                                      eval_each_epoch=False)
                out[f"{method}_{t}"] = res.report.final_test_acc
            continue
        bundle = None if method == "indep" else teachers
        res = trainer.distill(task.config(method, seed), bundle, task.student_arch, train, test,
                              eval_each_epoch=False)
        out[method] = res.report.final_test_acc
        if method == "amtml":
            out["expert_weight"] = expert_weight(task, res.adapter, res.student, test)
    return out


ABLATIONS = {
    "full": {},
    "alpha=0": {"alpha": 0.0},
    "beta=0": {"beta": 0.0},
    "alpha=beta=0": {"alpha": 0.0, "beta": 0.0},
}


def run_ablation(task, seed, epochs=None):
    """The four loss-term ablations on one shared set of teachers; returns
    ``{name: DistillResult}``."""
    train, test, teachers = task.make(seed)
    out = {}
    for name, overrides in ABLATIONS.items():
        extra = dict(overrides)
        if epochs is not None:
            extra.update(epochs=epochs, decay_epochs=trainer.scaled_schedule(epochs))
        out[name] = trainer.distill(task.config("amtml", seed, **extra), teachers, task.student_arch, train, test)
    return out
