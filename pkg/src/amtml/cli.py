"""Command-line entry point: ``amtml <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, keys
named like the long flags without dashes, e.g. ``student-arch=...``);
explicit flags win over the file. The fully resolved configuration is echoed
as ``# key=value`` lines before the run.

Exit codes: 0 success, 2 usage/validation error, 3 numeric failure.
"""
import argparse
import logging
import sys

import numpy as np

from amtml import adapter as ad
from amtml import data, experiments, formats, trainer
from amtml.errors import AmtmlError, NumericError

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _int_list(text):
    text = str(text).strip()
    if text in ("", "scaled"):
        return text
    return [int(x) for x in text.replace(";", ",").split(",") if x.strip()]


# name -> (type, default, help); defaults live here so --config can sit
# between them and explicit flags
_SHARED = {
    "seed": (int, 0, "random seed"),
    "out": (str, None, "output path"),
}
_OPTIONS = {
    "gen-data": {
        "kind": (str, "blobs", "blobs | images"),
        "classes": (int, 4, "number of classes K (>= 2)"),
        "per-class": (int, 500, "examples per class"),
        "dim": (int, 16, "feature dimension (blobs)"),
        "separation": (float, 1.5, "minimum distance between blob centers"),
        "noise": (float, 1.0, "noise standard deviation"),
        "channels": (int, 3, "image channels"),
        "height": (int, 8, "image height"),
        "width": (int, 8, "image width"),
        "test-count": (int, 0, "hold out this many examples into --test-out"),
        "test-out": (str, None, "path for the held-out split"),
    },
    "train-teacher": {
        "data": (str, None, "training dataset (AKDD)"),
        "arch": (str, "dense:16:64,relu,dense:64:16,relu,dense:16:4", "architecture descriptor"),
        "epochs": (int, 30, "training epochs"),
        "batch": (int, 128, "mini-batch size"),
        "lr": (float, 0.05, "base learning rate"),
        "momentum": (float, 0.9, "SGD momentum"),
        "expert-classes": (str, "", "comma-separated classes kept clean; others get noised labels"),
        "label-noise": (float, 1.0, "fraction of non-expert labels replaced at random"),
    },
    "distill": {
        "method": (str, "amtml", "indep | okd | fitnet | avgmkd | amtml"),
        "teachers": (str, "", "comma-separated teacher checkpoints"),
        "student-arch": (str, "dense:16:32,relu,dense:32:32,relu,dense:32:4", "student descriptor, or stu1 | stu2 | stu3"),
        "data": (str, None, "training dataset (AKDD)"),
        "test-data": (str, None, "optional test dataset"),
        "temp": (float, 5.0, "softmax temperature T"),
        "lambda": (float, 0.7, "KL weight"),
        "alpha": (float, 1.0, "angle loss weight"),
        "beta": (float, 2.0, "hint loss weight"),
        "batch": (int, 128, "mini-batch size"),
        "epochs": (int, 60, "training epochs"),
        "lr": (float, 0.01, "base learning rate"),
        "momentum": (float, 0.9, "SGD momentum"),
        "decay-epochs": (_int_list, "scaled", "comma-separated decay epochs, or 'scaled'"),
        "decay-factor": (float, 0.1, "learning-rate decay factor"),
        "mapping": (str, "best_to_high", "best_to_high | best_to_low | random"),
        "triplet-budget": (int, 256, "triplets sampled per batch"),
        "detach-delta": (_bool, False, "stop adapter gradients from reaching the student body"),
        "strict-kl": (_bool, False, "drop the T^2 factor on the KL term"),
        "hint-norm": (_bool, True, "rescale each teacher's hint target to unit RMS"),
        "report": (str, None, "report path (default: OUT.report.csv)"),
        "adapter-out": (str, None, "adapter checkpoint path (default: OUT.adapter.akdc)"),
    },
    "eval": {
        "model": (str, None, "model checkpoint"),
        "data": (str, None, "dataset (AKDD)"),
    },
    "inspect-weights": {
        "adapter": (str, None, "adapter checkpoint"),
        "student": (str, None, "student checkpoint"),
        "teachers": (str, "", "comma-separated teacher checkpoints"),
        "data": (str, None, "dataset (AKDD)"),
        "summary": (_bool, False, "print mean weight per teacher for each class"),
    },
}
_FLAGS = {"detach-delta", "strict-kl", "summary"}


def build_parser():
    parser = _Parser(prog="amtml", description="Adaptive multi-teacher knowledge distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, options in _OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags take precedence")
        for key, (typ, _default, help_text) in {**_SHARED, **options}.items():
            if key in _FLAGS:
                p.add_argument(f"--{key}", nargs="?", const=True, type=typ, default=argparse.SUPPRESS, help=help_text)
            else:
                p.add_argument(f"--{key}", type=typ, default=argparse.SUPPRESS, help=help_text)
    return parser


def read_config_file(path, command):
    options = {**_SHARED, **_OPTIONS[command]}
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("_", "-")
            if key not in options:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
            try:
                out[key] = options[key][0](value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve(args):
    command = args.command
    options = {**_SHARED, **_OPTIONS[command]}
    resolved = {k: v[1] for k, v in options.items()}
    if args.config:
        resolved.update(read_config_file(args.config, command))
    for key in options:
        dest = key.replace("-", "_")
        if hasattr(args, dest):
            resolved[key] = getattr(args, dest)
    return resolved


def echo(cfg):
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        print(f"# {k}={v}")


def _need(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k} is required")


def _teacher_paths(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


def _load_bundle(paths):
    models, accs = [], []
    for p in paths:
        model, acc = formats.load_model(p)
        models.append(model)
        accs.append(0.0 if acc is None else acc)
    return ad.TeacherBundle(models, accs)


def cmd_gen_data(cfg):
    _need(cfg, "out")
    if cfg["classes"] < 2:
        raise UsageError("--classes must be at least 2")
    if cfg["per-class"] < 1:
        raise UsageError("--per-class must be at least 1")
    if cfg["kind"] == "blobs":
        ds = data.gen_blobs(cfg["classes"], cfg["per-class"], cfg["dim"], cfg["separation"], cfg["noise"], cfg["seed"])
    elif cfg["kind"] == "images":
        ds = data.gen_tiny_images(cfg["classes"], cfg["per-class"], cfg["channels"], cfg["height"], cfg["width"],
                                  cfg["seed"], noise=cfg["noise"])
    else:
        raise UsageError(f"unknown --kind {cfg['kind']!r}")
    if cfg["test-count"]:
        if not cfg["test-out"]:
            raise UsageError("--test-count needs --test-out")
        ds, test = data.split(ds, cfg["test-count"], cfg["seed"])
        formats.write_dataset(cfg["test-out"], test)
        print(f"test: N={len(test)} K={test.num_classes} shape={list(test.shape)} -> {cfg['test-out']}")
    formats.write_dataset(cfg["out"], ds)
    print(f"N={len(ds)} K={ds.num_classes} shape={list(ds.shape)} -> {cfg['out']}")
    return 0


def cmd_train_teacher(cfg):
    _need(cfg, "data", "out")
    ds = formats.read_dataset(cfg["data"])
    train = ds
    if cfg["expert-classes"]:
        keep = [int(c) for c in cfg["expert-classes"].split(",")]
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(1)[0])
        train = ds.with_labels(data.noisy_labels(ds, keep, cfg["label-noise"], rng))
    model, val_acc = trainer.train_teacher(cfg["arch"], train, cfg["epochs"], cfg["seed"], batch_size=cfg["batch"],
                                           lr=cfg["lr"], momentum=cfg["momentum"], clean_labels=ds.labels)
    formats.save_model(cfg["out"], model, val_accuracy=val_acc)
    saved, _ = formats.load_model(cfg["out"])
    print(f"val_accuracy={val_acc:.4f}")
    print(f"train_accuracy={trainer.evaluate(saved, ds):.4f}")
    return 0


def cmd_distill(cfg):
    _need(cfg, "data", "out")
    method = cfg["method"]
    paths = _teacher_paths(cfg["teachers"])
    if method in ("amtml", "avgmkd") and len(paths) < 2:
        raise UsageError(f"{method} needs at least two --teachers, got {len(paths)}")
    if method in ("okd", "fitnet") and len(paths) != 1:
        raise UsageError(f"{method} needs exactly one teacher, got {len(paths)}")
    train = formats.read_dataset(cfg["data"])
    test = formats.read_dataset(cfg["test-data"]) if cfg["test-data"] else None
    bundle = _load_bundle(paths) if paths else None
    decay = cfg["decay-epochs"]
    if decay in ("scaled", ""):
        decay = trainer.scaled_schedule(cfg["epochs"])
    config = trainer.DistillConfig(
        method=method, T=cfg["temp"], lam=cfg["lambda"], alpha=cfg["alpha"], beta=cfg["beta"],
        batch_size=cfg["batch"], epochs=cfg["epochs"], mapping_strategy=cfg["mapping"],
        triplet_budget=cfg["triplet-budget"], seed=cfg["seed"], detach_delta=cfg["detach-delta"],
        lr=cfg["lr"], decay_epochs=decay, decay_factor=cfg["decay-factor"], momentum=cfg["momentum"],
        t_squared=not cfg["strict-kl"], hint_rms_normalize=cfg["hint-norm"],
    )
    arch = experiments.STUDENTS.get(cfg["student-arch"], cfg["student-arch"])
    result = trainer.distill(config, bundle, arch, train, test)
    formats.save_model(cfg["out"], result.student)
    report_path = cfg["report"] or cfg["out"] + ".report.csv"
    with open(report_path, "w") as fh:
        fh.write(result.report.to_text())
    if result.adapter is not None:
        formats.save_adapter(cfg["adapter-out"] or cfg["out"] + ".adapter.akdc", result.adapter)
    last = result.report.epochs[-1] if result.report.epochs else None
    if last is not None:
        t = last.terms
        print(f"final: ce={t.ce:.6f} kd_kl={t.kd_kl:.6f} angle={t.angle:.6f} hint={t.hint:.6f} total={t.total:.6f}")
    if test is not None:
        print(f"test_accuracy={result.report.final_test_acc:.4f}")
    print(f"seconds={result.report.seconds:.2f}")
    return 0


def cmd_eval(cfg):
    _need(cfg, "model", "data")
    model, _ = formats.load_model(cfg["model"])
    ds = formats.read_dataset(cfg["data"])
    if model.num_classes != ds.num_classes:
        raise UsageError(f"model has {model.num_classes} classes, dataset has {ds.num_classes}")
    print(f"{trainer.evaluate(model, ds):.4f}")
    return 0


def cmd_inspect_weights(cfg):
    _need(cfg, "adapter", "student", "data")
    params = formats.load_adapter(cfg["adapter"])
    student, _ = formats.load_model(cfg["student"])
    ds = formats.read_dataset(cfg["data"])
    paths = _teacher_paths(cfg["teachers"])
    rows = ad.inspect_weights(params, student, ds.features, ds.labels, n_teachers=len(paths) if paths else None)
    text = ad.weights_csv(rows, params.m)
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if cfg["summary"]:
        for label, means in ad.weight_summary(rows).items():
            print(f"class {label}: " + " ".join(f"w_{t + 1}={w:.4f}" for t, w in enumerate(means)))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "inspect-weights": cmd_inspect_weights,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        if not (args.command == "inspect-weights" and not cfg["out"]):
            echo(cfg)
        return _COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, AmtmlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
