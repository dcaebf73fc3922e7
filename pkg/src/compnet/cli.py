"""Command-line toolchain: train / detect / paramcount / eval / bench.

Configuration is a flat key=value text file plus `--key value` overrides on
the command line. All randomness flows from the single `seed` key through
named substreams. Exit codes: 0 success, 2 configuration error, 3 training
divergence, 4 AUC undefined (single-class test set).
"""

import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import seeds
from .anomaly import (
    DEFAULT_ANGLES,
    DetectorConfig,
    detect,
    write_scores_csv,
)
from .datasets import (
    POINTS_PER_CLOUD,
    generate_shape,
    load_directory,
    make_synthetic_dataset,
)
from .layers import (
    AggrCompositeLayer,
    BaselinePointConvLayer,
    ConvCompositeLayer,
)
from .metrics import average_accuracy, detection_table, overall_accuracy, roc_auc
from .network import (
    LAYER_KINDS,
    build_classification_net,
    classification_spec,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_AUC_UNDEFINED = 4

M_SWEEP = (8, 16, 32, 64, 128, 256)


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_str_list(text):
    return tuple(part.strip() for part in str(text).split(",") if part.strip())


def _parse_float_list(text):
    return tuple(float(part) for part in str(text).split(",") if part.strip())


def _positive(kind, name):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
        return value
    return parse


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise ConfigError(f"expected a non-negative integer, got {value}")
    return value


def _choice(options):
    def parse(text):
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text
    return parse


# key -> (parser, default); None defaults mean "unset"
_SCHEMA = {
    "seed": (_non_negative_int, 0),
    "threads": (_non_negative_int, 0),
    "deterministic": (_parse_bool, False),
    "precision": (_choice(("f32", "f64")), "f64"),
    "dump_config": (str, None),

    "kind": (_choice(LAYER_KINDS), "aggr_composite"),
    "j0": (_positive(int, "j0"), None),
    "m": (_positive(int, "m"), None),
    "k": (_positive(int, "k"), None),
    "sigma": (_positive(float, "sigma"), 0.3),
    "latent_dim": (_positive(int, "latent_dim"), 32),

    "data_root": (str, None),
    "synthetic": (_parse_str_list, None),
    "train_per_class": (_positive(int, "train_per_class"), 20),
    "test_per_class": (_positive(int, "test_per_class"), 10),
    "points": (_positive(int, "points"), POINTS_PER_CLOUD),
    "jitter": (float, 0.01),

    "epochs": (_non_negative_int, 200),
    "batch_size": (_positive(int, "batch_size"), 16),
    "lr": (_positive(float, "lr"), 1e-3),
    "attenuation": (float, 0.25),
    "exclude_center": (_parse_bool, False),
    "noise_sigma": (float, 0.01),

    "detector": (_choice(("selfsup", "dsvdd", "good_ifor")), "selfsup"),
    "normal": (str, None),
    "anomalous": (str, None),
    "train_count": (_positive(int, "train_count"), 200),
    "test_normal": (_positive(int, "test_normal"), 50),
    "test_anomalous": (_positive(int, "test_anomalous"), 50),
    "angles": (_parse_float_list, DEFAULT_ANGLES),
    "bins": (_positive(int, "bins"), 5),
    "trees": (_positive(int, "trees"), 100),
    "subsample": (_positive(int, "subsample"), 256),

    "checkpoint": (str, None),
    "metrics_csv": (str, None),
    "scores_csv": (str, None),
    "table_csv": (str, None),
    "out_csv": (str, None),
    "scores_dir": (str, None),

    "m_values": (_parse_float_list, tuple(float(m) for m in M_SWEEP)),
    "repeats": (_positive(int, "repeats"), 5),
    "num_classes": (_positive(int, "num_classes"), 40),
}

_COMMANDS = ("train", "detect", "paramcount", "eval", "bench")


def parse_config(path=None, overrides=()):
    """Resolve the effective configuration from an optional file plus
    (key, value) override pairs; unknown keys are rejected."""
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    pairs = []
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = body.partition("=")
            pairs.append((key.strip(), raw.strip()))
    pairs.extend(overrides)
    for key, raw in pairs:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return values


def dump_config(values, path):
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(cfg, *keys):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"missing required key {key!r}")


def _np_dtype(cfg):
    return np.float32 if cfg["precision"] == "f32" else np.float64


def _net_kwargs(cfg):
    return dict(sorted_accumulation=cfg["deterministic"],
                exclude_center=cfg["exclude_center"],
                attenuation=cfg["attenuation"])


def _classification_data(cfg, split_tag, seed_tag):
    if cfg["data_root"]:
        return load_directory(cfg["data_root"], cfg["points"],
                              seed=cfg["seed"], split_tag=split_tag)
    if cfg["synthetic"]:
        per_class = (cfg["train_per_class"] if split_tag == "train"
                     else cfg["test_per_class"])
        return make_synthetic_dataset(cfg["synthetic"], per_class,
                                      cfg["points"], cfg["jitter"],
                                      seed=cfg["seed"] * 2 + seed_tag,
                                      split_tag=split_tag)
    raise ConfigError("either data_root or synthetic must be set")


def cmd_train(cfg):
    _require(cfg, "j0", "m", "k")
    dataset = _classification_data(cfg, "train", 0)
    net = build_classification_net(
        cfg["kind"], cfg["j0"], cfg["m"], cfg["k"],
        num_classes=dataset.num_classes, sigma=cfg["sigma"],
        init_seed=cfg["seed"], dtype=_np_dtype(cfg), **_net_kwargs(cfg))
    net.train_seed = cfg["seed"]
    config = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         lr=cfg["lr"], seed=cfg["seed"],
                         log_path=cfg["metrics_csv"], verbose=True)
    net, log = train(net, dataset.pairs(), config)
    if cfg["checkpoint"]:
        save_checkpoint(net, cfg["checkpoint"])
    if log:
        print(f"final epoch: loss {log[-1].loss:.6f} "
              f"accuracy {log[-1].accuracy:.4f}")
    return EXIT_OK


def _detection_data(cfg):
    """Training normals plus labeled test pairs and their instance ids."""
    if cfg["data_root"]:
        _require(cfg, "normal")
        root = Path(cfg["data_root"])
        train_ds = load_directory(root / "train", cfg["points"], cfg["seed"])
        if cfg["normal"] not in train_ds.class_names:
            raise ConfigError(f"normal class {cfg['normal']!r} not in dataset")
        normal_id = train_ds.class_names.index(cfg["normal"])
        normals = [c for c, cid, _ in train_ds.instances if cid == normal_id]
        test_ds = load_directory(root / "test", cfg["points"], cfg["seed"] + 1)
        test_normal_id = test_ds.class_names.index(cfg["normal"])
        test = [(c, int(cid != test_normal_id)) for c, cid, _ in test_ds.instances]
        ids = [iid for _, _, iid in test_ds.instances]
        return normals, test, ids
    _require(cfg, "normal", "anomalous")
    normals = [generate_shape(cfg["normal"], cfg["points"], cfg["jitter"],
                              seeds.substream(cfg["seed"], seeds.DATA, 0, i))
               for i in range(cfg["train_count"])]
    test, ids = [], []
    for i in range(cfg["test_normal"]):
        test.append((generate_shape(cfg["normal"], cfg["points"], cfg["jitter"],
                                    seeds.substream(cfg["seed"], seeds.DATA, 1, i)), 0))
        ids.append(f"{cfg['normal']}_{i:04d}")
    for i in range(cfg["test_anomalous"]):
        test.append((generate_shape(cfg["anomalous"], cfg["points"], cfg["jitter"],
                                    seeds.substream(cfg["seed"], seeds.DATA, 2, i)), 1))
        ids.append(f"{cfg['anomalous']}_{i:04d}")
    return normals, test, ids


def cmd_detect(cfg):
    normals, test, ids = _detection_data(cfg)
    detector = DetectorConfig(
        kind=cfg["detector"], layer_kind=cfg["kind"], j0=cfg["j0"],
        num_centers=cfg["m"], spatial_dim=cfg["k"], sigma=cfg["sigma"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        seed=cfg["seed"], dtype=cfg["precision"], angles=cfg["angles"],
        latent_dim=cfg["latent_dim"], noise_sigma=cfg["noise_sigma"],
        bins=cfg["bins"], trees=cfg["trees"], subsample=cfg["subsample"],
        verbose=True)
    scored = detect(normals, test, detector)
    if cfg["scores_csv"]:
        write_scores_csv(scored, cfg["scores_csv"], instance_ids=ids)
    labels = set(scored.labels)
    if len(labels) < 2:
        print("AUC undefined: test set contains a single class", file=sys.stderr)
        return EXIT_AUC_UNDEFINED
    auc = roc_auc(scored.scores, scored.labels)
    print(f"AUC {auc:.3f}")
    return EXIT_OK


def cmd_paramcount(cfg):
    j0 = cfg["j0"] or 64
    k = cfg["k"] or 16
    rows = [("kind", "m", "parameters")]
    for kind in LAYER_KINDS:
        for m in M_SWEEP:
            spec = classification_spec(kind, j0, m, k, cfg["num_classes"])
            rows.append((kind, m, count_parameters(spec)))
    text = "\n".join(",".join(str(v) for v in row) for row in rows)
    print(text)
    if cfg["out_csv"]:
        Path(cfg["out_csv"]).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def _read_scores_csv(path):
    scores, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    return scores, labels


def _eval_score_files(cfg):
    """Every `<method>__<class>.csv` in scores_dir becomes one AUC cell of
    the comparison table."""
    root = Path(cfg["scores_dir"])
    per_method = {}
    class_names = []
    for path in sorted(root.glob("*.csv")):
        stem = path.stem
        if "__" not in stem:
            raise ConfigError(f"score file {path.name} is not method__class.csv")
        method, cls = stem.split("__", 1)
        scores, labels = _read_scores_csv(path)
        if len(set(labels)) < 2:
            print(f"AUC undefined for {path.name}: single class", file=sys.stderr)
            return EXIT_AUC_UNDEFINED
        auc = roc_auc(scores, labels)
        per_method.setdefault(method, {})[cls] = auc
        if cls not in class_names:
            class_names.append(cls)
    if not per_method:
        raise ConfigError(f"no score files found in {root}")
    for method, cells in per_method.items():
        missing = [c for c in class_names if c not in cells]
        if missing:
            raise ConfigError(f"method {method} lacks classes {missing}")
    table_input = {m: [per_method[m][c] for c in class_names]
                   for m in per_method}
    text, rows = detection_table(table_input, class_names)
    print(text)
    if cfg["table_csv"]:
        with open(cfg["table_csv"], "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


def _eval_checkpoint(cfg):
    net = load_checkpoint(cfg["checkpoint"], dtype=_np_dtype(cfg))
    dataset = _classification_data(cfg, "test", 1)
    pairs = dataset.pairs()
    points = np.stack([c.points for c, _ in pairs])
    feats = np.stack([c.features for c, _ in pairs])
    labels = np.array([l for _, l in pairs])
    preds = []
    for start in range(0, len(pairs), 32):
        logits = net.forward(points[start:start + 32], feats[start:start + 32],
                             train=False, sample_key=(seeds.EVAL, cfg["seed"]))
        preds.extend(logits.argmax(axis=1).tolist())
    oa = overall_accuracy(preds, labels)
    aa = average_accuracy(preds, labels)
    print(f"OA {oa:.3f}")
    print(f"AA {aa:.3f}")
    return EXIT_OK


def cmd_eval(cfg):
    if cfg["scores_dir"]:
        return _eval_score_files(cfg)
    if cfg["checkpoint"]:
        return _eval_checkpoint(cfg)
    raise ConfigError("eval needs either scores_dir or checkpoint")


def _make_layer(kind, j0, m, k, sigma, rng):
    if kind == "conv_composite":
        return ConvCompositeLayer(j0, 2 * j0, k, m, sigma, rng)
    if kind == "aggr_composite":
        return AggrCompositeLayer(j0, 2 * j0, k, m, sigma, rng)
    return BaselinePointConvLayer(j0, 2 * j0, m, sigma, rng)


def cmd_bench(cfg):
    j0 = cfg["j0"] or 16
    k = cfg["k"] or 8
    window, q = 32, 256
    rng = np.random.default_rng(cfg["seed"])
    offsets = rng.normal(size=(1, q, window, 3)) * 0.3
    feats = rng.normal(size=(1, q, window, j0))
    rows = [("kind", "m", "forward_ms_mean", "forward_ms_std",
             "forward_backward_ms_mean", "forward_backward_ms_std")]
    for kind in LAYER_KINDS:
        for m in (int(v) for v in cfg["m_values"]):
            layer = _make_layer(kind, j0, m, k, cfg["sigma"],
                                np.random.default_rng(cfg["seed"]))
            fwd, both = [], []
            out = layer.forward(offsets, feats)
            probe = np.ones_like(out)
            for _ in range(cfg["repeats"]):
                t0 = time.perf_counter()
                layer.forward(offsets, feats)
                fwd.append((time.perf_counter() - t0) * 1e3)
                t0 = time.perf_counter()
                layer.forward(offsets, feats)
                layer.zero_grads()
                layer.backward(probe)
                both.append((time.perf_counter() - t0) * 1e3)
            rows.append((kind, m,
                         f"{np.mean(fwd):.3f}", f"{np.std(fwd):.3f}",
                         f"{np.mean(both):.3f}", f"{np.std(both):.3f}"))
    text = "\n".join(",".join(str(v) for v in row) for row in rows)
    print(text)
    if cfg["out_csv"]:
        Path(cfg["out_csv"]).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "paramcount": cmd_paramcount,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

_USAGE = """usage: compnet <command> [--config FILE] [--key value ...]

commands:
  train       train a classification network, write checkpoint + epoch log
  detect      train an anomaly detector and score a test set
  paramcount  parameter counts for M in {8,...,256} per layer kind
  eval        OA/AA from a checkpoint, or an AUC table from score files
  bench       per-layer forward / forward+backward timings
"""


def _split_argv(argv):
    """Separate --config and the --key value override pairs."""
    config_path = None
    overrides = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if i + 1 >= len(argv):
            raise ConfigError(f"option --{key} needs a value")
        value = argv[i + 1]
        if key == "config":
            config_path = value
        else:
            overrides.append((key.replace("-", "_"), value))
        i += 2
    return config_path, overrides


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(_USAGE)
        return EXIT_OK
    command = argv[0]
    if command not in _COMMANDS:
        print(f"unknown command {command!r}\n{_USAGE}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config_path, overrides = _split_argv(argv[1:])
        cfg = parse_config(config_path, overrides)
        if cfg["dump_config"]:
            dump_config(cfg, cfg["dump_config"])
        return _HANDLERS[command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
