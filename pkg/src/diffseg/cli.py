"""``diffseg`` command line.

Every subcommand takes its options from flags, optionally layered over
an INI file given with ``--config`` (section named after the subcommand,
keys spelled like the flags without dashes, e.g. ``stage1_iters``).
The fully resolved option set is written to ``<out>/config.resolved``
before any work starts; passing that file back with ``--config``
reproduces the run.

Failures print one JSON line on stderr and exit with 2 (usage or unknown
flag), 3 (missing file), 4 (config parse error) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .denoiser import DenoiserConfig, load_params, save_params
from .experiments import initial_labels, load_split, parse_base, prior_data, refine_split
from .metrics import eval_report
from .refiner import RefineConfig, dump_trajectory, refine
from .rng import STREAM_BASE, STREAM_REFINE, name_id, stream
from .segmentor import SegmentorConfig, save_segmentor, train_base
from .synthdata import default_scene_spec, load_labels, save_labels, write_dataset
from .trainer import TrainConfig, new_state, run_stage

log = logging.getLogger("diffseg")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str  # flag spelling without leading dashes
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


_TRAIN_OPTS = [
    Opt("data", required=True, help="dataset directory written by gen-data"),
    Opt("base", default="oracle:0.25", help="oracle:<severity>[:<seed>] or a segmentor checkpoint"),
    Opt("out", required=True),
    Opt("T", int, 20, "diffusion steps"),
    Opt("transition", default="replace", choices=("replace", "mask", "hybrid")),
    Opt("replace-fraction", float, 0.5, "replacement share of the hybrid transition"),
    Opt("schedule", default="linear", choices=("linear", "cosine")),
    Opt("target", default="first", choices=("gt", "init", "first")),
    Opt("loss", default="ce", choices=("ce", "vlb", "hybrid")),
    Opt("stage1-iters", int, 2000),
    Opt("stage2-iters", int, 6000),
    Opt("batch", int, 8),
    Opt("lr", float, 1.5e-4),
    Opt("lr-interval", int, 1000),
    Opt("lr-floor", float, 1e-6),
    Opt("ema-decay", float, 0.99),
    Opt("ema-interval", int, 25),
    Opt("cond-dropout", float, 0.1),
    Opt("base-channels", int, 32),
    Opt("depth", int, 2),
    Opt("seed", int, 0),
    Opt("log-interval", int, 100),
    Opt("limit", int, 0, "use only the first N training samples (0 = all)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("spec", default="default", choices=("default",)),
        Opt("out", required=True),
        Opt("seed", int, 0),
        Opt("count", default="2000,200", help="train[,eval] sample counts"),
        Opt("workers", int, 1),
    ],
    "train-base": [
        Opt("data", required=True),
        Opt("out", required=True),
        Opt("iters", int, 1500),
        Opt("lr", float, 2e-3),
        Opt("batch", int, 16),
        Opt("feature-channels", int, 32),
        Opt("blocks", int, 3),
        Opt("seed", int, 0),
    ],
    "train-prior": _TRAIN_OPTS,
    "refine": [
        Opt("model", help="denoiser checkpoint (not needed with --base-only)"),
        Opt("base", default="oracle:0.25"),
        Opt("input", required=True, help="dataset directory"),
        Opt("split", default="eval", choices=("train", "eval")),
        Opt("out", required=True),
        Opt("steps", int, 20),
        Opt("cfg-scale", float, 0.0),
        Opt("strategy", default="free", choices=("free", "posterior")),
        Opt("dump-trajectory", parse_bool, False),
        Opt("base-only", parse_bool, False, "write the base segmentation instead of refining"),
        Opt("use-ema", parse_bool, True),
        Opt("seed", int, 0),
        Opt("limit", int, 0),
    ],
    "eval": [
        Opt("pred-dir", required=True),
        Opt("gt-dir", required=True),
        Opt("boundary-d", int, 0, "band width in pixels (0 = 2%% of the diagonal)"),
        Opt("num-classes", int, 4),
        Opt("out", required=True),
    ],
    "ablate": [Opt("which", required=True, choices=("diffusion-target", "transition", "inference", "steps", "ema"))]
    + [o for o in _TRAIN_OPTS if o.name not in ("target", "transition")]
    + [Opt("steps", int, 20), Opt("eval-limit", int, 0)],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffseg", description="Diffusion-based segmentation refinement on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="INI file with a [%s] section" % cmd)
        p.add_argument("-v", "--verbose", action="store_true")
        for o in opts:
            kw = {"default": None, "help": o.help, "choices": o.choices}
            if o.name == "which":
                p.add_argument("which", nargs="?", **kw)
            elif o.type is parse_bool:
                p.add_argument(f"--{o.name}", type=parse_bool, nargs="?", const=True, **kw)
            else:
                p.add_argument(f"--{o.name}", type=o.type, **kw)
    return parser


def _ini() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (``T``)
    return cp


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Flags over config-file values over defaults."""
    opts = COMMANDS[command]
    file_values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cp = _ini()
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from exc
        if cp.has_section(command):
            file_values = dict(cp.items(command))
        known = {o.key for o in opts}
        unknown = set(file_values) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{command}]: {', '.join(sorted(unknown))}")
    resolved = {}
    for o in opts:
        value = getattr(args, o.key)
        if value is None and o.key in file_values:
            try:
                value = o.type(file_values[o.key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {o.key}: {exc}") from exc
            if o.choices and value not in o.choices:
                raise ConfigError(f"{o.key} must be one of {o.choices}")
        if value is None:
            if o.required:
                raise UsageError(f"missing required option --{o.name}")
            value = o.default
        resolved[o.key] = value
    return resolved


def write_resolved(command: str, conf: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    cp = _ini()
    cp[command] = {k: str(v) for k, v in conf.items()}
    path = out_dir / "config.resolved"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} not found")
    return path


def _limit(split, n: int):
    if n and n < len(split):
        split.images, split.labels, split.keys = split.images[:n], split.labels[:n], split.keys[:n]
    return split


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(c: dict) -> None:
    counts = [int(x) for x in str(c["count"]).split(",")]
    n_train = counts[0]
    n_eval = counts[1] if len(counts) > 1 else max(1, n_train // 10)
    write_dataset(default_scene_spec(), c["out"], c["seed"], n_train, n_eval, c["workers"])


def cmd_train_base(c: dict) -> None:
    split = load_split(_require(c["data"], "dataset directory"), "train")
    cfg = SegmentorConfig(feature_channels=c["feature_channels"], blocks=c["blocks"])
    seg = train_base(split.images, split.labels, c["iters"], c["lr"], c["batch"], cfg=cfg, rng=stream(c["seed"], STREAM_BASE))
    save_segmentor(Path(c["out"]) / "segmentor.ckpt", seg)


def _configs(c: dict, target: str, transition: str) -> tuple[DenoiserConfig, TrainConfig]:
    dcfg = DenoiserConfig(base_channels=c["base_channels"], depth=c["depth"], cond_dropout=c["cond_dropout"])
    tcfg = TrainConfig(
        T=c["T"], transition=transition, replace_fraction=c["replace_fraction"], schedule=c["schedule"], target=target, loss=c["loss"],
        stage1_iters=c["stage1_iters"], stage2_iters=c["stage2_iters"], batch_size=c["batch"], lr=c["lr"], lr_interval=c["lr_interval"],
        lr_floor=c["lr_floor"], ema_decay=c["ema_decay"], ema_interval=c["ema_interval"], seed=c["seed"], log_interval=c["log_interval"],
    )
    return dcfg, tcfg


class _Trainer:
    """Shares the prepared base data and the stage-1 state between variants."""

    def __init__(self, c: dict):
        self.c = c
        split = _limit(load_split(_require(c["data"], "dataset directory"), "train"), c["limit"])
        self.data, _ = prior_data(parse_base(c["base"]), split)
        self._stage1: dict = {}

    def train(self, target: str, transition: str, log_fn=None):
        dcfg, tcfg = _configs(self.c, target, transition)
        dcfg = DenoiserConfig(**{**dcfg.to_dict(), "feature_channels": self.data.features.shape[-1], "channel_mult": (), "attention": ()})
        sched = tcfg.noise_schedule()
        key = transition
        if key not in self._stage1:
            st = new_state(dcfg, tcfg)
            run_stage(st, self.data, tcfg, "single", tcfg.stage1_iters, log_fn)
            self._stage1[key] = st
        st = self._stage1[key].copy()
        run_stage(st, self.data, tcfg, "multi", tcfg.stage2_iters, log_fn)
        return dcfg, tcfg, sched, st


def cmd_train_prior(c: dict) -> None:
    out = Path(c["out"])
    lines: list[str] = []
    dcfg, tcfg, _, st = _Trainer(c).train(c["target"], c["transition"], lines.append)
    (out / "train.log").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    extra = {"train": tcfg.to_dict(), "base": c["base"]}
    save_params(out / "denoiser.ckpt", dcfg, st.params, st.ema.shadow, extra)


def _pred_name(key: str) -> str:
    return Path(key).name


def cmd_refine(c: dict) -> None:
    out = Path(c["out"])
    split = _limit(load_split(_require(c["input"], "dataset directory"), c["split"]), c["limit"])
    H, W = split.labels.shape[1:]
    pred_dir = out / "preds"
    pred_dir.mkdir(parents=True, exist_ok=True)
    if c["base_only"]:
        base = parse_base(c["base"])
        _, logits = base.predict(split)
        preds = initial_labels(logits, H, W)
        num_classes = logits.shape[-1]
    else:
        if not c["model"]:
            raise UsageError("--model is required unless --base-only is set")
        dcfg, params, ema, extra = load_params(_require(c["model"], "model checkpoint"))
        base = parse_base(c["base"], dcfg.num_classes, dcfg.feature_channels)
        feats, _ = base.predict(split)
        tc = extra["train"]
        sched = TrainConfig(**tc).noise_schedule()
        rcfg = RefineConfig(steps=c["steps"], guidance=c["cfg_scale"], strategy=c["strategy"], seed=c["seed"])
        weights = ema if (c["use_ema"] and ema is not None) else params
        preds = refine_split(weights, dcfg, sched, rcfg, feats, split.keys, (H, W))
        num_classes = dcfg.num_classes
        if c["dump_trajectory"]:
            for f, key in zip(feats, split.keys):
                res = refine(f, weights, dcfg, sched, rcfg, stream(rcfg.seed, STREAM_REFINE, name_id(key)), (H, W))
                dump_trajectory(res, out / "trajectories" / Path(key).stem, num_classes)
    for p, key in zip(preds, split.keys):
        save_labels(p, pred_dir / _pred_name(key), num_classes)


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def cmd_eval(c: dict) -> dict:
    pred_dir = _require(c["pred_dir"], "prediction directory")
    gt_dir = _require(c["gt_dir"], "ground-truth directory")
    names = sorted(p.name for p in pred_dir.glob("*.pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm predictions in {pred_dir}")
    preds = [load_labels(pred_dir / n) for n in names]
    gts = [load_labels(_require(gt_dir / n, "ground-truth label")) for n in names]
    d = c["boundary_d"] or None
    producer = pred_dir.parent / "config.resolved"
    config_hash = _hash_file(producer) if producer.exists() else _hash_file(Path(c["out"]) / "config.resolved")
    report = eval_report(preds, gts, c["num_classes"], d, config_hash)
    Path(c["out"]).mkdir(parents=True, exist_ok=True)
    (Path(c["out"]) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return report


def _score(weights, dcfg, sched, split, feats, steps: int, seed: int, guidance: float = 0.0, strategy: str = "free"):
    H, W = split.labels.shape[1:]
    rcfg = RefineConfig(steps=min(steps, sched.T), guidance=guidance, strategy=strategy, seed=seed)
    preds = refine_split(weights, dcfg, sched, rcfg, feats, split.keys, (H, W))
    rep = eval_report(list(preds), list(split.labels), dcfg.num_classes)
    return rep["miou"], rep["biou"]


def cmd_ablate(c: dict) -> list[dict]:
    which = c["which"]
    out = Path(c["out"])
    trainer = _Trainer(c)
    ev = _limit(load_split(c["data"], "eval"), c["eval_limit"])
    n, seed = c["steps"], c["seed"]
    rows: list[dict] = []

    def one_and_n(label, weights, dcfg, sched, feats):
        m1, b1 = _score(weights, dcfg, sched, ev, feats, 1, seed)
        mn, bn = _score(weights, dcfg, sched, ev, feats, n, seed)
        rows.append({"variant": label, "miou_1": m1, f"miou_{n}": mn, "biou_1": b1, f"biou_{n}": bn})

    base_feats = None
    if which in ("diffusion-target", "transition"):
        variants = [("gt", "replace"), ("init", "replace"), ("first", "replace")] if which == "diffusion-target" else [
            ("first", "replace"), ("first", "mask"), ("first", "hybrid")]
        for target, transition in variants:
            dcfg, _, sched, st = trainer.train(target, transition)
            if base_feats is None:
                base_feats, _ = parse_base(c["base"], dcfg.num_classes, dcfg.feature_channels).predict(ev)
            one_and_n({"diffusion-target": target, "transition": transition}[which], st.ema.shadow, dcfg, sched, base_feats)
    else:
        dcfg, _, sched, st = trainer.train("first", "replace")
        base_feats, _ = parse_base(c["base"], dcfg.num_classes, dcfg.feature_channels).predict(ev)
        if which == "ema":
            one_and_n("ema", st.ema.shadow, dcfg, sched, base_feats)
            one_and_n("live", st.params, dcfg, sched, base_feats)
        elif which == "steps":
            for k in (1, 2, 5, 10, 20, sched.T):
                if k > sched.T or any(r["variant"] == f"n={k}" for r in rows):
                    continue
                m, b = _score(st.ema.shadow, dcfg, sched, ev, base_feats, k, seed)
                rows.append({"variant": f"n={k}", "miou": m, "biou": b})
        else:
            for strategy in ("free", "posterior"):
                for s in (0.0, 0.5, 1.0):
                    if s > 0 and dcfg.cond_dropout <= 0:
                        continue
                    m, b = _score(st.ema.shadow, dcfg, sched, ev, base_feats, n, seed, s, strategy)
                    rows.append({"variant": f"{strategy},s={s:g}", "miou": m, "biou": b})
    cols = list(rows[0].keys())
    table = "\t".join(cols) + "\n" + "".join("\t".join(r[k] if isinstance(r[k], str) else f"{r[k]:.6f}" for k in cols) + "\n" for r in rows)
    (out / "ablate.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return rows


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-prior": cmd_train_prior,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(message).replace("\n", " ")}), file=sys.stderr)
    return code


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        conf = resolve(args.command, args)
        write_resolved(args.command, conf, Path(conf["out"]))
        HANDLERS[args.command](conf)
        return EXIT_OK
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-file", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except Exception as exc:  # noqa: BLE001 - reported as a single line
        return _fail(EXIT_ERROR, type(exc).__name__, exc)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
