"""Command-line entry point: ``eusa gen | train | attack | eval | ablate``.

Seeds
-----
One global ``--seed`` drives every run.  Module seeds are derived from it as the
first 32-bit word of ``SeedSequence([seed, tag])`` with tags corpus=1, train=2,
attack=3.  Ablation repeat ``i`` uses ``SeedSequence([seed, 3, i])`` instead of the
plain attack seed.

Precedence
----------
built-in defaults < ``--config`` JSON < command-line flags.  Unknown config keys are
rejected.  Every output directory receives a ``manifest.json`` holding the resolved
config, the derived seeds and SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from .attack import AttackConfig, Perturbation, run_eusa
from .corpus import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .eval.report import emit_report, evaluate
from .losses import COMPONENTS, TripleLossConfig
from .tracker import TrackerModel, train_toy_tracker
from .tracker.tracking import POLICIES
from .tracker.train import TrainConfig

log = logging.getLogger("eusa")

SEED_TAGS = {"corpus": 1, "train": 2, "attack": 3}
ABLATION_RATES = (0.1, 0.3, 0.5, 1.0)
ABLATION_STRATEGIES = ("greedy", "random")
LOSS_COMBOS = [c for n in (1, 2, 3) for c in combinations(COMPONENTS, n)]
SPLITS = ("train", "holdout", "all")


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, module: str, repeat=None) -> int:
    key = [int(seed), SEED_TAGS[module]] + ([int(repeat)] if repeat is not None else [])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# ------------------------------------------------------------------ run config


def _field_names(cls, drop=("seed",)):
    return [f.name for f in dataclasses.fields(cls) if f.name not in drop]


def _defaults(cls, drop=("seed",)):
    inst = cls()
    out = {}
    for name in _field_names(cls, drop):
        v = getattr(inst, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    return out


def default_run_config() -> dict:
    attack = _defaults(AttackConfig, drop=("seed", "loss"))
    attack["loss"] = TripleLossConfig().to_dict()
    return {
        "seed": 0,
        "corpus": _defaults(CorpusConfig),
        "train": _defaults(TrainConfig),
        "attack": attack,
        "eval": {"policy": "otb", "split": "holdout", "workers": 1},
        "ablate": {"seeds": 5, "rates": list(ABLATION_RATES)},
    }


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "loss":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        elif key == "loss":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}loss must be an object")
            out[key] = _merge(base[key], val, f"{where}loss.")
        else:
            out[key] = val
    return out


def load_run_config(path=None) -> dict:
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return _merge(cfg, user, "")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def corpus_config(cfg: dict) -> CorpusConfig:
    return CorpusConfig(**_tuples(cfg["corpus"]), seed=derive_seed(cfg["seed"], "corpus"))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**_tuples(cfg["train"]), seed=derive_seed(cfg["seed"], "train"))


def loss_config(d: dict) -> TripleLossConfig:
    return TripleLossConfig(**_tuples(d))


def attack_config(cfg: dict, seed=None) -> AttackConfig:
    a = dict(cfg["attack"])
    loss = loss_config(a.pop("loss"))
    seed = derive_seed(cfg["seed"], "attack") if seed is None else seed
    return AttackConfig(**a, loss=loss, seed=seed)


# ------------------------------------------------------------------ manifest + io


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_digest(path: Path) -> str:
    path = Path(path)
    if path.is_dir():
        manifest = path / "manifest.json"
        return _sha256_file(manifest) if manifest.exists() else ""
    return _sha256_file(path)


def config_echo(cfg: dict) -> dict:
    """Resolved config minus worker counts, which never change results."""
    echo = copy.deepcopy(cfg)
    for section in ("attack", "eval"):
        echo[section].pop("workers", None)
    return echo


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs) -> Path:
    from . import __version__

    doc = {
        "command": command,
        "version": __version__,
        "config": config_echo(cfg),
        "seeds": {m: derive_seed(cfg["seed"], m) for m in SEED_TAGS},
        "inputs": {k: {"path": str(v), "sha256": _input_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": {Path(p).name: _sha256_file(p) for p in sorted(outputs, key=lambda p: Path(p).name)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _videos(corpus, split: str):
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    return corpus.subset(split)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ subcommands


def cmd_gen(args, cfg):
    ccfg = corpus_config(cfg)
    corpus = generate_corpus(ccfg)
    out = save_corpus(corpus, args.out)
    log.info("wrote %d videos to %s", len(corpus), out)
    return 0


def cmd_train(args, cfg):
    corpus = load_corpus(args.corpus)
    tcfg = train_config(cfg)
    videos = _videos(corpus, args.split)
    model = train_toy_tracker(videos, config=tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    log.info("wrote model to %s", out)
    return 0


def cmd_attack(args, cfg):
    corpus = load_corpus(args.corpus)
    model = TrackerModel.load(args.model)
    acfg = attack_config(cfg)
    videos = _videos(corpus, args.split)
    pert, report = run_eusa(model, videos, acfg)
    out = _out_dir(args.out)
    files = [out / "perturbation.eusp", out / "attack_report.json"]
    pert.save(files[0])
    report.save(files[1])
    write_manifest(out, "attack", cfg, {"corpus": args.corpus, "model": args.model}, files)
    log.info("selected candidate %d, loss %.4f, linf %.3f", report.selected_index,
             report.candidate_losses[report.selected_index], report.linf)
    return 0


def cmd_eval(args, cfg):
    corpus = load_corpus(args.corpus)
    model = TrackerModel.load(args.model)
    ev = cfg["eval"]
    videos = _videos(corpus, ev["split"])
    if ev["policy"] not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {ev['policy']!r}")
    echo = config_echo(cfg)
    clean = evaluate(model, videos, None, ev["policy"], echo, cfg["seed"], ev["workers"])
    attacked = None
    inputs = {"corpus": args.corpus, "model": args.model}
    if args.perturbation:
        pert = Perturbation.load(args.perturbation)
        attacked = evaluate(model, videos, pert, ev["policy"], echo, cfg["seed"], ev["workers"])
        inputs["perturbation"] = args.perturbation
    out = _out_dir(args.out)
    files = emit_report(clean, attacked, out)
    write_manifest(out, "eval", cfg, inputs, files.values())
    agg = clean.aggregate
    log.info("clean precision %.1f success %.1f", agg["precision"], agg["success_auc"])
    if attacked is not None:
        agg = attacked.aggregate
        log.info("attacked precision %.1f success %.1f", agg["precision"], agg["success_auc"])
    return 0


ABLATION_FIELDS = ("grid", "strategy", "rate", "loss", "precision", "success_auc", "precision_std", "success_auc_std")


def run_ablation(model, corpus, cfg, seeds: int, rates=ABLATION_RATES, policy="otb", workers=1):
    """Sampling grid (rates x strategies) and loss-component grid, each averaged over ``seeds`` repeats.

    Perturbations are trained on the train split and scored on holdout.
    """
    train, holdout = corpus.train, corpus.holdout
    base = attack_config(cfg)
    clean = evaluate(model, holdout, None, policy, workers=workers).aggregate

    def averaged(**overrides):
        prec, succ = [], []
        for i in range(seeds):
            acfg = dataclasses.replace(base, seed=derive_seed(cfg["seed"], "attack", i), **overrides)
            pert, _ = run_eusa(model, train, acfg)
            agg = evaluate(model, holdout, pert, policy, workers=workers).aggregate
            prec.append(agg["precision"])
            succ.append(agg["success_auc"])
        return {
            "precision": float(np.mean(prec)),
            "success_auc": float(np.mean(succ)),
            "precision_std": float(np.std(prec)),
            "success_auc_std": float(np.std(succ)),
        }

    rows = []
    for strategy in ABLATION_STRATEGIES:
        for rate in rates:
            rows.append({"grid": "sampling", "strategy": strategy, "rate": float(rate),
                         "loss": ",".join(base.loss.components), **averaged(strategy=strategy, rate=rate)})
    for combo in LOSS_COMBOS:
        loss = dataclasses.replace(base.loss, components=tuple(combo))
        rows.append({"grid": "loss", "strategy": base.strategy, "rate": float(base.rate),
                     "loss": ",".join(combo), **averaged(loss=loss)})
    return {"clean": {"precision": clean["precision"], "success_auc": clean["success_auc"]},
            "seeds": seeds, "rows": rows}


def ablation_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for row in doc["rows"]:
        w.writerow([row[k] if isinstance(row[k], str) else repr(row[k]) for k in ABLATION_FIELDS])
    return buf.getvalue()


def plot_ablation(doc: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "eusa", "svg.fonttype": "none", "font.size": 9}):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        styles = {"greedy": ("tab:red", "-", "o"), "random": ("tab:gray", "--", "s")}
        for strategy in ABLATION_STRATEGIES:
            rows = [r for r in doc["rows"] if r["grid"] == "sampling" and r["strategy"] == strategy]
            color, ls, marker = styles[strategy]
            ax.plot([r["rate"] for r in rows], [r["precision"] for r in rows], color=color, ls=ls,
                    marker=marker, lw=1.6, label=strategy)
        ax.axhline(doc["clean"]["precision"], color="tab:blue", lw=1, ls=":", label="clean")
        ax.set_xlabel("sampling rate r")
        ax.set_ylabel("attacked precision (%)")
        ax.set_title("Sampling strategy ablation")
        ax.grid(alpha=0.3)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def cmd_ablate(args, cfg):
    corpus = load_corpus(args.corpus)
    model = TrackerModel.load(args.model)
    ab = cfg["ablate"]
    doc = run_ablation(model, corpus, cfg, ab["seeds"], ab["rates"], cfg["eval"]["policy"],
                       cfg["eval"]["workers"])
    doc["config"] = config_echo(cfg)
    out = _out_dir(args.out)
    files = [_write_json(out / "ablation.json", doc), out / "ablation.csv", out / "ablation_sampling.svg"]
    files[1].write_text(ablation_csv(doc))
    plot_ablation(doc, files[2])
    write_manifest(out, "ablate", cfg, {"corpus": args.corpus, "model": args.model}, files)
    return 0


# ------------------------------------------------------------------ argument parsing


def _loss_components(text: str):
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = set(parts) - set(COMPONENTS)
    if not parts or bad:
        raise argparse.ArgumentTypeError(f"--loss takes a comma list drawn from {','.join(COMPONENTS)}")
    return tuple(c for c in COMPONENTS if c in parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eusa", description="Universal shuffle attack lab on a toy Siamese tracker.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON; flags override it")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    g = sub.add_parser("gen", help="generate and save a synthetic corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-videos", type=int)
    g.add_argument("--frames", type=int, dest="frames_per_video")

    t = sub.add_parser("train", help="train the toy tracker")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--split", default="all", choices=SPLITS)

    a = sub.add_parser("attack", help="optimise a universal perturbation")
    common(a)
    a.add_argument("--corpus", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="train", choices=SPLITS)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--step", type=float)
    a.add_argument("--k", type=int)
    a.add_argument("--rate", type=float)
    a.add_argument("--strategy", choices=ABLATION_STRATEGIES)
    a.add_argument("--loss", type=_loss_components, help="subset of f,c,d")
    a.add_argument("--epochs-per-candidate", type=int)
    a.add_argument("--workers", type=int)

    e = sub.add_parser("eval", help="score clean and attacked tracking")
    common(e)
    e.add_argument("--corpus", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--perturbation")
    e.add_argument("--policy", choices=POLICIES)
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--workers", type=int)

    b = sub.add_parser("ablate", help="sampling and loss-component ablation grids")
    common(b)
    b.add_argument("--corpus", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int)
    b.add_argument("--k", type=int)
    b.add_argument("--epochs-per-candidate", type=int)
    b.add_argument("--policy", choices=POLICIES)
    b.add_argument("--workers", type=int)
    return p


def resolve_config(args) -> dict:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    flag = lambda name: getattr(args, name, None)  # noqa: E731
    if args.command == "gen":
        for name in ("n_videos", "frames_per_video"):
            if flag(name) is not None:
                cfg["corpus"][name] = flag(name)
    if args.command == "train" and flag("epochs") is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.command in ("attack", "ablate"):
        for name in ("epsilon", "step", "k", "rate", "strategy", "epochs_per_candidate"):
            if flag(name) is not None:
                cfg["attack"][name] = flag(name)
        if flag("loss") is not None:
            cfg["attack"]["loss"]["components"] = list(args.loss)
        if args.command == "attack" and flag("workers") is not None:
            cfg["attack"]["workers"] = args.workers
    if args.command in ("eval", "ablate"):
        for name in ("policy", "split", "workers"):
            if flag(name) is not None:
                cfg["eval"][name] = flag(name)
    if args.command == "ablate" and flag("seeds") is not None:
        cfg["ablate"]["seeds"] = args.seeds
    # validate every section eagerly so bad configs fail before any work
    corpus_config(cfg).validate()
    train_config(cfg)
    attack_config(cfg)
    if cfg["eval"]["policy"] not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}")
    return cfg


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, TypeError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
