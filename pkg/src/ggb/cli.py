"""``ggb`` command line: gen-data, train, evaluate, generate, ablate, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .tensor import KNOWN_FAULTS
from .training import ConfigError, TrainConfig

log = logging.getLogger("ggb")


class CommandError(Exception):
    """An expected failure: reported as one line, exit status 1."""


def _levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--levels expects integers like '3,4,5', got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file; flags below override it")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--levels", type=_levels, help="GGB levels, e.g. 3,4,5")
    p.add_argument("--num-ggbs", type=int)
    p.add_argument("--disable-rapd", action="store_true", default=None)
    p.add_argument("--disable-nvtd", action="store_true", default=None)
    p.add_argument("--disable-ggbs", action="store_true", default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def overrides_from(args) -> dict:
    o = {}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("epochs", "epochs"), ("resolution", "resolution"),
                      ("disable_rapd", "disable_rapd"), ("disable_nvtd", "disable_nvtd"),
                      ("disable_ggbs", "disable_all_ggbs"), ("deterministic", "deterministic")):
        v = getattr(args, flag, None)
        if v is not None:
            o[key] = v
    if o.get("steps") is not None and "epochs" not in o:
        o["epochs"] = None  # an explicit step count beats an epoch count from the file
    levels, k = getattr(args, "levels", None), getattr(args, "num_ggbs", None)
    if levels is not None or k is not None or o.get("disable_all_ggbs"):
        # a level flag replaces the file's level choice entirely
        o["active_levels"] = levels
        o["num_ggbs"] = k
    return o


def resolve_config(args) -> TrainConfig:
    o = overrides_from(args)
    try:
        if args.config is not None:
            return TrainConfig.from_file(args.config, o)
        return TrainConfig.from_dict(o)
    except FileNotFoundError as e:
        raise CommandError(str(e)) from e
    except (ConfigError, TypeError) as e:
        raise CommandError(f"invalid configuration: {e}") from e


def write_snapshot(cfg: TrainConfig, out: Path, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    d = cfg.to_dict()
    if extra:
        d = {**d, "_command": extra}
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return path


def load_snapshot(path) -> TrainConfig:
    d = json.loads(Path(path).read_text())
    d.pop("_command", None)
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import SyntheticDataset, write_cache

    ds = SyntheticDataset(args.num_pairs, args.resolution, seed=args.seed, split=args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(
        {"num_pairs": args.num_pairs, "resolution": args.resolution, "seed": args.seed, "split": args.split},
        indent=2, sort_keys=True) + "\n")
    path = write_cache(ds, args.out)
    print(f"wrote {len(ds)} pairs to {path.parent}")
    return 0


def cmd_train(args) -> int:
    from .data import SyntheticDataset
    from .training import train_loop
    from .viz import sample_grid, save_grid, sample_writer

    cfg = resolve_config(args)
    write_snapshot(cfg, args.out)
    dataset = SyntheticDataset(cfg.num_pairs, cfg.resolution, seed=cfg.data_seed, split="train")
    preview = dataset.batch(range(min(4, len(dataset))))
    run = train_loop(cfg, dataset, args.out, resume_from=args.resume, sample_writer=sample_writer(preview))
    save_grid(sample_grid(run.state.G, preview, cfg.dtype), args.out / "samples" / f"step_{run.state.step:06d}.png")
    last = run.reports[-1].losses if run.reports else {}
    print(f"trained {run.state.step} steps; l_rec_N={last.get('l_rec_N', float('nan')):.4f}; "
          f"checkpoint {run.checkpoint_path}")
    return 0


def _classifier(args, out: Path, seed: int):
    from .metrics import ProxyClassifier, train_proxy_classifier

    if args.classifier is not None:
        if not Path(args.classifier).is_file():
            raise CommandError(f"classifier file not found: {args.classifier}")
        return ProxyClassifier.load(args.classifier)
    clf = train_proxy_classifier(seed=seed)
    clf.save(out / "proxy_classifier.npz")
    return clf


def cmd_evaluate(args) -> int:
    from .data import SyntheticDataset
    from .metrics import evaluate_checkpoint
    from .training import read_checkpoint

    if not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    meta, _, _ = read_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    write_snapshot(cfg, args.out, {"command": "evaluate", "checkpoint": str(args.checkpoint),
                                   "num_test": args.num_test})
    test_set = SyntheticDataset(args.num_test, cfg.resolution, seed=cfg.data_seed, split="test")
    clf = None if args.no_proxy_is else _classifier(args, args.out, cfg.data_seed)
    report = evaluate_checkpoint(args.checkpoint, test_set, clf, args.out, args.splits)
    print(report.as_text(), end="")
    return 0


def cmd_generate(args) -> int:
    from .data import SyntheticDataset
    from .training import load_checkpoint
    from .viz import sample_grid, save_grid

    if not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    write_snapshot(cfg, args.out, {"command": "generate", "checkpoint": str(args.checkpoint), "num": args.num,
                                   "split": args.split})
    ds = SyntheticDataset(max(args.num, 1), cfg.resolution, seed=cfg.data_seed, split=args.split)
    for start in range(0, args.num, 8):
        idx = list(range(start, min(args.num, start + 8)))
        save_grid(sample_grid(state.G, ds.batch(idx), cfg.dtype), args.out / f"grid_{start:04d}.png")
    print(f"wrote {-(-args.num // 8)} grid(s) to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = resolve_config(args)
    seeds = args.seeds if args.seeds is not None else (cfg.seed,)
    args.out.mkdir(parents=True, exist_ok=True)
    clf = _classifier(args, args.out, cfg.data_seed)
    result = run_ablation(cfg, args.out, seeds, args.num_test, clf)
    print(result.table(), end="")
    if result.failed:
        names = ", ".join(f"{r.variant.key} (seed {r.seed})" for r in result.failed)
        print(f"error: failed variants: {names}", file=sys.stderr)
        return 1
    if not result.same_data:
        print("error: variants saw different batch sequences", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(seeds=args.seeds, inject=args.inject)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    total = sum(c.seconds for c in checks)
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {total:.1f}s")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ggb", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset to PNG files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-pairs", type=int, default=64)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="SSIM and proxy-IS of a checkpoint on held-out pairs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-test", type=int, default=200)
    p.add_argument("--splits", type=int, default=1)
    p.add_argument("--classifier", type=Path, help="saved proxy classifier (.npz); trained if omitted")
    p.add_argument("--no-proxy-is", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("generate", help="write sample grids from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num", type=int, default=8)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("ablate", help="train and compare the six ablation variants")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_levels, help="model seeds, e.g. 0,1,2 (default: --seed)")
    p.add_argument("--num-test", type=int, default=200)
    p.add_argument("--classifier", type=Path)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--inject", choices=sorted(KNOWN_FAULTS),
                   help="deliberately break a backward rule (the suite must then fail)")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, FloatingPointError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
