"""The six-variant ablation grid: train each variant on the same data, evaluate on held-out pairs."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SyntheticDataset
from .metrics import ProxyClassifier, evaluate, generator_predictor, train_proxy_classifier
from .training import TrainConfig, determinism, train_loop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    key: str
    label: str

    def configure(self, base: TrainConfig) -> TrainConfig:
        N = base.depth
        cleared = dict(active_levels=None, num_ggbs=None, disable_all_ggbs=False, disable_rapd=False,
                       disable_nvtd=False)
        kw = {
            "w/o GGBs": dict(disable_all_ggbs=True),
            "w/o RAPD": dict(num_ggbs=3, disable_rapd=True),
            "w/o NVTD": dict(num_ggbs=3, disable_nvtd=True),
            "1 GGB": dict(active_levels=(N - 1,)),
            "2 GGBs": dict(active_levels=(N - 2, N - 1)),
            "3 GGBs": dict(active_levels=(N - 3, N - 2, N - 1)),
        }[self.key]
        d = base.to_dict()
        d.update(cleared)
        d.update(kw)
        return TrainConfig.from_dict(d)


VARIANTS = (
    Variant("w/o GGBs", "Ours w/o GGBs"),
    Variant("w/o RAPD", "Ours w/o RAPD"),
    Variant("w/o NVTD", "Ours w/o NVTD"),
    Variant("1 GGB", "Ours with 1 GGB"),
    Variant("2 GGBs", "Ours with 2 GGBs"),
    Variant("3 GGBs", "Ours"),
)

TABLE_COLUMNS = ["variant", "label", "seed", "active_levels", "mean_ssim", "proxy_is", "status"]


@dataclass
class VariantResult:
    variant: Variant
    seed: int
    active_levels: tuple[int, ...]
    mean_ssim: float = float("nan")
    proxy_is: float = float("nan")
    error: str | None = None
    batch_log: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> list[str]:
        return [self.variant.key, self.variant.label, str(self.seed), " ".join(map(str, self.active_levels)),
                f"{self.mean_ssim:.6f}", f"{self.proxy_is:.6f}", "ok" if self.ok else f"FAILED: {self.error}"]


def _slug(key: str) -> str:
    return key.replace("/", "").replace(" ", "_").lower()


def run_variant(variant: Variant, base: TrainConfig, out_dir: Path, test_set, clf) -> VariantResult:
    cfg = variant.configure(base)
    res = VariantResult(variant, cfg.seed, tuple(cfg.active_levels))
    vdir = out_dir / f"seed{cfg.seed}" / _slug(variant.key)
    try:
        vdir.mkdir(parents=True, exist_ok=True)
        (vdir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        run = train_loop(cfg, out_dir=vdir)
        with determinism(cfg.deterministic):
            report = evaluate(generator_predictor(run.state), test_set, clf, out_dir=vdir)
        res.mean_ssim, res.proxy_is = report.mean_ssim, report.proxy_is
        res.batch_log = (vdir / "batches.log").read_text()
    except Exception as e:  # reported per variant; the grid keeps going
        log.error("variant %s (seed %d) failed:\n%s", variant.key, cfg.seed, traceback.format_exc())
        res.error = f"{type(e).__name__}: {e}"
    return res


@dataclass
class AblationResult:
    results: list[VariantResult]
    same_data: bool

    @property
    def failed(self) -> list[VariantResult]:
        return [r for r in self.results if not r.ok]

    def mean_ssim(self, key: str) -> float:
        vals = [r.mean_ssim for r in self.results if r.variant.key == key and r.ok]
        return float(np.mean(vals)) if vals else float("nan")

    def by_seed(self, key: str) -> dict[int, float]:
        return {r.seed: r.mean_ssim for r in self.results if r.variant.key == key and r.ok}

    def table(self) -> str:
        head = f"{'variant':<18} {'seed':>4} {'levels':<8} {'SSIM':>8} {'proxy-IS':>9}  status"
        lines = [head, "-" * len(head)]
        for r in self.results:
            lines.append(f"{r.variant.label:<18} {r.seed:>4} {' '.join(map(str, r.active_levels)) or '-':<8} "
                         f"{r.mean_ssim:>8.4f} {r.proxy_is:>9.4f}  {'ok' if r.ok else 'FAILED: ' + r.error}")
        lines.append(f"identical batch sequence across variants: {self.same_data}")
        return "\n".join(lines) + "\n"


def run_ablation(base: TrainConfig, out_dir, seeds=(0,), num_test: int = 200, clf: ProxyClassifier | None = None,
                 variants=VARIANTS) -> AblationResult:
    """Train and evaluate every variant for every seed, sequentially.

    Only the model seed varies across ``seeds``; the data seed stays fixed so
    every run sees the same batch sequence.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {**base.to_dict(), "_command": {"command": "ablate", "seeds": list(seeds), "num_test": num_test}}
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    test_set = SyntheticDataset(num_test, base.resolution, seed=base.data_seed, split="test")
    if clf is None:
        clf = train_proxy_classifier(seed=base.data_seed)
        clf.save(out / "proxy_classifier.npz")
    results = []
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for seed in seeds:
            seeded = dataclasses.replace(base, seed=seed)
            for v in variants:
                r = run_variant(v, seeded, out, test_set, clf)
                log.info("seed %d %-10s ssim=%.4f proxy_is=%.4f %s", seed, v.key, r.mean_ssim, r.proxy_is,
                         "ok" if r.ok else r.error)
                results.append(r)
                w.writerow(r.row())
                fh.flush()
    logs = {r.batch_log for r in results if r.ok}
    result = AblationResult(results, len(logs) <= 1)
    (out / "ablation.txt").write_text(result.table())
    return result
