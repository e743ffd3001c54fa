"""Evaluation: SSIM against ground truth and a proxy Inception Score.

The proxy score keeps the Inception Score formula,
``exp(E_x KL(p(class|x) || p(class)))``, but the class posterior comes from
a small classifier trained on the synthetic palette classes instead of an
Inception network. Reports label it ``proxy-IS``; its values are not
comparable with published IS numbers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import NUM_PALETTE_CLASSES, Batch, SyntheticDataset
from .layers import add_conv, conv, conv_stack, count
from .optim import Adam, AdamHyper
from .tensor import Tensor, backward, log_softmax, mean, reshape, spatial_mean

SSIM_HEADER = "SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, images mapped to [0,1] (L=1), " \
              "valid windows only, averaged over channels"


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def kernel(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        k = np.outer(g, g)
        return k / k.sum()


def to_unit_range(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] pixels to [0, 1]."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, kernel.shape, axis=(-2, -1))
    return np.einsum("...ijuv,uv->...ij", win, kernel, optimize=True)


def ssim(a: np.ndarray, b: np.ndarray, p: SsimParams = SsimParams()) -> float:
    """Mean local SSIM of two (C, H, W) or (H, W) images already in [0, L]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim expects (C, H, W) or (H, W), got {a.shape}")
    if min(a.shape[-2:]) < p.window:
        raise ValueError(f"ssim: {p.window}x{p.window} window larger than image {a.shape[-2:]}")
    k = p.kernel()
    c1 = (p.k1 * p.data_range) ** 2
    c2 = (p.k2 * p.data_range) ** 2
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    var_a = _filter(a * a, k) - mu_a**2
    var_b = _filter(b * b, k) - mu_b**2
    cov = _filter(a * b, k) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean(axis=(-2, -1)).mean())


# ---------------------------------------------------------------------------
# proxy classifier and score
# ---------------------------------------------------------------------------


class TooFewImagesError(ValueError):
    pass


def inception_score_from_probs(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if splits < 1:
        raise ValueError("splits must be >= 1")
    if n < 10 * splits:
        raise TooFewImagesError(f"need at least {10 * splits} images for {splits} splits, got {n}")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass
class ProxyClassifier:
    """Small conv net predicting the palette class of a figure."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    num_classes: int = NUM_PALETTE_CLASSES

    def logits(self, images: Tensor) -> Tensor:
        h = conv_stack(self.tensors, "conv", images, 3, 2, 1, 0.2)
        out = conv(self.tensors, "head", spatial_mean(h))
        return reshape(out, (images.shape[0], self.num_classes))

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            lp = log_softmax(self.logits(Tensor(images[i : i + batch_size], dtype=np.float32)))
            out.append(np.exp(lp.data.astype(np.float64)))
        p = np.concatenate(out)
        return p / p.sum(axis=1, keepdims=True)

    @property
    def num_parameters(self) -> int:
        return count(self.tensors)

    def save(self, path):
        np.savez(path, num_classes=self.num_classes, **{k: t.data for k, t in self.tensors.items()})

    @classmethod
    def load(cls, path) -> ProxyClassifier:
        with np.load(path) as z:
            k = int(z["num_classes"])
            tensors = {name: Tensor(z[name], dtype=z[name].dtype) for name in z.files if name != "num_classes"}
        return cls(tensors, k)


def train_proxy_classifier(dataset: SyntheticDataset | None = None, steps: int = 300, batch_size: int = 32,
                           seed: int = 0, lr: float = 1e-3) -> ProxyClassifier:
    """Fit the classifier on real (x and y) training images; deterministic in ``seed``."""
    if dataset is None:
        dataset = SyntheticDataset(512, 64, seed=seed + 7, split="train")
    rng = np.random.default_rng([seed, 3])
    p: dict[str, Tensor] = {}
    c = 3
    for i, c_out in enumerate((16, 32, 32), start=1):
        add_conv(p, rng, f"conv{i}", c_out, c, 4, np.float32, std=0.1)
        c = c_out
    add_conv(p, rng, "head", NUM_PALETTE_CLASSES, c, 1, np.float32, std=0.1)
    opt = Adam(p, AdamHyper(lr=lr, beta1=0.9, beta2=0.999))
    n = len(dataset)
    for _ in range(steps):
        idx = rng.integers(n, size=batch_size)
        batch = dataset.batch(idx)
        use_y = rng.random(batch_size) < 0.5
        imgs = np.where(use_y[:, None, None, None], batch.y, batch.x)
        onehot = np.eye(NUM_PALETTE_CLASSES)[batch.palette_classes]
        clf = ProxyClassifier(p)
        lp = log_softmax(clf.logits(Tensor(imgs, dtype=np.float32)))
        loss = -mean(lp * Tensor(onehot, dtype=np.float32)) * float(NUM_PALETTE_CLASSES)
        grads = backward(loss, wrt=p.values())
        p = opt.step(p, {k: grads[t] for k, t in p.items() if t in grads})
    return ProxyClassifier({k: t.detach() for k, t in p.items()})


def proxy_inception_score(images: np.ndarray, clf, splits: int = 1) -> tuple[float, float]:
    """``(mean, std)`` across splits of the IS formula under ``clf``."""
    images = np.asarray(images)
    if len(images) < 10 * splits:
        raise TooFewImagesError(f"need at least {10 * splits} images for {splits} splits, got {len(images)}")
    return inception_score_from_probs(clf.predict_proba(images), splits)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Predictor = Callable[[Batch], np.ndarray]


@dataclass
class EvalReport:
    mean_ssim: float
    proxy_is: float
    proxy_is_std: float
    per_sample: list[tuple[int, float]]
    num_samples: int

    def as_text(self) -> str:
        lines = [
            f"# {SSIM_HEADER}",
            "# proxy-IS: Inception Score formula with a synthetic palette classifier; not comparable to published IS",
            f"num_samples: {self.num_samples}",
            f"mean_ssim: {self.mean_ssim!r}",
            f"proxy_is: {self.proxy_is!r}",
            f"proxy_is_std: {self.proxy_is_std!r}",
        ]
        return "\n".join(lines) + "\n"


def generator_predictor(state) -> Predictor:
    from .generator import generate

    dt = state.config.dtype

    def predict(batch: Batch) -> np.ndarray:
        return generate(state.G, Tensor(batch.x, dtype=dt), Tensor(batch.label_map, dtype=dt)).final.data

    return predict


def evaluate(predict: Predictor, test_set, clf=None, out_dir=None, splits: int = 1, batch_size: int = 32,
             params: SsimParams = SsimParams()) -> EvalReport:
    """Mean SSIM and proxy-IS of ``predict`` over ``test_set``.

    ``clf`` may be ``None`` to skip the proxy score (reported as NaN).
    """
    n = len(test_set)
    if n == 0:
        raise ValueError("empty test set")
    per_sample: list[tuple[int, float]] = []
    generated = []
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        batch = test_set.batch(idx) if hasattr(test_set, "batch") else _collate_list(test_set, idx)
        out = np.asarray(predict(batch), dtype=np.float64)
        generated.append(out)
        for i, img, tgt in zip(idx, out, batch.y):
            per_sample.append((i, ssim(to_unit_range(img), to_unit_range(tgt), params)))
    mean_ssim = float(np.mean([s for _, s in per_sample]))
    if clf is not None:
        is_mean, is_std = proxy_inception_score(np.concatenate(generated), clf, splits)
    else:
        is_mean = is_std = float("nan")
    report = EvalReport(mean_ssim, is_mean, is_std, per_sample, n)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ssim_per_sample.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "ssim"])
            for i, s in per_sample:
                w.writerow([i, repr(s)])
        (out / "report.txt").write_text(report.as_text())
    return report


def _collate_list(pairs, idx):
    from .data import collate

    return collate([pairs[i] for i in idx], idx)


def evaluate_checkpoint(path, test_set, clf=None, out_dir=None, splits: int = 1) -> EvalReport:
    from .training import determinism, load_checkpoint

    state = load_checkpoint(path)
    with determinism(True):
        return evaluate(generator_predictor(state), test_set, clf, out_dir, splits)
