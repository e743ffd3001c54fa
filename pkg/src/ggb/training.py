"""Staged adversarial training, configuration and checkpoints.

One call to :func:`train_step` runs a single generator forward pass and
then five phases in fixed order:

1. G forward on (x, M_c), keeping the graph.
2. Update D on L_D.
3. Update each active guiding block (f, RAPD, NVTD) on its own losses.
4. Update G, minus the layers producing g^N, on L_GGB.
5. Update all of G on L_G, differentiating the phase-1 graph.

Each parameter group (G, D, every GGB) has its own Adam state.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Batch, SyntheticDataset, level_resolution
from .discriminators import (GGB, GlobalDiscriminator, feature_encode, global_score, init_ggb,
                             init_global_discriminator, nvtd_score, rapd_score, residual_features)
from .generator import GeneratorParams, final_stage_names, generate, init_generator
from .losses import (LevelLosses, LossWeights, ScoreDomainError, loss_discriminator, loss_generator_total,
                     loss_ggb_total, loss_nvtd_discriminator, loss_nvtd_generator, loss_rapd_discriminator,
                     loss_rapd_generator, loss_realism, loss_rec_level)
from .optim import Adam, AdamHyper, AdamState
from .tensor import Tensor, backward, downsample

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
# fields that only change run length or bookkeeping; excluded from the config hash
_RUN_FIELDS = ("steps", "epochs", "log_interval", "checkpoint_interval", "sample_interval", "deterministic")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    resolution: int = 64
    depth: int = 6
    active_levels: tuple[int, ...] | None = None
    num_ggbs: int | None = None
    disable_all_ggbs: bool = False
    disable_rapd: bool = False
    disable_nvtd: bool = False
    batch_size: int = 8
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_real: float = 0.02
    lambda_rapd: float = 0.01
    lambda_nvtd: float = 0.01
    steps: int = 500
    epochs: int | None = None
    num_pairs: int = 2000
    seed: int = 0
    data_seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    g_base: int = 16
    g_cap: int = 64
    d_base: int = 16
    d_cap: int = 64
    ggb_feat: tuple[int, int] = (16, 32)
    ggb_disc: int = 32
    log_interval: int = 1
    checkpoint_interval: int = 0
    sample_interval: int = 0

    def __post_init__(self):
        self.ggb_feat = tuple(int(c) for c in self.ggb_feat)
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.resolution % (1 << self.depth):
            raise ConfigError(f"resolution {self.resolution} not divisible by 2^depth = {1 << self.depth}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self._resolve_levels()
        if self.epochs is not None:
            self.steps = self.epochs * (self.num_pairs // self.batch_size)

    def _resolve_levels(self):
        N = self.depth
        if self.disable_all_ggbs:
            if self.active_levels or self.num_ggbs:
                raise ConfigError("disable_all_ggbs conflicts with active_levels/num_ggbs")
            self.active_levels, self.num_ggbs = (), 0
            return
        if self.active_levels is None:
            k = 3 if self.num_ggbs is None else self.num_ggbs
            if not 0 <= k <= N - 1:
                raise ConfigError(f"num_ggbs must be in 0..{N - 1}")
            self.active_levels = tuple(range(N - k, N))
        levels = tuple(sorted({int(n) for n in self.active_levels}))
        if self.num_ggbs is None:
            self.num_ggbs = len(levels)
        if self.num_ggbs != len(levels):
            raise ConfigError(f"num_ggbs={self.num_ggbs} but active_levels={levels}")
        for n in levels:
            if not 1 <= n <= N - 1:
                raise ConfigError(f"GGB level {n} outside 1..{N - 1}")
            size = level_resolution(self.resolution, N, n)
            if size < 4:
                raise ConfigError(f"level {n} is {size} px; the feature encoder needs >= 4")
        self.active_levels = levels
        if not levels:
            self.disable_all_ggbs = True

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_real, self.lambda_rapd, self.lambda_nvtd, frozenset(self.active_levels))

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["active_levels"] = list(self.active_levels)
        d["ggb_feat"] = list(self.ggb_feat)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        if d.get("active_levels") is not None:
            d["active_levels"] = tuple(d["active_levels"])
        if "ggb_feat" in d:
            d["ggb_feat"] = tuple(d["ggb_feat"])
        return cls(**d)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> TrainConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        data.update(overrides or {})
        return cls.from_dict(data)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _RUN_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


class BatchSampler:
    """Epoch-wise shuffled batches; drops the incomplete tail of each epoch."""

    def __init__(self, num_items: int, batch_size: int, rng: np.random.Generator):
        if num_items < batch_size:
            raise ConfigError(f"dataset of {num_items} pairs is smaller than one batch of {batch_size}")
        self.num_items = num_items
        self.batch_size = batch_size
        self.rng = rng
        self.perm = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    def next_indices(self) -> np.ndarray:
        if self.cursor + self.batch_size > len(self.perm):
            self.perm = self.rng.permutation(self.num_items).astype(np.int64)
            self.cursor = 0
        out = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return out


@dataclass
class TrainState:
    config: TrainConfig
    G: GeneratorParams
    D: GlobalDiscriminator
    ggbs: dict[int, GGB]
    opts: dict[str, Adam]
    sampler: BatchSampler
    step: int = 0
    versions: dict[str, int] = field(default_factory=dict)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out = {"G": self.G.tensors, "D": self.D.tensors}
        out.update({f"ggb{n}": g.tensors for n, g in self.ggbs.items()})
        return out

    def parameter_snapshot(self) -> dict[str, np.ndarray]:
        return {f"{g}/{k}": t.data.copy() for g, ts in self.groups().items() for k, t in ts.items()}


def init_state(config: TrainConfig, num_items: int | None = None) -> TrainState:
    dt = config.dtype
    rng = np.random.default_rng([config.seed, 1])
    G = init_generator(rng, config.depth, base=config.g_base, cap=config.g_cap, dtype=dt)
    D = init_global_discriminator(rng, base=config.d_base, cap=config.d_cap, dtype=dt)
    ggbs = {}
    for n in config.active_levels:
        ggbs[n] = init_ggb(rng, n, feat_channels=config.ggb_feat, disc_channels=config.ggb_disc,
                           use_rapd=not config.disable_rapd, use_nvtd=not config.disable_nvtd,
                           lambda_rapd=config.lambda_rapd, lambda_nvtd=config.lambda_nvtd, dtype=dt)
    hyper = config.adam
    opts = {"G": Adam(G.tensors, hyper), "D": Adam(D.tensors, hyper)}
    opts.update({f"ggb{n}": Adam(g.tensors, hyper) for n, g in ggbs.items()})
    sampler = BatchSampler(num_items or config.num_pairs, config.batch_size, np.random.default_rng([config.data_seed, 2]))
    state = TrainState(config, G, D, ggbs, opts, sampler)
    state.versions = {k: 0 for k in state.groups()}
    return state


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    phases: list[tuple[str, str]]
    batch_hash: str = ""

    def csv_row(self, columns: Sequence[str]) -> list[str]:
        row = []
        for c in columns:
            v = self.step if c == "step" else self.losses.get(c)
            row.append("" if v is None else repr(v))
        return row


def metric_columns(config: TrainConfig) -> list[str]:
    cols = ["step", "L_D", "l_real", "l_rec_N", "L_G", "L_GGB"]
    for n in config.active_levels:
        if not config.disable_rapd:
            cols.append(f"L_RAPD_{n}")
        if not config.disable_nvtd:
            cols.append(f"L_NVTD_{n}")
        cols.append(f"l_rec_{n}")
    return cols


def batch_hash(batch: Batch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.indices).tobytes())
    h.update(np.ascontiguousarray(batch.x).tobytes())
    return h.hexdigest()[:16]


Observer = Callable[[str, str, TrainState], None]


def _check_finite(name: str, value: Tensor, step: int) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise NonFiniteLossError(f"step {step}: loss {name} = {v}; aborting")
    return v


def _update(state: TrainState, group: str, params: dict[str, Tensor], grads: dict[str, np.ndarray],
            phase: str, report: StepReport) -> dict[str, Tensor]:
    new = state.opts[group].step(params, grads)
    state.versions[group] = state.versions.get(group, 0) + 1
    report.phases.append((phase, group))
    return new


def _grads_by_name(named: dict[str, Tensor], gmap: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    # parameters the loss cannot reach get no gradient and are not stepped
    return {k: gmap[t] for k, t in named.items() if t in gmap}


def train_step(state: TrainState, batch: Batch, observer: Observer | None = None) -> StepReport:
    """Run one staged iteration on ``batch``, updating ``state`` in place.

    Raises :class:`NonFiniteLossError` if any loss, or any score feeding a
    loss, is NaN or infinite. Groups updated before the failure keep their
    update; the step counter does not advance.
    """
    try:
        return _train_step(state, batch, observer)
    except ScoreDomainError as e:
        raise NonFiniteLossError(f"step {state.step + 1}: {e}") from e


def _train_step(state: TrainState, batch: Batch, observer: Observer | None) -> StepReport:
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = state.config
    dt = cfg.dtype
    N = cfg.depth
    step = state.step + 1
    report = StepReport(step, {}, [], batch_hash(batch))
    losses = report.losses

    def notify(phase, group):
        if observer is not None:
            observer(phase, group, state)

    x = Tensor(batch.x, dtype=dt)
    y = Tensor(batch.y, dtype=dt)
    m = Tensor(batch.label_map, dtype=dt)
    levels = {n: (downsample(x, 1 << (N - n)), downsample(y, 1 << (N - n))) for n in cfg.active_levels}

    # phase 1: single generator forward; the graph is reused by phases 4 and 5
    g_params = dict(state.G.tensors)
    trace = generate(state.G, x, m)
    x_hat = trace.final
    notify("generate", "G")

    # phase 2: global discriminator
    d_params = dict(state.D.tensors)
    L_D = loss_discriminator(global_score(state.D, y), global_score(state.D, x_hat.detach()))
    losses["L_D"] = _check_finite("L_D", L_D, step)
    grads = _grads_by_name(d_params, backward(L_D, wrt=d_params.values()))
    state.D = state.D.replace(_update(state, "D", d_params, grads, "D", report))
    notify("D", "D")

    # phase 3: guiding-block discriminators and their feature encoders
    for n in cfg.active_levels:
        ggb = state.ggbs[n]
        xn, yn = levels[n]
        fake = trace.images[n].detach()
        total = None
        if ggb.use_rapd:
            L = loss_rapd_discriminator(rapd_score(ggb, feature_encode(ggb, yn)),
                                        rapd_score(ggb, feature_encode(ggb, fake)))
            losses[f"L_RAPD_{n}"] = _check_finite(f"L_RAPD_{n}", L, step)
            total = L
        if ggb.use_nvtd:
            L = loss_nvtd_discriminator(nvtd_score(ggb, residual_features(ggb, xn, yn)),
                                        nvtd_score(ggb, residual_features(ggb, xn, fake)))
            losses[f"L_NVTD_{n}"] = _check_finite(f"L_NVTD_{n}", L, step)
            total = L if total is None else total + L
        if total is None:
            continue
        params = dict(ggb.tensors)
        grads = _grads_by_name(params, backward(total, wrt=params.values()))
        state.ggbs[n] = ggb.replace(_update(state, f"ggb{n}", params, grads, "GGB", report))
        notify("GGB", f"ggb{n}")

    # phase 4: G except the final stage, against the guiding blocks
    if cfg.active_levels:
        final = set(final_stage_names(N))
        per_level = {}
        for n in cfg.active_levels:
            ggb = state.ggbs[n]
            xn, yn = levels[n]
            img = trace.images[n]
            l_rapd = l_nvtd = None
            if ggb.use_rapd:
                l_rapd = loss_rapd_generator(rapd_score(ggb, feature_encode(ggb, img)))
                losses[f"l_RAPD_{n}"] = _check_finite(f"l_RAPD_{n}", l_rapd, step)
            if ggb.use_nvtd:
                l_nvtd = loss_nvtd_generator(nvtd_score(ggb, residual_features(ggb, xn, img)))
                losses[f"l_NVTD_{n}"] = _check_finite(f"l_NVTD_{n}", l_nvtd, step)
            l_rec = loss_rec_level(yn, img)
            losses[f"l_rec_{n}"] = _check_finite(f"l_rec_{n}", l_rec, step)
            per_level[n] = LevelLosses(l_rapd, l_nvtd, l_rec)
        L_GGB = loss_ggb_total(per_level, cfg.loss_weights)
        losses["L_GGB"] = _check_finite("L_GGB", L_GGB, step)
        partial = {k: t for k, t in g_params.items() if k not in final}
        grads = _grads_by_name(partial, backward(L_GGB, wrt=partial.values()))
        current = dict(state.G.tensors)
        updated = _update(state, "G", {k: current[k] for k in partial}, grads, "G-partial", report)
        current.update(updated)
        state.G = state.G.replace(current)
        notify("G-partial", "G")

    # phase 5: all of G against D and the full-resolution reconstruction
    l_real = loss_realism(global_score(state.D, x_hat))
    l_rec_N = loss_rec_level(y, x_hat)
    L_G = loss_generator_total(l_real, l_rec_N, cfg.loss_weights)
    losses["l_real"] = _check_finite("l_real", l_real, step)
    losses["l_rec_N"] = _check_finite("l_rec_N", l_rec_N, step)
    losses["L_G"] = _check_finite("L_G", L_G, step)
    grads = _grads_by_name(g_params, backward(L_G, wrt=g_params.values()))
    state.G = state.G.replace(_update(state, "G", dict(state.G.tensors), grads, "G-full", report))
    notify("G-full", "G")

    state.step = step
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"GGBCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


def _blob(state: TrainState) -> tuple[list[tuple[str, np.ndarray]], dict]:
    arrays: list[tuple[str, np.ndarray]] = []
    adam_t: dict[str, int] = {}
    for group, tensors in state.groups().items():
        opt = state.opts[group]
        for name in sorted(tensors):
            arrays.append((f"param/{group}/{name}", tensors[name].data))
            st = opt.states[name]
            arrays.append((f"adam/{group}/{name}/m", st.m))
            arrays.append((f"adam/{group}/{name}/v", st.v))
            adam_t[f"{group}/{name}"] = st.t
    arrays.append(("sampler/perm", state.sampler.perm))
    meta = {
        "step": state.step,
        "config": state.config.to_dict(),
        "adam_t": adam_t,
        "versions": state.versions,
        "sampler": {"cursor": state.sampler.cursor, "num_items": state.sampler.num_items,
                    "rng": state.sampler.rng.bit_generator.state},
    }
    return arrays, meta


def save_checkpoint(state: TrainState, path) -> Path:
    """Write header, JSON manifest, little-endian payloads and a sha256 trailer."""
    path = Path(path)
    arrays, meta = _blob(state)
    manifest, offset, payload = [], 0, io.BytesIO()
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    header_json = json.dumps({"tensors": manifest, "meta": meta}, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(_HEADER.pack(MAGIC, FORMAT_VERSION, bytes.fromhex(state.config.config_hash()), len(header_json)))
    body.write(header_json)
    body.write(payload.getvalue())
    data = body.getvalue()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data + hashlib.sha256(data).digest())
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], str]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _HEADER.size + 32:
        raise CorruptCheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    data, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(data).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    magic, version, chash, hlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size
    header = json.loads(data[start : start + hlen])
    base = start + hlen
    arrays = {}
    for rec in header["tensors"]:
        buf = data[base + rec["offset"] : base + rec["offset"] + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise CorruptCheckpointError(f"{path}: tensor {rec['name']} truncated")
        arr = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header["meta"], arrays, chash.hex()


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a state. If ``config`` is given its hash must match the file's."""
    meta, arrays, chash = read_checkpoint(path)
    stored = TrainConfig.from_dict(meta["config"])
    if stored.config_hash() != chash:
        raise CorruptCheckpointError(f"{path}: stored config does not match its hash")
    if config is not None and config.config_hash() != chash:
        raise CheckpointVersionError(
            f"{path}: config hash {chash[:12]} does not match the requested config {config.config_hash()[:12]}"
        )
    cfg = config if config is not None else stored
    state = init_state(cfg, meta["sampler"]["num_items"])
    hyper = cfg.adam
    for group, tensors in state.groups().items():
        new = {}
        for name, t in tensors.items():
            key = f"param/{group}/{name}"
            if key not in arrays:
                raise CorruptCheckpointError(f"{path}: missing tensor {key}")
            new[name] = Tensor(arrays[key], requires_grad=True, dtype=t.dtype, name=t.name)
            m, v = arrays[f"adam/{group}/{name}/m"], arrays[f"adam/{group}/{name}/v"]
            m.flags.writeable = v.flags.writeable = False
            state.opts[group].states[name] = AdamState(m, v, meta["adam_t"][f"{group}/{name}"], hyper)
        if group == "G":
            state.G = state.G.replace(new)
        elif group == "D":
            state.D = state.D.replace(new)
        else:
            n = int(group[3:])
            state.ggbs[n] = state.ggbs[n].replace(new)
    state.sampler.perm = arrays["sampler/perm"].astype(np.int64)
    state.sampler.cursor = meta["sampler"]["cursor"]
    state.sampler.rng.bit_generator.state = meta["sampler"]["rng"]
    state.step = meta["step"]
    state.versions = dict(meta["versions"])
    return state


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def determinism(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class RunResult:
    state: TrainState
    reports: list[StepReport]
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


def train_loop(config: TrainConfig, dataset=None, out_dir=None, resume_from=None,
               observer: Observer | None = None, on_step: Callable[[TrainState, StepReport], None] | None = None,
               sample_writer: Callable[[TrainState, Path], None] | None = None) -> RunResult:
    """Train until ``config.steps``; optionally resume from a checkpoint."""
    if dataset is None:
        dataset = SyntheticDataset(config.num_pairs, config.resolution, seed=config.data_seed, split="train")
    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
        state.config = config
    else:
        state = init_state(config, len(dataset))
    out = Path(out_dir) if out_dir is not None else None
    columns = metric_columns(config)
    metrics_path = ckpt_path = None
    writer = fh = batch_log = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.csv"
            append = resume_from is not None and metrics_path.exists()
            fh = open(metrics_path, "a" if append else "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if not append:
                writer.writerow(columns)
            batch_log = open(out / "batches.log", "a" if append else "w")
        except OSError as e:
            raise OSError(f"cannot write run outputs under {out}: {e}") from e
    reports = []
    try:
        with determinism(config.deterministic):
            while state.step < config.steps:
                batch = dataset.batch(state.sampler.next_indices())
                report = train_step(state, batch, observer)
                reports.append(report)
                if writer is not None and (report.step % config.log_interval == 0 or report.step == config.steps):
                    writer.writerow(report.csv_row(columns))
                    batch_log.write(f"{report.step} {report.batch_hash}\n")
                if out is not None and config.checkpoint_interval and report.step % config.checkpoint_interval == 0:
                    save_checkpoint(state, out / f"ckpt_{report.step:06d}.ggb")
                if out is not None and sample_writer is not None and config.sample_interval and \
                        report.step % config.sample_interval == 0:
                    sample_writer(state, out)
                if on_step is not None:
                    on_step(state, report)
                if report.step % 50 == 0:
                    log.info("step %d %s", report.step,
                             " ".join(f"{k}={v:.4f}" for k, v in report.losses.items() if not k.startswith("l_R")))
    finally:
        if fh is not None:
            fh.close()
            batch_log.close()
    if out is not None:
        ckpt_path = save_checkpoint(state, out / "last.ggb")
    return RunResult(state, reports, metrics_path, ckpt_path)
