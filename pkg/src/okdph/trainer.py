"""Training engines: OKDPH and the Base / DML / EMA / SWA baselines.

All engines share the batch loop in :class:`_Engine`, so runs with equal
seeds see identical shuffles and identical per-model augmentations; only
the per-batch update differs between methods.
"""
from __future__ import annotations

import json
import re
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import AugmentationSpec, AugStream, Dataset, augment, default_augmentations
from .hybrid import (FusionPolicy, HwmState, build_hwm, fuse_students, route_hwm_gradient,
                     sample_dirichlet)
from .losses import cross_entropy, ensemble_logits, kl_with_temperature, soften, total_student_loss
from .nn import NetworkSpec, ParamVector, SgdState

METHODS = ("okdph", "base", "dml", "ema", "swa")
EVAL_CHUNK = 1024


class ConfigError(ValueError):
    """Invalid configuration; reported to the user, never a crash."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Seeds:
    init: int
    dirichlet: int
    augment: int
    shuffle: int

    @classmethod
    def from_root(cls, root: int) -> "Seeds":
        s = np.random.SeedSequence(int(root)).generate_state(4)
        return cls(*(int(v) for v in s))


@dataclass
class TrainConfig:
    method: str = "okdph"
    num_students: int = 2
    omega: float = 0.8
    beta: float | None = None  # None: same as omega
    gamma: float = 0.5
    delta: int = 1
    delta_unit: str = "epoch"
    tau: float = 3.0
    alpha: list | None = None  # None: all ones
    hwm_grad_mode: str = "chain"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list = field(default_factory=list)
    lr_decay: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    seeds: Seeds | None = None  # None: derived from ``seed``
    network: str = "mlp-16-16"
    shared_init: bool = True
    augmentations: list | None = None  # None: defaults for the input kind, HWM last
    snapshot_every: int = 20
    eval_every: int = 1
    ema_decay: float = 0.999
    swa_start: int | None = None  # None: three quarters through training

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)

    def resolved(self) -> "TrainConfig":
        """Copy with every default made explicit."""
        d = asdict(self)
        d["seeds"] = self.seeds or Seeds.from_root(self.seed)
        if d["beta"] is None:
            d["beta"] = self.omega
        if d["alpha"] is None:
            d["alpha"] = [1.0] * self.effective_students()
        if d["swa_start"] is None:
            d["swa_start"] = max(1, (3 * self.epochs) // 4)
        return TrainConfig(**d)

    def effective_students(self) -> int:
        return 1 if self.method in ("ema", "swa") else self.num_students

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.method in METHODS, f"method must be one of {METHODS}, got {self.method!r}")
        need(self.num_students >= 1, "num_students must be >= 1")
        need(0.0 <= self.omega <= 1.0, f"omega must lie in [0, 1], got {self.omega}")
        need(self.beta is None or self.beta >= 0, f"beta must be >= 0, got {self.beta}")
        need(0.0 <= self.gamma <= 1.0, f"gamma must lie in [0, 1], got {self.gamma}")
        need(self.delta >= 1, f"delta must be >= 1, got {self.delta}")
        need(self.delta_unit in ("epoch", "batch"), "delta_unit must be 'epoch' or 'batch'")
        need(self.tau > 0, f"tau must be positive, got {self.tau}")
        need(self.hwm_grad_mode in ("chain", "full"), "hwm_grad_mode must be 'chain' or 'full'")
        need(self.lr >= 0 and self.momentum >= 0 and self.weight_decay >= 0,
             "lr, momentum and weight_decay must be >= 0")
        need(self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1")
        need(self.eval_every >= 1, "eval_every must be >= 1")
        need(self.snapshot_every >= 0, "snapshot_every must be >= 0")
        need(0.0 <= self.ema_decay <= 1.0, "ema_decay must lie in [0, 1]")
        if self.alpha is not None:
            need(len(self.alpha) == self.effective_students() and all(a > 0 for a in self.alpha),
                 "alpha must hold one positive entry per student")
        if self.augmentations is not None:
            need(len(self.augmentations) >= self.effective_students() + 1,
                 "augmentations must list one pipeline per student plus one for the HWM")


def parse_delta(text) -> tuple[int, str]:
    """'5b' -> (5, 'batch'), '1e' -> (1, 'epoch')."""
    m = re.fullmatch(r"\s*(\d+)\s*([be]?)\s*", str(text))
    if not m:
        raise ConfigError(f"cannot parse fusion interval {text!r}; use e.g. '5b' or '1e'")
    return int(m.group(1)), {"b": "batch", "e": "epoch", "": "epoch"}[m.group(2)]


def build_network(network: str, dataset: Dataset) -> NetworkSpec:
    """``mlp-<h1>-<h2>...`` or ``cnn-<c1>-<c2>...``; input/output sizes come
    from the dataset."""
    kind, *widths = network.split("-")
    try:
        widths = [int(w) for w in widths]
    except ValueError:
        raise ConfigError(f"bad network id {network!r}") from None
    c = dataset.num_classes
    if kind == "mlp":
        d = int(np.prod(dataset.input_shape))
        spec = nn.mlp([d] + widths + [c])
        if len(dataset.input_shape) > 1:
            spec = NetworkSpec((nn.flatten(),) + spec.layers, dataset.input_shape, c)
    elif kind == "cnn":
        if len(dataset.input_shape) != 3:
            raise ConfigError("cnn networks need image inputs (C, H, W)")
        spec = nn.small_cnn(dataset.input_shape, widths or [8], c)
    else:
        raise ConfigError(f"unknown network family {kind!r} in {network!r}")
    try:
        nn.validate(spec)
    except nn.SpecError as e:
        raise ConfigError(f"network {network!r}: {e}") from None
    return spec


# ---------------------------------------------------------------------------
# records


@dataclass
class MetricRow:
    epoch: int
    method: str
    seed: int
    model: str
    train_ce: float
    train_kd: float
    train_hwm_ce: float
    test_acc: float
    wall_s: float


METRICS_HEADER = "epoch,method,seed,model,train_ce,train_kd,train_hwm_ce,test_acc,wall_s"


def fmt(v: float) -> str:
    return f"{v:.17g}"


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def for_model(self, model: str) -> list:
        return [r for r in self.rows if r.model == model]

    def to_csv(self, path, wall_clock: bool = False) -> None:
        """Write the metrics table. Wall times are written as 0 unless
        ``wall_clock`` is set, which keeps the file reproducible byte for byte."""
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(",".join([
                str(r.epoch), r.method, str(r.seed), r.model, fmt(r.train_ce), fmt(r.train_kd),
                fmt(r.train_hwm_ce), fmt(r.test_acc), fmt(r.wall_s if wall_clock else 0.0)]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunMetrics":
        text = Path(path).read_text().splitlines()
        if text[0] != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {text[0]!r}")
        rows = []
        for line in text[1:]:
            e, m, s, model, *nums = line.split(",")
            rows.append(MetricRow(int(e), m, int(s), model, *(float(v) for v in nums)))
        return cls(rows)


@dataclass
class Checkpoint:
    epoch: int
    model: str
    index: int  # student index; HWM and averaged models come after the students
    params: ParamVector
    test_acc: float


@dataclass
class SnapshotLog:
    spec_digest: str
    layout: tuple
    entries: list = field(default_factory=list)  # (batch, tag, values)

    def add(self, batch: int, tag: str, params: ParamVector) -> None:
        if params.layout != self.layout:
            raise nn.LayoutError("snapshot layout differs from log layout")
        self.entries.append((batch, tag, params.values.copy()))

    def tags(self) -> list[str]:
        seen = []
        for _, tag, _ in self.entries:
            if tag not in seen:
                seen.append(tag)
        return seen

    def trajectory(self, tag: str) -> list:
        return [(b, ParamVector(v, self.layout)) for b, t, v in self.entries if t == tag]

    def vectors(self) -> list[ParamVector]:
        return [ParamVector(v, self.layout) for _, _, v in self.entries]


@dataclass
class RunResult:
    config: TrainConfig
    spec: NetworkSpec
    metrics: RunMetrics
    snapshots: SnapshotLog
    checkpoints: list
    best: Checkpoint
    final: dict  # model tag -> ParamVector at the end of training


def select_best(metrics: RunMetrics, checkpoints: list) -> Checkpoint:
    """Highest test accuracy; ties go to the earliest epoch, then the lowest
    model index (students before the HWM)."""
    if not checkpoints:
        raise TrainingError("no evaluation happened; nothing to select")
    acc = {(r.epoch, r.model): r.test_acc for r in metrics.rows}
    return min(checkpoints, key=lambda c: (-acc.get((c.epoch, c.model), c.test_acc), c.epoch, c.index))


# ---------------------------------------------------------------------------
# binary formats

CKPT_MAGIC = b"OKDPHCKP"
SNAP_MAGIC = b"OKDPHSNP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _header(magic: bytes, spec: NetworkSpec, layout: tuple, extra: dict) -> bytes:
    desc = json.dumps({"network": spec.to_dict(), "layout": nn.layout_to_json(layout), **extra},
                      sort_keys=True).encode()
    return magic + struct.pack("<I", FORMAT_VERSION) + spec.digest().encode() + struct.pack("<I", len(desc)) + desc


def _read_header(blob: bytes, magic: bytes, path) -> tuple[NetworkSpec, tuple, dict, int]:
    if len(blob) < 8 + 4 + 64 + 4 or blob[:8] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    digest = blob[12:76].decode("ascii", errors="replace")
    (n,) = struct.unpack("<I", blob[76:80])
    try:
        desc = json.loads(blob[80:80 + n])
        spec = NetworkSpec.from_dict(desc["network"])
        layout = nn.layout_from_json(desc["layout"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupted header ({e})") from None
    if spec.digest() != digest:
        raise FormatError(f"{path}: network hash in header does not match embedded network")
    if layout != nn.make_layout(spec):
        raise FormatError(f"{path}: layout descriptor does not match network")
    return spec, layout, desc, 80 + n


def save_checkpoint(path, spec: NetworkSpec, ckpt: Checkpoint) -> None:
    extra = {"model": ckpt.model, "epoch": ckpt.epoch, "test_acc": ckpt.test_acc}
    blob = _header(CKPT_MAGIC, spec, ckpt.params.layout, extra)
    Path(path).write_bytes(blob + ckpt.params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, Checkpoint]:
    blob = Path(path).read_bytes()
    spec, layout, desc, off = _read_header(blob, CKPT_MAGIC, path)
    n = sum(s.length for s in layout)
    if len(blob) - off != 8 * n:
        raise FormatError(f"{path}: expected {n} parameters, found {(len(blob) - off) / 8:g}")
    values = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    return spec, Checkpoint(desc["epoch"], desc["model"], -1, ParamVector(values, layout), desc["test_acc"])


def save_snapshots(path, spec: NetworkSpec, log: SnapshotLog) -> None:
    parts = [_header(SNAP_MAGIC, spec, log.layout, {"count": len(log.entries)})]
    for batch, tag, values in log.entries:
        t = tag.encode()
        parts.append(struct.pack("<qI", batch, len(t)) + t + values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_snapshots(path) -> tuple[NetworkSpec, SnapshotLog]:
    blob = Path(path).read_bytes()
    spec, layout, desc, off = _read_header(blob, SNAP_MAGIC, path)
    n = sum(s.length for s in layout)
    log = SnapshotLog(spec.digest(), layout)
    try:
        for _ in range(desc["count"]):
            batch, tl = struct.unpack_from("<qI", blob, off)
            off += 12
            tag = blob[off:off + tl].decode()
            off += tl
            values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            log.entries.append((batch, tag, values))
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated snapshot data ({e})") from None
    return spec, log


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(spec: NetworkSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    return np.concatenate([nn.forward(spec, params, x[i:i + EVAL_CHUNK])
                           for i in range(0, len(x), EVAL_CHUNK)])


def accuracy_of_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(z.argmax(axis=1) == y))


def evaluate(spec: NetworkSpec, params: ParamVector, dataset: Dataset) -> float:
    return accuracy_of_logits(predict(spec, params, dataset.x), dataset.y)


def dataset_loss(spec: NetworkSpec, params: ParamVector, dataset: Dataset,
                 batch_size: int = EVAL_CHUNK) -> float:
    """Mean cross-entropy over the whole dataset (no augmentation)."""
    total = 0.0
    for i in range(0, len(dataset), batch_size):
        z = nn.forward(spec, params, dataset.x[i:i + batch_size])
        loss, _ = cross_entropy(z, dataset.y[i:i + batch_size])
        total += loss * len(z)
    return total / len(dataset)


def ema_update(shadow: np.ndarray, current: np.ndarray, decay: float) -> np.ndarray:
    return decay * shadow + (1.0 - decay) * current


class RunningAverage:
    """Equal-weight running mean of parameter vectors."""

    def __init__(self):
        self.count = 0
        self.mean = None

    def update(self, values: np.ndarray) -> None:
        self.count += 1
        if self.mean is None:
            self.mean = values.copy()
        else:
            self.mean = self.mean + (values - self.mean) / self.count


# ---------------------------------------------------------------------------
# engines


class _Engine:
    method = ""

    def __init__(self, config: TrainConfig, train: Dataset, test: Dataset):
        config.validate()
        self.cfg = cfg = config.resolved()
        self.train, self.test = train, test
        self.spec = build_network(cfg.network, train)
        if test.num_classes != train.num_classes or test.input_shape != train.input_shape:
            raise ConfigError("train and test splits disagree on classes or input shape")
        self.M = cfg.effective_students()
        self.bpe = -(-len(train) // cfg.batch_size)
        if cfg.augmentations is None:
            self.augs = default_augmentations(train.kind, self.M)
        else:
            self.augs = [AugmentationSpec.parse(a) for a in cfg.augmentations[:self.M + 1]]
        self.students = [nn.init_network(self.spec, self._init_seed(m)) for m in range(self.M)]
        self.sgd = [SgdState.for_params(p, cfg.lr, cfg.momentum, cfg.weight_decay) for p in self.students]
        self.log = SnapshotLog(self.spec.digest(), self.students[0].layout)
        self.metrics = RunMetrics()
        self.checkpoints = []
        self.t = 0

    def _init_seed(self, m: int) -> int:
        if self.cfg.shared_init:
            return self.cfg.seeds.init
        return int(np.random.SeedSequence([self.cfg.seeds.init, m]).generate_state(1)[0])

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seeds.shuffle, epoch]))
        return rng.permutation(len(self.train))

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch > m for m in self.cfg.lr_milestones)
        return self.cfg.lr * self.cfg.lr_decay ** drops

    def view(self, slot: int, idx: np.ndarray) -> np.ndarray:
        return augment(self.train.x[idx], idx, self.augs[slot], self.streams[slot])

    # hooks --------------------------------------------------------------
    def snapshot_models(self) -> list:
        return [(f"s{m + 1}", p) for m, p in enumerate(self.students)]

    def step(self, idx: np.ndarray, acc: dict) -> None:
        raise NotImplementedError

    def eval_models(self) -> list:
        """(tag, index, params-or-None, test logits)."""
        out = []
        for m, p in enumerate(self.students):
            out.append((f"s{m + 1}", m, p, predict(self.spec, p, self.test.x)))
        return out

    def end_epoch(self, epoch: int) -> None:
        pass

    # loop ---------------------------------------------------------------
    def _snapshot(self) -> None:
        for tag, p in self.snapshot_models():
            self.log.add(self.t, tag, p)

    def run(self) -> RunResult:
        cfg = self.cfg
        start = time.perf_counter()
        self._snapshot()
        last_snap = 0
        for epoch in range(1, cfg.epochs + 1):
            for s in self.sgd:
                s.lr = self.lr_at(epoch)
            self.streams = [AugStream(cfg.seeds.augment, slot, epoch, len(self.train), self.train.input_shape)
                            for slot in range(self.M + 1)]
            self.epoch = epoch
            acc: dict = {}
            order = self.order(epoch)
            for lo in range(0, len(self.train), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                self.t += 1
                try:
                    # non-finite values are detected explicitly and reported with the batch
                    with np.errstate(over="ignore", invalid="ignore"):
                        self.step(idx, acc)
                except (FloatingPointError, ValueError, nn.LayoutError) as e:
                    raise TrainingError(f"batch {self.t} (epoch {epoch}): {e}") from e
                if cfg.snapshot_every and self.t % cfg.snapshot_every == 0:
                    self._snapshot()
                    last_snap = self.t
            self.end_epoch(epoch)
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                self._evaluate(epoch, acc, time.perf_counter() - start)
        if last_snap != self.t:
            self._snapshot()
        best = select_best(self.metrics, self.checkpoints)
        final = {tag: p for tag, p in self.snapshot_models()}
        return RunResult(cfg, self.spec, self.metrics, self.log, self.checkpoints, best, final)

    def _evaluate(self, epoch: int, acc: dict, wall: float) -> None:
        n = len(self.train)
        results = self.eval_models()
        for tag, index, params, logits in results:
            test_acc = accuracy_of_logits(logits, self.test.y)
            sums = acc.get(tag, {})
            self.metrics.rows.append(MetricRow(
                epoch, self.method, self.cfg.seed, tag, sums.get("ce", 0.0) / n,
                sums.get("kd", 0.0) / n, sums.get("hwm_ce", 0.0) / n, test_acc, max(wall, 1e-9)))
            if params is not None:
                self.checkpoints.append(Checkpoint(epoch, tag, index, params, test_acc))

    @staticmethod
    def _add(acc: dict, tag: str, key: str, value: float, n: int) -> None:
        acc.setdefault(tag, {}).setdefault(key, 0.0)
        acc[tag][key] += value * n


class BaseEngine(_Engine):
    """Independent students trained with cross-entropy only."""

    method = "base"

    def student_logits(self, idx):
        xs = [self.view(m, idx) for m in range(self.M)]
        fw = [nn.forward_with_cache(self.spec, p, x) for p, x in zip(self.students, xs)]
        return xs, [z for z, _ in fw], [c for _, c in fw]

    def step(self, idx, acc):
        y = self.train.y[idx]
        xs, zs, caches = self.student_logits(idx)
        for m in range(self.M):
            ce, g = cross_entropy(zs[m], y)
            self._add(acc, f"s{m + 1}", "ce", ce, len(idx))
            grad = nn.backward(self.spec, self.students[m], xs[m], g, caches[m])
            self.students[m] = nn.sgd_step(self.students[m], grad, self.sgd[m])
        self._add(acc, "ensemble", "ce", cross_entropy(sum(zs) / self.M, y)[0], len(idx))

    def eval_models(self):
        out = super().eval_models()
        out.append(("ensemble", self.M, None, sum(o[3] for o in out) / self.M))
        return out


class DmlEngine(BaseEngine):
    """Mutual learning: each student distils from every peer's soft output."""

    method = "dml"

    def step(self, idx, acc):
        cfg = self.cfg
        y = self.train.y[idx]
        xs, zs, caches = self.student_logits(idx)
        soft = [soften(z, cfg.tau) for z in zs]
        grads_z = []
        for m in range(self.M):
            ce, g = cross_entropy(zs[m], y)
            self._add(acc, f"s{m + 1}", "ce", ce, len(idx))
            peers = [j for j in range(self.M) if j != m]
            if peers:
                kd_terms = [kl_with_temperature(soft[m], soft[j], cfg.tau) for j in peers]
                kd = sum(k for k, _ in kd_terms) / len(peers)
                self._add(acc, f"s{m + 1}", "kd", kd, len(idx))
                if cfg.beta:
                    g = g + cfg.beta * (sum(gk for _, gk in kd_terms) / len(peers))
            grads_z.append(g)
        for m in range(self.M):
            grad = nn.backward(self.spec, self.students[m], xs[m], grads_z[m], caches[m])
            self.students[m] = nn.sgd_step(self.students[m], grad, self.sgd[m])
        self._add(acc, "ensemble", "ce", cross_entropy(sum(zs) / self.M, y)[0], len(idx))


@dataclass
class OkdphGradients:
    grads: list
    breakdowns: list
    ensemble: np.ndarray


def okdph_gradients(spec: NetworkSpec, students: list, hwm: HwmState, xs: list, xh: np.ndarray,
                    y: np.ndarray, omega: float, beta: float, tau: float,
                    mode: str = "chain") -> OkdphGradients:
    """Per-student gradients of the hybridized distillation loss for one batch.

    Student m gets the direct gradient of its own loss plus its routed share
    of the HWM cross-entropy gradient. The ensemble target is detached.
    """
    fw = [nn.forward_with_cache(spec, p, x) for p, x in zip(students, xs)]
    zs = [z for z, _ in fw]
    zh, cache_h = nn.forward_with_cache(spec, hwm.params, xh)
    zen = ensemble_logits(zs, zh)
    grads_z, bds = [], []
    g_h = None
    for m, z in enumerate(zs):
        bd, g_m, g_h = total_student_loss(z, zh, zen, y, omega, beta, tau)
        if not np.isfinite(bd.total):
            raise FloatingPointError(f"non-finite loss for student {m + 1}")
        grads_z.append(g_m)
        bds.append(bd)
    routed = None
    if omega < 1.0:
        # the HWM term is identical across students, so one backward pass serves all
        grad_h = nn.backward(spec, hwm.params, xh, g_h, cache_h)
        routed = route_hwm_gradient(grad_h, hwm.weights, mode)
    grads = []
    for m, p in enumerate(students):
        grad = nn.backward(spec, p, xs[m], grads_z[m], fw[m][1])
        if routed is not None:
            grad = grad.like(grad.values + routed[m].values)
        grads.append(grad)
    return OkdphGradients(grads, bds, zen)


class OkdphEngine(_Engine):
    """Online distillation with parameter hybridization."""

    method = "okdph"

    def __init__(self, config, train, test):
        super().__init__(config, train, test)
        cfg = self.cfg
        self.policy = FusionPolicy(cfg.delta, cfg.delta_unit, cfg.gamma)
        self.dirichlet = np.random.default_rng(cfg.seeds.dirichlet)
        self.hwm = build_hwm(self.students, sample_dirichlet(cfg.alpha, self.dirichlet, 0), 0)
        self.fusions = 0

    def step(self, idx, acc):
        cfg, M = self.cfg, self.M
        n = len(idx)
        y = self.train.y[idx]
        xs = [self.view(m, idx) for m in range(M)]
        xh = self.view(M, idx)
        out = okdph_gradients(self.spec, self.students, self.hwm, xs, xh, y, cfg.omega, cfg.beta, cfg.tau,
                              cfg.hwm_grad_mode)
        for m, bd in enumerate(out.breakdowns):
            tag = f"s{m + 1}"
            self._add(acc, tag, "ce", bd.ce_student, n)
            self._add(acc, tag, "kd", bd.kd, n)
            self._add(acc, tag, "hwm_ce", bd.ce_hwm, n)
        self._add(acc, "hwm", "ce", bd.ce_hwm, n)
        self._add(acc, "hwm", "hwm_ce", bd.ce_hwm, n)
        self._add(acc, "ensemble", "ce", cross_entropy(out.ensemble, y)[0], n)
        for m in range(M):
            self.students[m] = nn.sgd_step(self.students[m], out.grads[m], self.sgd[m])

        self.hwm = build_hwm(self.students, sample_dirichlet(cfg.alpha, self.dirichlet, self.t), self.t)
        self.students, fired = fuse_students(self.students, self.hwm, self.policy, self.t, self.bpe)
        self.fusions += fired

    def eval_models(self):
        out = super().eval_models()
        zh = predict(self.spec, self.hwm.params, self.test.x)
        out.append(("hwm", self.M, self.hwm.params, zh))
        out.append(("ensemble", self.M + 1, None, ensemble_logits([o[3] for o in out[:-1]], zh)))
        return out


class _SingleStudent(_Engine):
    def step(self, idx, acc):
        y = self.train.y[idx]
        x = self.view(0, idx)
        z, cache = nn.forward_with_cache(self.spec, self.students[0], x)
        ce, g = cross_entropy(z, y)
        self._add(acc, "s1", "ce", ce, len(idx))
        grad = nn.backward(self.spec, self.students[0], x, g, cache)
        self.students[0] = nn.sgd_step(self.students[0], grad, self.sgd[0])


class EmaEngine(_SingleStudent):
    """One student plus an exponential moving average of its parameters,
    updated after every batch."""

    method = "ema"

    def __init__(self, config, train, test):
        super().__init__(config, train, test)
        self.shadow = self.students[0].copy()

    def step(self, idx, acc):
        super().step(idx, acc)
        self.shadow = self.shadow.like(ema_update(self.shadow.values, self.students[0].values, self.cfg.ema_decay))

    def eval_models(self):
        out = super().eval_models()
        out.append(("ema", 1, self.shadow, predict(self.spec, self.shadow, self.test.x)))
        return out


class SwaEngine(_SingleStudent):
    """One student plus an equal-weight average of its epoch-end parameters
    from ``swa_start`` on."""

    method = "swa"

    def __init__(self, config, train, test):
        super().__init__(config, train, test)
        self.average = RunningAverage()

    def end_epoch(self, epoch):
        if epoch >= self.cfg.swa_start:
            self.average.update(self.students[0].values)

    def eval_models(self):
        out = super().eval_models()
        if self.average.count:
            p = self.students[0].like(self.average.mean.copy())
            out.append(("swa", 1, p, predict(self.spec, p, self.test.x)))
        return out


ENGINES = {"okdph": OkdphEngine, "base": BaseEngine, "dml": DmlEngine, "ema": EmaEngine, "swa": SwaEngine}


def _run(method: str, config: TrainConfig, train: Dataset, test: Dataset) -> RunResult:
    if config.method != method:
        config = TrainConfig(**{**asdict(config), "method": method, "seeds": config.seeds})
    return ENGINES[method](config, train, test).run()


def okdph_train(config, train, test) -> RunResult:
    return _run("okdph", config, train, test)


def baseline_base(config, train, test) -> RunResult:
    return _run("base", config, train, test)


def baseline_dml(config, train, test) -> RunResult:
    return _run("dml", config, train, test)


def baseline_ema(config, train, test) -> RunResult:
    return _run("ema", config, train, test)


def baseline_swa(config, train, test) -> RunResult:
    return _run("swa", config, train, test)


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset) -> RunResult:
    """Run whichever method ``config.method`` names."""
    config.validate()
    return ENGINES[config.method](config, train_set, test_set).run()
