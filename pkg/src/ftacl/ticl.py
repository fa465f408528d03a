"""Task-incremental continual learning: registry, three training modes, routing, evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, AdapterSet
from .encoder import ASTBackbone, EncoderConfig, LinearHead, forward
from .fileformat import FormatError, load_bundle, save_bundle
from .optim import Adam
from .tensor import NonFiniteError, no_grad
from .tokenizer import TokenizerConfig, token_grid

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainMode(str, Enum):
    MODEL_SEQUENTIAL = "model-seq"
    MODEL_INCREMENTAL = "model-inc"
    ADAPTER_INCREMENTAL = "adapter-inc"


class TrainingDiverged(RuntimeError):
    pass


# Full-scale schedules (epochs, batch size) with Adam at lr 3e-4, kept for reference.
PUBLISHED_SCHEDULES = {"scv2": (5, 128), "esc50": (20, 32), "ave": (15, 12)}
PUBLISHED_LR = 3e-4

# Desk-scale reference: adapters on a randomly initialised frozen backbone need a
# wider bottleneck and a larger step than the pretrained full-scale setting.
REFERENCE_SEED = 7
REFERENCE_OVERRIDES = {"bottleneck": 16, "lr": 1e-3, "epochs": 30, "batch_size": 16, "noise": 0.5}


@dataclass
class TaskSpec:
    task_id: int
    name: str
    n_classes: int
    train_x: np.ndarray  # (N, F, frames)
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        for y in (self.train_y, self.test_y):
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"task {self.task_id}: labels outside [0, {self.n_classes})")
        if len(self.train_x) != len(self.train_y) or len(self.test_x) != len(self.test_y):
            raise ValueError(f"task {self.task_id}: inputs and labels differ in length")


@dataclass
class RunConfig:
    mode: TrainMode = TrainMode.ADAPTER_INCREMENTAL
    seed: int = 7
    freq_bins: int = 46
    frames: int = 56
    d: int = 32
    layers: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    bottleneck: int = 16
    kernel: int = 16
    stride: int = 10
    attention: str = ""  # empty: FTA for adapter-inc, GSA otherwise
    epochs: int = 30
    batch_size: int = 16
    lr: float = PUBLISHED_LR
    dtype: str = "f32"
    # task source: synthetic generator settings, or a feature-file directory when ``data`` is set
    tasks: int = 3
    classes: int = 4
    train_per_class: int = 50
    test_per_class: int = 25
    noise: float = 0.5
    data: str = ""

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        if not self.attention:
            self.attention = "fta" if self.mode is TrainMode.ADAPTER_INCREMENTAL else "gsa"

    @property
    def np_dtype(self):
        return T.DTYPES[self.dtype]

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(self.kernel, self.stride, self.d, 1)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.d, self.heads, self.mlp_ratio, self.attention)

    def synthetic_config(self) -> "SyntheticTaskConfig":
        return SyntheticTaskConfig(
            self.classes, self.train_per_class, self.test_per_class, self.freq_bins, self.frames, self.noise, self.seed
        )

    def to_lines(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            out.append(f"{k}={v.value if isinstance(v, Enum) else v}")
        return out

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = kv.keys() - known.keys()
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, raw in kv.items():
            default = getattr(cls, k, None) if k != "mode" else None
            if k == "mode":
                kwargs[k] = TrainMode(raw)
            elif isinstance(default, bool):
                kwargs[k] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[k] = int(raw)
            elif isinstance(default, float):
                kwargs[k] = float(raw)
            else:
                kwargs[k] = raw
        return cls(**kwargs)


@dataclass
class TrainLog:
    task_id: int
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


@dataclass
class TaskUnit:
    """Per-task state routed to by task id."""

    name: str
    n_classes: int
    head: LinearHead
    adapters: AdapterSet | None = None
    backbone: ASTBackbone | None = None  # model-incremental only
    trained: bool = False


class TiclRun:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.grid = token_grid(cfg.freq_bins, cfg.frames, cfg.tokenizer_config())
        self.backbone = self._new_backbone() if cfg.mode is not TrainMode.MODEL_INCREMENTAL else None
        if cfg.mode is TrainMode.ADAPTER_INCREMENTAL:
            self.backbone.requires_grad_(False)
        self.units: dict[int, TaskUnit] = {}
        self.order: list[int] = []
        self.accuracy: dict[tuple[int, int], float] = {}
        self._test_sets: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def mode(self) -> TrainMode:
        return self.cfg.mode

    def _new_backbone(self) -> ASTBackbone:
        rng = np.random.default_rng([self.cfg.seed, 0])
        c = self.cfg
        return ASTBackbone(c.tokenizer_config(), c.encoder_config(), self.grid, rng, c.np_dtype)

    # -- registry -----------------------------------------------------------

    def register_task(self, task_id: int, name: str, n_classes: int) -> TaskUnit:
        if task_id in self.units:
            raise ValueError(f"task id {task_id} already registered")
        c = self.cfg
        rng = np.random.default_rng([c.seed, 1, task_id])
        head = LinearHead(c.d, n_classes, rng, c.np_dtype)
        unit = TaskUnit(name, n_classes, head)
        if c.mode is TrainMode.ADAPTER_INCREMENTAL:
            unit.adapters = AdapterSet(AdapterConfig(c.d, c.bottleneck), c.layers, rng, c.np_dtype)
        elif c.mode is TrainMode.MODEL_INCREMENTAL:
            unit.backbone = self._new_backbone()
        self.units[task_id] = unit
        self.order.append(task_id)
        return unit

    def register(self, spec: TaskSpec) -> TaskUnit:
        """Register ``spec`` and keep only its test split for later evaluation."""
        unit = self.register_task(spec.task_id, spec.name, spec.n_classes)
        self._test_sets[spec.task_id] = (spec.test_x, spec.test_y)
        return unit

    def set_test_data(self, task_id: int, x: np.ndarray, y: np.ndarray) -> None:
        self._unit(task_id)
        self._test_sets[task_id] = (x, y)

    def _unit(self, task_id: int) -> TaskUnit:
        if task_id not in self.units:
            raise KeyError(f"unknown task id {task_id}")
        return self.units[task_id]

    def _parts(self, task_id: int):
        u = self._unit(task_id)
        bb = u.backbone if self.mode is TrainMode.MODEL_INCREMENTAL else self.backbone
        return bb, u.head, u.adapters

    def trainable_parameters(self, task_id: int) -> list[T.Tensor]:
        bb, head, adapters = self._parts(task_id)
        if self.mode is TrainMode.ADAPTER_INCREMENTAL:
            return adapters.parameters() + head.parameters()
        return bb.parameters() + head.parameters()

    # -- training -----------------------------------------------------------

    def train_task(self, task_id: int, x: np.ndarray, y: np.ndarray, epochs=None, batch_size=None, lr=None) -> TrainLog:
        """Train task ``task_id`` on its own data only; optimizer state is fresh per task."""
        c = self.cfg
        epochs = c.epochs if epochs is None else epochs
        batch_size = c.batch_size if batch_size is None else batch_size
        lr = c.lr if lr is None else lr
        if len(x) == 0:
            raise ValueError(f"task {task_id}: empty training set")
        bb, head, adapters = self._parts(task_id)
        params = self.trainable_parameters(task_id)
        for p in params:
            p.requires_grad = True
        opt = Adam(params, lr=lr)
        rng = np.random.default_rng([c.seed, 2, task_id])
        x = np.asarray(x, dtype=c.np_dtype)
        y = np.asarray(y, dtype=np.int64)
        tlog = TrainLog(task_id)
        for epoch in range(epochs):
            perm = rng.permutation(len(x))
            total = 0.0
            for s in range(0, len(x), batch_size):
                idx = perm[s : s + batch_size]
                opt.zero_grad()
                try:
                    loss = T.cross_entropy(forward(bb, head, x[idx], adapters), y[idx])
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"task {task_id} epoch {epoch}: {exc}") from exc
                opt.step()
                total += float(loss.data) * len(idx)
            tlog.losses.append(total / len(x))
            log.debug("task %d epoch %d loss %.4f", task_id, epoch, tlog.losses[-1])
        if self.mode is TrainMode.ADAPTER_INCREMENTAL:
            bb.requires_grad_(False)
        self._unit(task_id).trained = True
        tlog.train_accuracy = self.accuracy_on(task_id, x, y)
        return tlog

    # -- inference ----------------------------------------------------------

    def route_and_predict(self, x, task_id: int, batch_size: int = 64) -> np.ndarray:
        """Logits from the task's routed adapters/head (or model); x is (F, frames) or (N, F, frames)."""
        bb, head, adapters = self._parts(task_id)
        arr = np.asarray(getattr(x, "values", x), dtype=self.cfg.np_dtype)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        outs = []
        with no_grad():
            for s in range(0, len(arr), batch_size):
                outs.append(forward(bb, head, arr[s : s + batch_size], adapters).data)
        logits = np.concatenate(outs, axis=0)
        return logits[0] if single else logits

    def accuracy_on(self, task_id: int, x, y) -> float:
        pred = self.route_and_predict(x, task_id).argmax(axis=1)
        return float((pred == np.asarray(y)).mean())

    def evaluate_stage(self) -> dict[int, float]:
        """Evaluate every task trained so far on its held test set; record as a matrix row."""
        after = self.order_trained()[-1]
        row = {}
        for j in self.order_trained():
            x, y = self._test_sets[j]
            row[j] = self.accuracy[(after, j)] = self.accuracy_on(j, x, y)
        return row

    def order_trained(self) -> list[int]:
        return [i for i in self.order if self.units[i].trained]

    # -- checkpoints --------------------------------------------------------

    def save(self, run_dir) -> dict[str, int]:
        """Write config, weights and the matrix report; returns bytes per file."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        c = self.cfg
        registry = ",".join(f"{i}:{self.units[i].name}:{self.units[i].n_classes}" for i in self.order)
        trained = ",".join(str(i) for i in self.order_trained())
        accuracy = ",".join(f"{i}:{j}:{v!r}" for (i, j), v in sorted(self.accuracy.items()))
        lines = c.to_lines() + [f"registry={registry}", f"trained={trained}", f"accuracy={accuracy}"]
        (run_dir / "config.txt").write_text("\n".join(lines) + "\n")
        sizes = {}
        if self.backbone is not None:
            sizes["backbone.ftck"] = save_bundle(
                run_dir / "backbone.ftck", self.backbone.state_dict(), self._backbone_meta()
            )
        for i in self.order:
            u = self.units[i]
            state = {f"head.{k}": v for k, v in u.head.state_dict().items()}
            if u.adapters is not None:
                state.update({f"adapters.{k}": v for k, v in u.adapters.state_dict().items()})
            if u.backbone is not None:
                state.update({f"backbone.{k}": v for k, v in u.backbone.state_dict().items()})
            name = f"task_{i}.ftck"
            sizes[name] = save_bundle(run_dir / name, state, self._task_meta(i))
        (run_dir / "matrix.txt").write_text(matrix_report(self))
        return sizes

    def _backbone_meta(self) -> dict:
        c = self.cfg
        return {"format_version": CHECKPOINT_FORMAT, "kind": "backbone", "d": c.d, "layers": c.layers, "heads": c.heads}

    def _task_meta(self, task_id: int) -> dict:
        u = self.units[task_id]
        return {
            "format_version": CHECKPOINT_FORMAT,
            "kind": self.mode.value,
            "task_id": task_id,
            "task_name": u.name,
            "d": self.cfg.d,
            "bottleneck": self.cfg.bottleneck,
            "classes": u.n_classes,
        }

    @classmethod
    def load(cls, run_dir) -> "TiclRun":
        run_dir = Path(run_dir)
        kv = read_kv(run_dir / "config.txt")
        registry = kv.pop("registry", "")
        trained = {int(t) for t in kv.pop("trained", "").split(",") if t}
        accuracy = kv.pop("accuracy", "")
        run = cls(RunConfig.from_mapping(kv))
        if run.backbone is not None:
            state, meta = load_bundle(run_dir / "backbone.ftck")
            _check_version(meta)
            run.backbone.load_state_dict(state)
        for entry in filter(None, registry.split(",")):
            sid, name, ncls = entry.split(":")
            tid = int(sid)
            u = run.register_task(tid, name, int(ncls))
            state, meta = load_bundle(run_dir / f"task_{tid}.ftck")
            _check_version(meta)
            u.head.load_state_dict(_strip(state, "head."))
            if u.adapters is not None:
                u.adapters.load_state_dict(_strip(state, "adapters."))
            if u.backbone is not None:
                u.backbone.load_state_dict(_strip(state, "backbone."))
            u.trained = tid in trained
        for entry in filter(None, accuracy.split(",")):
            i, j, v = entry.split(":")
            run.accuracy[(int(i), int(j))] = float(v)
        if run.mode is TrainMode.ADAPTER_INCREMENTAL:
            run.backbone.requires_grad_(False)
        return run


def _strip(state: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}


def _check_version(meta: dict) -> None:
    if meta.get("format_version") != str(CHECKPOINT_FORMAT):
        raise FormatError(f"checkpoint format {meta.get('format_version')} unsupported")


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(run: TiclRun, path) -> dict[str, int]:
    return run.save(path)


def load_checkpoint(path) -> TiclRun:
    return TiclRun.load(path)


# -- evaluation summaries ---------------------------------------------------


def evaluate_matrix(run: TiclRun) -> tuple[list[list[float | None]], float]:
    """Accuracy matrix A[i][j] (after task i, on task j; None above the diagonal) and forgetting.

    Forgetting is the largest drop A[j][j] - A[i][j] over all j < i; 0.0 with one task.
    """
    order = run.order_trained()
    if not order:
        raise ValueError("no task trained yet")
    A = [[run.accuracy.get((i, j)) if jj <= ii else None for jj, j in enumerate(order)] for ii, i in enumerate(order)]
    drops = [A[j][j] - A[i][j] for i in range(len(order)) for j in range(i)]
    return A, (max(drops) if drops else 0.0)


def matrix_report(run: TiclRun) -> str:
    order = run.order_trained()
    lines = [f"mode={run.mode.value}", f"seed={run.cfg.seed}", f"attention={run.cfg.attention}"]
    lines.append("tasks=" + ",".join(f"{i}:{run.units[i].name}" for i in run.order))
    if not order:
        return "\n".join(lines) + "\n"
    A, forgetting = evaluate_matrix(run)
    lines.append("# rows: after training task; columns: evaluated task")
    lines.append("after\\eval " + " ".join(f"{f'task{j}':>9}" for j in order))
    for i, row in zip(order, A):
        cells = " ".join(f"{v:9.6f}" if v is not None else f"{'-':>9}" for v in row)
        lines.append(f"{f'task{i}':<10} {cells}")
    lines.append(f"forgetting={forgetting:.6f}")
    lines.append(f"final_mean_accuracy={np.mean([v for v in A[-1] if v is not None]):.6f}")
    return "\n".join(lines) + "\n"


def parse_matrix_report(text: str) -> dict[tuple[int, int], float]:
    acc = {}
    cols: list[int] = []
    for line in text.splitlines():
        if line.startswith("after\\eval"):
            cols = [int(tok[4:]) for tok in line.split()[1:]]
        elif line.startswith("task") and cols:
            parts = line.split()
            i = int(parts[0][4:])
            for j, cell in zip(cols, parts[1:]):
                if cell != "-":
                    acc[(i, j)] = float(cell)
    return acc


# -- synthetic tasks ----------------------------------------------------------

FAMILIES = ("tones", "chirps", "checkerboards")


@dataclass(frozen=True)
class SyntheticTaskConfig:
    classes: int = 4
    train_per_class: int = 50
    test_per_class: int = 25
    freq_bins: int = 46
    frames: int = 56
    noise: float = 0.5
    seed: int = 7
    families: tuple[str, ...] = FAMILIES


def _pattern(family: str, c: int, variant: int, F: int, N: int) -> np.ndarray:
    f = np.arange(F)[:, None].astype(np.float64)
    t = np.arange(N)[None, :].astype(np.float64)
    if family == "tones":
        centre = (c + 1 + 0.5 * (variant % 2)) * F / 5.5
        return np.exp(-0.5 * ((f - centre) / 2.0) ** 2) * np.ones_like(t)
    if family == "chirps":
        slope = (-1) ** c * (0.2 + 0.5 * (c // 2)) * (1 + 0.2 * variant)
        start = F / 2 - slope * N / 2
        return np.exp(-0.5 * ((f - (start + slope * t)) / 3.0) ** 2)
    if family == "checkerboards":
        pf, pt = [(8, 8), (8, 16), (16, 8), (12, 12), (6, 10), (10, 6)][(c + 2 * variant) % 6]
        return (np.sign(np.sin(2 * np.pi * (f + 0.5) / pf) * np.sin(2 * np.pi * (t + 0.5) / pt)) + 1) / 2
    raise ValueError(f"unknown pattern family {family!r}")


def class_patterns(cfg: SyntheticTaskConfig, task_index: int) -> np.ndarray:
    family = cfg.families[task_index % len(cfg.families)]
    variant = task_index // len(cfg.families)
    return np.stack([_pattern(family, c, variant, cfg.freq_bins, cfg.frames) for c in range(cfg.classes)])


def make_synthetic_tasks(cfg: SyntheticTaskConfig, n_tasks: int) -> list[TaskSpec]:
    """Class-disjoint spectrogram tasks: per-class pattern times random gain plus Gaussian noise."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    tasks = []
    for k in range(n_tasks):
        rng = np.random.default_rng([cfg.seed, 100, k])
        pats = class_patterns(cfg, k)

        def draw(per_class):
            y = np.repeat(np.arange(cfg.classes), per_class)
            gain = rng.uniform(0.8, 1.2, size=len(y))[:, None, None]
            x = gain * pats[y] + cfg.noise * rng.standard_normal((len(y), cfg.freq_bins, cfg.frames))
            return x, y

        trx, try_ = draw(cfg.train_per_class)
        tex, tey = draw(cfg.test_per_class)
        name = f"{cfg.families[k % len(cfg.families)]}{k // len(cfg.families) or ''}"
        tasks.append(TaskSpec(k + 1, name, cfg.classes, trx, try_, tex, tey))
    return tasks


def reference_config(mode, seed: int = REFERENCE_SEED) -> RunConfig:
    return RunConfig(mode=TrainMode(mode), seed=seed, **REFERENCE_OVERRIDES)


def reference_tasks(n_tasks: int = 3, seed: int = REFERENCE_SEED) -> list[TaskSpec]:
    return make_synthetic_tasks(reference_config("adapter-inc", seed).synthetic_config(), n_tasks)


def load_feature_tasks(root, test_every: int = 5) -> list[TaskSpec]:
    """Tasks from ``root/<task>/<class>/*.ftt`` log-mel files.

    Task directories are taken in sorted order; within each class, every
    ``test_every``-th file (sorted by name) goes to the test split.
    """
    from .fileformat import load_tensor

    root = Path(root)
    tasks = []
    task_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not task_dirs:
        raise ValueError(f"{root}: no task directories")
    shape = None
    for k, tdir in enumerate(task_dirs):
        class_dirs = sorted(p for p in tdir.iterdir() if p.is_dir())
        if not class_dirs:
            raise ValueError(f"{tdir}: no class directories")
        splits = {"train": ([], []), "test": ([], [])}
        for label, cdir in enumerate(class_dirs):
            for n, f in enumerate(sorted(cdir.glob("*.ftt"))):
                arr = load_tensor(f)
                if arr.ndim != 2:
                    raise ValueError(f"{f}: expected a 2-D spectrogram, got shape {arr.shape}")
                if shape is None:
                    shape = arr.shape
                elif arr.shape != shape:
                    raise ValueError(f"{f}: shape {arr.shape} differs from {shape}")
                xs, ys = splits["test" if n % test_every == test_every - 1 else "train"]
                xs.append(arr)
                ys.append(label)
        (trx, try_), (tex, tey) = splits["train"], splits["test"]
        if not trx:
            raise ValueError(f"{tdir}: empty training split")
        stack = lambda xs: np.stack(xs) if xs else np.zeros((0,) + shape)  # noqa: E731
        tasks.append(
            TaskSpec(k + 1, tdir.name, len(class_dirs), stack(trx), np.array(try_), stack(tex), np.array(tey, dtype=np.int64))
        )
    return tasks


def tasks_for(cfg: RunConfig) -> list[TaskSpec]:
    if cfg.data:
        return load_feature_tasks(cfg.data)[: cfg.tasks]
    return make_synthetic_tasks(cfg.synthetic_config(), cfg.tasks)


def run_sequence(run: TiclRun, tasks: list[TaskSpec], epochs=None, batch_size=None) -> list[TrainLog]:
    """Register, train and evaluate each task in order, filling the accuracy matrix."""
    logs = []
    for spec in tasks:
        run.register(spec)
        logs.append(run.train_task(spec.task_id, spec.train_x, spec.train_y, epochs, batch_size))
        row = run.evaluate_stage()
        log.info("after task %d: %s", spec.task_id, row)
    return logs
