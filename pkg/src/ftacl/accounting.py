"""Closed-form attention-pair and parameter/storage accounting.

Nothing here instantiates weights, so full-size configurations cost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .fileformat import bundle_nbytes
from .tokenizer import TokenGrid

MODES = ("full_finetune", "model_sequential", "model_incremental", "adapter_incremental", "linear_probe")


@dataclass(frozen=True)
class ComplexityReport:
    M: int
    T: int
    d: int
    o_gsa: int
    o_fta: int

    @property
    def o_gsa_over_d(self) -> int:
        return self.o_gsa // self.d

    @property
    def o_fta_over_d(self) -> int:
        return self.o_fta // self.d

    @property
    def k(self) -> float:
        return self.o_fta / self.o_gsa

    @property
    def k_display(self) -> str:
        return repr(round(self.k, 3))


def complexity_report(grid: TokenGrid, d: int = 1) -> ComplexityReport:
    if d < 1:
        raise ValueError("d must be >= 1")
    M, T = grid.M, grid.T
    n = M * T + 1
    return ComplexityReport(M, T, d, n * n * d, (M * T * (M + T + 1) + 1) * d)


@dataclass(frozen=True)
class ModelSpec:
    """Shape-level description of a model; enough to count parameters."""

    d: int
    layers: int
    heads: int
    mlp_ratio: int = 4
    in_channels: int = 1
    kernel: int = 16
    pos_grid: tuple[int, int] = (1, 1)
    bottleneck: int = 64
    adapter_kernel: int = 3
    classes: tuple[int, ...] = (2,)


PRESETS = {
    # ViT-B/16-sized AST; heads follow the SCv2, ESC-50, AVE task order
    "paper-full": ModelSpec(
        d=768, layers=12, heads=12, in_channels=3, pos_grid=(24, 24), bottleneck=64, classes=(35, 50, 28)
    ),
    "desk": ModelSpec(d=32, layers=2, heads=1, pos_grid=(4, 5), bottleneck=8, classes=(4, 4, 4)),
}


def tokenizer_params(s: ModelSpec) -> int:
    M0, T0 = s.pos_grid
    return s.in_channels * s.kernel * s.kernel * s.d + s.d + s.d + (M0 * T0 + 1) * s.d


def layer_params(s: ModelSpec) -> int:
    d, h = s.d, s.d * s.mlp_ratio
    norms = 4 * d
    attn = d * 3 * d + 3 * d + d * d + d
    ffn = d * h + h + h * d + d
    return norms + attn + ffn


def backbone_params(s: ModelSpec) -> int:
    return tokenizer_params(s) + s.layers * layer_params(s) + 2 * s.d


def head_params(d: int, classes: int) -> int:
    return d * classes + classes


def adapter_set_params(s: ModelSpec) -> int:
    d, b, k = s.d, s.bottleneck, s.adapter_kernel
    return 2 * s.layers * ((d * b + b) + (k * k * b * b + b) + (b * d + d))


@dataclass
class ParamReport:
    mode: str
    tasks: int
    components: dict[str, int] = field(default_factory=dict)
    trainable: int = 0
    per_task_checkpoint_params: int = 0

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def storage_bytes(self) -> int:
        return 4 * self.total

    @property
    def per_task_checkpoint_bytes(self) -> int:
        return 4 * self.per_task_checkpoint_params

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total


def _task_classes(s: ModelSpec, tasks: int) -> list[int]:
    return [s.classes[i % len(s.classes)] for i in range(tasks)]


def param_report(s: ModelSpec, mode: str = "full_finetune", tasks: int = 1) -> ParamReport:
    """Itemised parameter counts after ``tasks`` sequential tasks.

    ``trainable`` is the largest set optimised while training any single task.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if tasks < 1:
        raise ValueError("tasks must be >= 1")
    classes = _task_classes(s, tasks)
    heads = [head_params(s.d, c) for c in classes]
    tok, enc, norm = tokenizer_params(s), s.layers * layer_params(s), 2 * s.d
    bb = tok + enc + norm
    rep = ParamReport(mode, tasks)
    copies = tasks if mode == "model_incremental" else 1
    rep.components = {"tokenizer": copies * tok, "encoder": copies * enc, "final_norm": copies * norm}
    if mode == "adapter_incremental":
        ad = adapter_set_params(s)
        rep.components["adapters"] = tasks * ad
        rep.components["heads"] = sum(heads)
        rep.trainable = ad + max(heads)
        rep.per_task_checkpoint_params = ad + max(heads)
    else:
        rep.components["heads"] = sum(heads)
        rep.trainable = max(heads) if mode == "linear_probe" else bb + max(heads)
        rep.per_task_checkpoint_params = max(heads) if mode == "linear_probe" else bb + max(heads)
    return rep


def format_param_report(rep: ParamReport) -> str:
    lines = [f"mode={rep.mode}", f"tasks={rep.tasks}"]
    for name, n in rep.components.items():
        lines.append(f"{name}={n}")
    lines += [
        f"total={rep.total}",
        f"trainable={rep.trainable}",
        f"trainable_fraction={rep.trainable_fraction:.6f}",
        f"storage_bytes={rep.storage_bytes}",
        f"per_task_checkpoint_bytes={rep.per_task_checkpoint_bytes}",
    ]
    return "\n".join(lines) + "\n"


# Shape tables matching the on-disk parameter names, used to size checkpoints exactly.


def backbone_shapes(s: ModelSpec) -> dict[str, tuple]:
    d, h, K = s.d, s.d * s.mlp_ratio, s.kernel
    M0, T0 = s.pos_grid
    shapes = {
        "embed.proj_w": (d, s.in_channels, K, K),
        "embed.proj_b": (d,),
        "embed.cls": (1, 1, d),
        "embed.pos": (M0 * T0 + 1, d),
    }
    for i in range(s.layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "qkv_w": (d, 3 * d), p + "qkv_b": (3 * d,),
                p + "proj_w": (d, d), p + "proj_b": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "fc1_w": (d, h), p + "fc1_b": (h,),
                p + "fc2_w": (h, d), p + "fc2_b": (d,),
            }
        )  # fmt: skip
    shapes["norm_g"] = (d,)
    shapes["norm_b"] = (d,)
    return shapes


def adapter_shapes(s: ModelSpec) -> dict[str, tuple]:
    d, b, k = s.d, s.bottleneck, s.adapter_kernel
    shapes = {}
    for side in ("attn", "ffn"):
        for i in range(s.layers):
            p = f"adapters.{side}.{i}."
            shapes.update(
                {
                    p + "down_w": (d, b), p + "down_b": (b,),
                    p + "conv_w": (b, b, k, k), p + "conv_b": (b,),
                    p + "up_w": (b, d), p + "up_b": (d,),
                }
            )  # fmt: skip
    return shapes


def head_shapes(d: int, classes: int) -> dict[str, tuple]:
    return {"head.w": (d, classes), "head.b": (classes,)}


def checkpoint_nbytes(shapes: dict[str, tuple], meta: dict) -> int:
    return bundle_nbytes(shapes, meta, "f32")
