"""Declarative model, training and augmentation configuration (YAML files and bundled presets)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .graph_build import GraphParams
from .sampling import SamplingParams

TASKS = ("object", "action")


@dataclass(frozen=True)
class LayerSpec:
    """One spatial stage: ``conv`` / ``res`` with ``out`` channels, or ``pool``.

    A pool stage carries either ``size`` (cluster size in cells of the incoming
    graph) or ``cell`` (cluster size in sensor pixels), both as (rows, columns).
    """

    kind: str
    out: int = 0
    size: tuple[int, int] | None = None
    cell: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "res", "pool"):
            raise ValueError(f"unknown spatial layer kind {self.kind!r}")
        if self.kind == "pool":
            if (self.size is None) == (self.cell is None):
                raise ValueError("a pool stage needs exactly one of 'size' or 'cell'")
        elif self.out < 1:
            raise ValueError(f"{self.kind} stage needs a positive 'out' channel count")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("type", d.pop("kind", None))
        out = int(d.pop("out", 0))
        size = tuple(int(v) for v in d.pop("size")) if "size" in d else None
        cell = tuple(int(v) for v in d.pop("cell")) if "cell" in d else None
        if d:
            raise ValueError(f"unknown keys in layer entry: {sorted(d)}")
        return cls(kind, out, size, cell)

    def to_dict(self) -> dict:
        if self.kind == "pool":
            return {"type": "pool", "size": list(self.size)} if self.size else {"type": "pool", "cell": list(self.cell)}
        return {"type": self.kind, "out": self.out}


@dataclass(frozen=True)
class AugmentParams:
    scale: tuple[float, float] = (0.95, 1.0)
    flip_x: float = 0.5  # probability of a left-right mirror
    flip_y: float = 0.5  # probability of an up-down mirror
    rotate_deg: float = 10.0  # in-plane angle drawn from [0, rotate_deg]

    def __post_init__(self) -> None:
        lo, hi = self.scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("scale range must lie within (0, 1]")
        for p in (self.flip_x, self.flip_y):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")
        if self.rotate_deg < 0:
            raise ValueError("rotation range must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(scale=(1.0, 1.0), flip_x=0.0, flip_y=0.0, rotate_deg=0.0)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "object"
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (60, 110)
    dropout_p: float = 0.5
    rng_seed: int = 0
    val_fraction: float = 0.2
    augment: bool = True

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``; decays once per milestone passed."""
        return self.lr * self.lr_decay ** sum(epoch > m for m in self.milestones)


@dataclass
class ModelConfig:
    name: str
    task: str
    sensor: tuple[int, int]  # (height, width)
    num_classes: int
    spatial: list[LayerSpec]
    fc: tuple[int, ...] = ()  # hidden FC widths of the object head
    temporal: str | None = None  # plain3d | res3d for the action head
    width: float = 1.0
    s_count: int = 1
    kernel_size: tuple[int, int] = (5, 5)
    degree: int = 1
    graph: GraphParams = field(default_factory=GraphParams)
    sampling: SamplingParams = field(default_factory=SamplingParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.task == "object" and self.s_count != 1:
            raise ValueError("the object head takes a single graph per sample (s_count = 1)")
        if self.task == "action" and self.temporal is None:
            raise ValueError("an action model needs a temporal architecture")
        if self.train.task != self.task:
            raise ValueError("train.task must match the model task")
        if not self.spatial or self.spatial[0].kind == "pool":
            raise ValueError("the spatial chain must start with a conv or res stage")
        if self.width <= 0:
            raise ValueError("width multiplier must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        task = d["task"]
        train_d = dict(d.pop("train", {}) or {})
        train_d.setdefault("task", task)
        if "milestones" in train_d:
            train_d["milestones"] = tuple(int(m) for m in train_d["milestones"])
        for key in ("lr", "lr_decay", "dropout_p", "val_fraction"):
            if key in train_d:
                train_d[key] = float(train_d[key])
        aug_d = dict(d.pop("augment", {}) or {})
        if "scale" in aug_d:
            aug_d["scale"] = tuple(float(v) for v in aug_d["scale"])
        graph_d = {k: float(v) if k != "d_max" else int(v) for k, v in (d.pop("graph", {}) or {}).items()}
        kernel = d.pop("kernel", {}) or {}
        head = d.pop("head", {}) or {}
        kwargs = dict(
            name=str(d.pop("name")),
            task=d.pop("task"),
            sensor=tuple(int(v) for v in d.pop("sensor")),
            num_classes=int(d.pop("num_classes")),
            spatial=[LayerSpec.from_dict(x) for x in d.pop("spatial")],
            fc=tuple(int(v) for v in head.get("fc", ())),
            temporal=head.get("temporal"),
            width=float(d.pop("width", 1.0)),
            s_count=int(d.pop("s_count", 1)),
            kernel_size=tuple(int(v) for v in kernel.get("size", (5, 5))),
            degree=int(kernel.get("degree", 1)),
            graph=GraphParams(**graph_d),
            sampling=SamplingParams(**(d.pop("sampling", {}) or {})),
            train=TrainConfig(**train_d),
            augment=AugmentParams(**aug_d),
        )
        if d:
            raise ValueError(f"unknown top-level config keys: {sorted(d)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        head: dict = {"fc": list(self.fc)} if self.task == "object" else {"temporal": self.temporal}
        train = asdict(self.train)
        train["milestones"] = list(self.train.milestones)
        aug = asdict(self.augment)
        aug["scale"] = list(self.augment.scale)
        return {
            "name": self.name,
            "task": self.task,
            "sensor": list(self.sensor),
            "num_classes": self.num_classes,
            "width": self.width,
            "s_count": self.s_count,
            "spatial": [s.to_dict() for s in self.spatial],
            "head": head,
            "kernel": {"size": list(self.kernel_size), "degree": self.degree},
            "graph": asdict(self.graph),
            "sampling": asdict(self.sampling),
            "train": train,
            "augment": aug,
        }

    def channels(self, c: int) -> int:
        """Width-scaled channel count (never below 1)."""
        return max(1, int(round(c * self.width)))


def preset_names() -> list[str]:
    files = resources.files("nvsgraph") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml") and not p.name.startswith("synth_"))


def preset_path(name: str):
    return resources.files("nvsgraph") / "presets" / f"{name}.yaml"


def load_model_config(source) -> ModelConfig:
    """Parse a YAML config file, or a bundled preset when ``source`` names one."""
    path = Path(source)
    if not path.exists():
        candidate = preset_path(str(source))
        if not candidate.is_file():
            raise FileNotFoundError(f"no config file or preset named {source!r}")
        text = candidate.read_text(encoding="utf-8")
    else:
        text = path.read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{source}: config must be a mapping")
    return ModelConfig.from_dict(data)


def dump_model_config(cfg: ModelConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
