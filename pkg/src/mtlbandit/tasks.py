"""Task identifiers and the registry of (COP, scale) pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

COPS = ("tsp", "cvrp", "op", "kp")

# Largest scale each exact oracle supports.
ORACLE_CAP = {"tsp": 12, "cvrp": 6, "op": 10, "kp": 200}
MIN_SCALE = {"tsp": 2, "cvrp": 1, "op": 1, "kp": 1}

MINIMIZE = {"tsp": True, "cvrp": True, "op": False, "kp": False}


class ConfigurationError(ValueError):
    """Raised for invalid configuration values."""


class ProtocolError(RuntimeError):
    """Operations called out of order or with inconsistent shapes."""


@dataclass(frozen=True, order=True)
class Task:
    cop: str
    scale: int

    @property
    def name(self) -> str:
        return f"{self.cop}-{self.scale}"

    @property
    def minimize(self) -> bool:
        return MINIMIZE[self.cop]

    @classmethod
    def parse(cls, name: str) -> "Task":
        try:
            cop, scale = name.strip().lower().rsplit("-", 1)
            task = cls(cop, int(scale))
        except ValueError:
            raise ConfigurationError(f"cannot parse task name {name!r}") from None
        check_scale(task)
        return task

    def __str__(self) -> str:
        return self.name


def check_scale(task: Task) -> None:
    if task.cop not in COPS:
        raise ConfigurationError(f"unknown COP {task.cop!r}")
    lo, hi = MIN_SCALE[task.cop], ORACLE_CAP[task.cop]
    if not lo <= task.scale <= hi:
        raise ConfigurationError(
            f"scale {task.scale} for {task.cop} outside supported range [{lo}, {hi}]"
        )


class TaskRegistry:
    """Ordered set of tasks grouped by COP type.

    Tasks are indexed densely: all scales of the first COP, then the
    second COP, and so on. ``cop_of(k)`` gives the COP index of task ``k``.
    """

    def __init__(self, scales_per_cop: dict[str, Sequence[int]]):
        if not scales_per_cop:
            raise ConfigurationError("task registry needs at least one COP")
        self.cops: tuple[str, ...] = tuple(scales_per_cop)
        tasks = []
        for cop in self.cops:
            scales = list(scales_per_cop[cop])
            if not scales:
                raise ConfigurationError(f"no scales given for {cop}")
            if len(set(scales)) != len(scales):
                raise ConfigurationError(f"duplicate scales for {cop}: {scales}")
            for s in scales:
                task = Task(cop, int(s))
                check_scale(task)
                tasks.append(task)
        self.tasks: tuple[Task, ...] = tuple(tasks)
        self._index = {t: k for k, t in enumerate(self.tasks)}

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "TaskRegistry":
        grouped: dict[str, list[int]] = {}
        for name in names:
            t = Task.parse(name)
            grouped.setdefault(t.cop, []).append(t.scale)
        return cls(grouped)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, k: int) -> Task:
        return self.tasks[k]

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskRegistry) and self.tasks == other.tasks

    def index(self, task: Task | str) -> int:
        if isinstance(task, str):
            task = Task.parse(task)
        return self._index[task]

    def cop_index(self, task: Task | int) -> int:
        if isinstance(task, int):
            task = self.tasks[task]
        return self.cops.index(task.cop)

    def scales(self, cop: str) -> list[int]:
        return [t.scale for t in self.tasks if t.cop == cop]

    def tasks_of(self, cop: str) -> list[Task]:
        return [t for t in self.tasks if t.cop == cop]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def to_dict(self) -> dict[str, list[int]]:
        return {cop: self.scales(cop) for cop in self.cops}

    def __repr__(self) -> str:
        return f"TaskRegistry({', '.join(self.names)})"
