from __future__ import annotations
from typing import Any, Callable, Dict, Optional

import functools
import numpy as np

__all__ = ["ConcatenateTask", "FunctionTask", "InputTask", "Task", "task"]


class Task:
    """Unit of experiment work with dependencies.

    Attributes
    ----------
    name : str
        Unique name within a Workflow; results are keyed by it.
    requirements : list
        Tasks whose results are passed positionally to compute.
    named_requirements : dict
        Tasks whose results are passed as keyword arguments to compute.
    """

    def __init__(self, name: Optional[str] = None) -> None:
        self.name = name or f"{type(self).__name__}-{id(self)}"
        self.requirements = []
        self.named_requirements = {}

    def requires(self, *args: Any, **kwargs: Any) -> None:
        """Register dependencies; plain values are wrapped in InputTasks."""
        self.requirements += [a if isinstance(a, Task) else InputTask(a) for a in args]
        self.named_requirements.update(
            {k: v if isinstance(v, Task) else InputTask(v) for k, v in kwargs.items()}
        )

    def compute(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.name


class FunctionTask(Task):
    """Task which runs a Python function on its requirements."""

    def __init__(self, f: Callable, name: Optional[str] = None) -> None:
        super().__init__(name=name)
        self.f = f

    def compute(self, *args: Any, **kwargs: Any) -> Any:
        return self.f(*args, **kwargs)


class InputTask(Task):
    """Task which returns a fixed value."""

    def __init__(self, value: Any, name: Optional[str] = None) -> None:
        super().__init__(name=name)
        self.value = value

    def compute(self, *args: Any, **kwargs: Any) -> Any:
        return self.value


class ConcatenateTask(Task):
    """Join per-chunk metric dictionaries in requirement order.

    Keeping the chunk order fixed makes every reduction over the joined
    arrays independent of how the chunks were scheduled.
    """

    def compute(self, *chunks: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if not chunks:
            return {}
        return {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}


def task(f: Callable = None, name: Optional[str] = None) -> FunctionTask:
    if f is None:
        return functools.partial(task, name=name)

    return FunctionTask(f=f, name=name)
