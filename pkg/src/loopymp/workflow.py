from __future__ import annotations
from typing import Any, Dict, List, Optional

import dask
import json
import logging

from loopymp.tasks import InputTask, Task

__all__ = ["Workflow", "WorkflowResults"]

logger = logging.getLogger(__name__)


class WorkflowResults:
    def __init__(self, results: Dict[str, Any]) -> None:
        self.results = results

    def __getitem__(self, key: str) -> Any:
        return self.results[key]

    def __contains__(self, key: str) -> bool:
        return key in self.results

    def __str__(self) -> str:
        return json.dumps(self.results, sort_keys=True, indent=2, default=str)


def _discover_tasks(*tasks: Task) -> List[Task]:
    discovered = {}
    stack = list(tasks)
    while stack:
        t = stack.pop()
        if t.name in discovered:
            if discovered[t.name] is not t:
                raise ValueError(f"Two different tasks are named {t.name!r}.")
            continue
        discovered[t.name] = t
        stack.extend(t.requirements)
        stack.extend(t.named_requirements.values())

    return [discovered[k] for k in sorted(discovered)]


def _build_delayed(
    task: Task, delayeds: Dict[str, Optional[dask.delayed]]
) -> dask.delayed:
    if delayeds[task.name] is None:
        args = [_build_delayed(v, delayeds) for v in task.requirements]
        kwargs = {
            k: _build_delayed(v, delayeds) for k, v in task.named_requirements.items()
        }
        if isinstance(task, InputTask):
            delayeds[task.name] = dask.delayed(task.value, traverse=False)
        else:
            delayeds[task.name] = dask.delayed(task.compute)(
                *args, dask_key_name=task.name, **kwargs
            )

    return delayeds[task.name]


class Workflow:
    """Dependency graph of Tasks evaluated together by dask."""

    def __init__(self, *tasks: Task) -> None:
        # traverse task dependencies to find all tasks
        # required to compute the provided tasks
        self.tasks = _discover_tasks(*tasks)

    def compute(self, num_workers: Optional[int] = 1) -> WorkflowResults:
        """Evaluate every task once.

        Parameters
        ----------
        num_workers : Optional[int], optional
            Threads for the dask scheduler; 1 runs synchronously, by default 1

        Returns
        -------
        WorkflowResults
            Results keyed by task name.
        """
        # registry of delayed objects so that a shared
        # requirement is only computed once
        delayeds = {t.name: None for t in self.tasks}

        for t in self.tasks:
            delayeds[t.name] = _build_delayed(t, delayeds)

        logger.debug("computing %d tasks on %s worker(s)", len(self.tasks), num_workers)
        if num_workers is None or num_workers > 1:
            (results,) = dask.compute(
                delayeds, scheduler="threads", num_workers=num_workers
            )
        else:
            (results,) = dask.compute(delayeds, scheduler="synchronous")

        return WorkflowResults(results)
