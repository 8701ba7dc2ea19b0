"""Input checks shared by the estimators."""
from __future__ import annotations

from numbers import Integral

from .audio import AudioClip


def check_clips(X, allow_empty: bool = False) -> list:
    """Return ``X`` as a list of :class:`AudioClip`, raising on anything else."""
    if isinstance(X, AudioClip):
        raise TypeError("expected a sequence of AudioClip, got a single clip")
    try:
        clips = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of AudioClip, got {type(X).__name__}") from None
    if not clips and not allow_empty:
        raise ValueError("received an empty clip sequence")
    for i, clip in enumerate(clips):
        if not isinstance(clip, AudioClip):
            raise TypeError(f"item {i} is {type(clip).__name__}, not AudioClip")
    return clips


def check_task_id(task_id, seen) -> int:
    if not isinstance(task_id, Integral) or task_id < 0:
        raise ValueError(f"task_id must be a non-negative integer, got {task_id!r}")
    if task_id in seen:
        raise ValueError(f"task {task_id} was already trained")
    return int(task_id)
