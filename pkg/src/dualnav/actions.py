"""Action values, thinking modes, and action verbalization."""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass


class Mode(str, enum.Enum):
    RUNNER = "runner"
    RUMINATOR = "ruminator"


@dataclass(frozen=True)
class Action:
    kind: str  # "move" | "stop"
    target: str | None = None

    def __post_init__(self):
        if self.kind not in ("move", "stop"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if (self.kind == "move") != (self.target is not None):
            raise ValueError("move actions need a target; stop actions take none")

    @classmethod
    def move(cls, target: str) -> "Action":
        return cls("move", target)

    @classmethod
    def stop(cls) -> "Action":
        return cls("stop")

    @property
    def is_stop(self) -> bool:
        return self.kind == "stop"

    def __str__(self) -> str:
        return "stop" if self.is_stop else f"move:{self.target}"

    @classmethod
    def parse(cls, text: str) -> "Action":
        if text == "stop":
            return cls.stop()
        kind, _, target = text.partition(":")
        if kind != "move" or not target:
            raise ValueError(f"cannot parse action {text!r}")
        return cls.move(target)


_QUARTER = math.pi / 4


def action_verb(relative_heading: float) -> str:
    # counter-clockwise positive; exact +-pi/4 and +-3pi/4 fall to forward/back
    theta = (relative_heading + math.pi) % (2 * math.pi) - math.pi
    if abs(theta) <= _QUARTER:
        return "go forward to"
    if _QUARTER < theta < 3 * _QUARTER:
        return "turn left to"
    if -3 * _QUARTER < theta < -_QUARTER:
        return "turn right to"
    return "turn back to"


def verbalize_action(relative_heading: float, target: str) -> str:
    return f"{action_verb(relative_heading)} {target}"


def natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]
