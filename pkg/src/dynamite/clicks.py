"""Spatio-temporal click record: per-object positive clicks, shared negatives,
a global timestep ordering, and the object registry."""

from __future__ import annotations

from dataclasses import dataclass, replace

POSITIVE = "pos"
NEGATIVE = "neg"


class ClickError(ValueError):
    pass


class DuplicateClickError(ClickError):
    pass


class UnknownObjectError(ClickError):
    pass


@dataclass(frozen=True)
class Click:
    row: int
    col: int
    timestep: int
    kind: str  # POSITIVE | NEGATIVE
    object_id: int | None = None  # set iff positive

    def key(self):
        return (self.row, self.col, self.kind, self.object_id)


class ClickState:
    """All clicks for one image, in arrival order; timesteps stay contiguous
    from 1 under undo and object removal."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self._clicks: list[Click] = []
        self._keys: set = set()
        self._objects: list[int] = []
        self._next_object_id = 1

    # -- read side ----------------------------------------------------------

    @property
    def clicks(self) -> tuple:
        return tuple(self._clicks)

    @property
    def objects(self) -> tuple:
        return tuple(self._objects)

    def __len__(self) -> int:
        return len(self._clicks)

    def positives(self, object_id: int) -> list:
        return [c for c in self._clicks if c.kind == POSITIVE and c.object_id == object_id]

    def negatives(self) -> list:
        return [c for c in self._clicks if c.kind == NEGATIVE]

    def active_objects(self) -> list:
        return [o for o in self._objects if self.positives(o)]

    def has_click(self, row: int, col: int, kind: str, object_id=None) -> bool:
        return (row, col, kind, object_id) in self._keys

    # -- mutations ----------------------------------------------------------

    def register_object(self) -> int:
        oid = self._next_object_id
        self._next_object_id += 1
        self._objects.append(oid)
        return oid

    def remove_object(self, object_id: int) -> None:
        if object_id not in self._objects:
            raise UnknownObjectError(f"unknown object id {object_id}")
        self._objects.remove(object_id)
        kept = [c for c in self._clicks if c.object_id != object_id]
        self._set_clicks(kept)

    def add_click(self, row: int, col: int, kind: str, object_id=None) -> int:
        if kind not in (POSITIVE, NEGATIVE):
            raise ClickError(f"kind must be {POSITIVE!r} or {NEGATIVE!r}, got {kind!r}")
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise ClickError(
                f"click ({row}, {col}) outside image {self.height}x{self.width}"
            )
        if kind == POSITIVE:
            if object_id is None:
                raise ClickError("positive clicks need an object_id")
            if object_id not in self._objects:
                raise UnknownObjectError(f"unknown object id {object_id}")
        else:
            if object_id is not None:
                raise ClickError("negative clicks carry no object_id")
        key = (row, col, kind, object_id)
        if key in self._keys:
            raise DuplicateClickError(f"duplicate click {key}")
        t = len(self._clicks) + 1
        self._clicks.append(Click(row, col, t, kind, object_id))
        self._keys.add(key)
        return t

    def undo(self) -> Click:
        if not self._clicks:
            raise ClickError("undo on empty click state")
        last = self._clicks.pop()
        self._keys.discard(last.key())
        return last

    def _set_clicks(self, clicks: list) -> None:
        self._clicks = [replace(c, timestep=i + 1) for i, c in enumerate(clicks)]
        self._keys = {c.key() for c in self._clicks}

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "clicks": [
                {
                    "y": c.row,
                    "x": c.col,
                    "t": c.timestep,
                    "kind": c.kind,
                    "object": c.object_id,
                }
                for c in self._clicks
            ],
            "objects": list(self._objects),
        }

    @classmethod
    def from_json(cls, data: dict, height: int, width: int) -> "ClickState":
        state = cls(height, width)
        for oid in data.get("objects", []):
            state._objects.append(int(oid))
            state._next_object_id = max(state._next_object_id, int(oid) + 1)
        for rec in sorted(data.get("clicks", []), key=lambda r: r["t"]):
            obj = rec.get("object")
            state.add_click(rec["y"], rec["x"], rec["kind"], None if obj is None else int(obj))
        return state
