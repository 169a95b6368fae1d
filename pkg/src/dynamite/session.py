"""One interactive episode over one image: features computed exactly once,
the transformer re-run on every click mutation, per-object IoUs against an
optional ground truth, and a replayable click log."""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .clicks import ClickState


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    if union == 0:
        return 1.0
    return inter / union


class Session:
    def __init__(self, model, image_rgb: np.ndarray, gt: np.ndarray | None = None):
        self.model = model
        self.image = np.asarray(image_rgb)
        chw = model.prepare_image(self.image)
        self.height, self.width = chw.shape[1], chw.shape[2]
        if gt is not None:
            gt = np.asarray(gt)
            if gt.shape != (self.height, self.width):
                raise ValueError(f"gt shape {gt.shape} does not match image {chw.shape[1:]}")
        self.gt = gt

        before = model.backbone.extract_calls
        with ad.no_grad():
            self.pyramid, self.fused = model.extract_features(chw)
        self.backbone_invocations = model.backbone.extract_calls - before
        self.fuse_invocations = 1
        self.forward_calls = 0
        self.fallback_rows_total = 0

        self.clicks = ClickState(self.height, self.width)
        if gt is not None:
            for _ in range(int(gt.max())):
                self.clicks.register_object()
        self.log: list = []
        self._rerun()

    # -- state -----------------------------------------------------------------

    @property
    def label_map(self) -> np.ndarray:
        return self.result.label_map

    @property
    def object_ids(self) -> tuple:
        return self.clicks.objects

    def stats(self) -> dict:
        return {
            "backbone_invocations": self.backbone_invocations,
            "fuse_invocations": self.fuse_invocations,
            "forward_calls": self.forward_calls,
            "clicks": len(self.clicks),
            "fallback_rows_total": self.fallback_rows_total,
        }

    def iou(self, object_id: int) -> float:
        if self.gt is None:
            raise ValueError("session has no ground truth")
        if object_id not in self.clicks.objects:
            raise KeyError(f"unknown object id {object_id}")
        return binary_iou(self.label_map == object_id, self.gt == object_id)

    def ious(self) -> dict:
        return {oid: self.iou(oid) for oid in self.clicks.objects}

    # -- mutations ---------------------------------------------------------------

    def register_object(self) -> int:
        return self.clicks.register_object()

    def remove_object(self, object_id: int) -> None:
        self.clicks.remove_object(object_id)
        self._rerun()

    def apply_click(self, row: int, col: int, kind: str, object_id=None) -> np.ndarray:
        self.clicks.add_click(row, col, kind, object_id)
        self._rerun()
        entry = {
            "click": {"y": int(row), "x": int(col), "kind": kind, "object": object_id},
        }
        if self.gt is not None:
            entry["ious"] = {str(k): round(v, 6) for k, v in self.ious().items()}
        self.log.append(entry)
        return self.label_map

    def undo(self):
        removed = self.clicks.undo()
        self._rerun()
        if self.log:
            self.log.pop()
        return removed

    def _rerun(self) -> None:
        with ad.no_grad():
            self.result = self.model.forward(self.pyramid, self.fused, self.clicks)
        self.forward_calls += 1
        self.fallback_rows_total += self.result.fallback_rows

    # -- logging ---------------------------------------------------------------

    def write_log(self, path) -> None:
        with open(path, "w") as f:
            for entry in self.log:
                f.write(json.dumps(entry) + "\n")

    def replay_clicks(self) -> list:
        return [
            (c.row, c.col, c.kind, c.object_id) for c in self.clicks.clicks
        ]


def replay(model, image_rgb, clicks, gt=None, n_objects: int | None = None) -> Session:
    """Fresh session with a recorded click sequence applied in order."""
    s = Session(model, image_rgb, gt=gt)
    if gt is None and n_objects:
        for _ in range(n_objects):
            s.register_object()
    for row, col, kind, oid in clicks:
        s.apply_click(row, col, kind, oid)
    return s
