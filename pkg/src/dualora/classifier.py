"""Prototype store and cosine-similarity inference across seen tasks.

A class prototype is the mean final-block CLS feature of its training
samples, extracted with the adapter combination in effect when its task
finished. At query time the prefix blocks are evaluated once with the
current shared adapter and only the suffix is re-run per task, so a query
costs l + (N - l) * t adapter-bearing block applications instead of N * t.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import model as mdl
from .errors import DataError, InvalidInputError, ProtocolError


@dataclass
class PrototypeStore:
    """Append-only map from (task id, global class id) to a feature vector."""

    vectors: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def add(self, task_id: int, class_id: int, vec: np.ndarray) -> None:
        key = (task_id, class_id)
        if key in self.vectors:
            raise ProtocolError(f"prototype for task {task_id} class {class_id} already stored")
        self.vectors[key] = np.asarray(vec, dtype=np.float64).copy()

    def task_items(self, task_id: int) -> list[tuple[int, np.ndarray]]:
        return sorted(
            ((c, v) for (t, c), v in self.vectors.items() if t == task_id),
            key=lambda item: item[0],
        )

    def __len__(self) -> int:
        return len(self.vectors)

    def export_json(self) -> str:
        payload = {
            f"{t}.{c}": [float(x) for x in v] for (t, c), v in sorted(self.vectors.items())
        }
        return json.dumps(payload, sort_keys=True)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, with any zero vector scored -1 so a degenerate
    prototype can never win."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return -1.0
    return float(a @ b) / (na * nb)


def compute_prototypes(model: mdl.ContinualModel, store: PrototypeStore, task) -> None:
    """Mean per-class CLS features of the task's training data, using the
    shared adapter as of now plus the task's own (frozen) components."""
    components = model.components_for(task.task_id)
    for class_id in task.classes:
        mask = task.train_labels == class_id
        if not mask.any():
            raise DataError(f"class {class_id} of task {task.task_id} has no samples")
        feats = [
            mdl.forward_features(model, img, components).cls_final.value
            for img in task.train_images[mask]
        ]
        store.add(task.task_id, int(class_id), np.mean(feats, axis=0))


@dataclass
class Prediction:
    class_id: int
    scores: dict[int, float]  # global class id -> cosine score
    counter: mdl.PassCounter


def predict(
    model: mdl.ContinualModel,
    store: PrototypeStore,
    image: np.ndarray,
    *,
    share_prefix: bool = True,
) -> Prediction:
    """Score every seen class and return the best, ties going to the lowest
    (task, class) pair.

    ``share_prefix=False`` recomputes the full stack per task; it exists to
    demonstrate the shared-prefix path is an exact optimization, not an
    approximation.
    """
    if not model.tasks:
        raise ProtocolError("no tasks trained yet")
    if len(store) == 0:
        raise ProtocolError("prototype store is empty")
    counter = mdl.PassCounter()
    l, n = model.position_l, model.num_blocks
    scores: dict[int, float] = {}
    best_class, best_score = -1, -np.inf

    share_prefix = share_prefix and not model.flip_positions
    prefix_state = None
    if share_prefix:
        state0 = bb.patch_embed(image, model.backbone)
        prefix_state = mdl.run_blocks(model, state0, range(1, l + 1), task=None, counter=counter)

    for components in model.tasks:
        if share_prefix:
            state = mdl.run_blocks(
                model,
                prefix_state,
                range(l + 1, n + 1),
                task=components,
                counter=counter,
            )
            feat = bb.extract_cls(model.backbone, state).value
        else:
            # flipped layouts put per-task adapters first, so nothing is shareable
            result = mdl.forward_features(model, image, components, counter=counter)
            feat = result.cls_final.value
        for class_id, proto in store.task_items(components.task_id):
            score = cosine_score(proto, feat)
            scores[class_id] = score
            if score > best_score:
                best_class, best_score = class_id, score
    return Prediction(class_id=best_class, scores=scores, counter=counter)


def adapter_pass_count(position_l: int, num_blocks: int, num_tasks: int) -> int:
    """Adapter-bearing block applications one query costs after T tasks."""
    if not 0 <= position_l <= num_blocks:
        raise InvalidInputError(
            f"position must lie in [0, {num_blocks}], got {position_l}"
        )
    if num_tasks < 1:
        raise InvalidInputError(f"num_tasks must be >= 1, got {num_tasks}")
    return position_l + (num_blocks - position_l) * num_tasks


def evaluate(
    model: mdl.ContinualModel, store: PrototypeStore, images: np.ndarray, labels: np.ndarray
) -> float:
    """Fraction of samples whose predicted global class matches the label."""
    if images.shape[0] == 0:
        raise DataError("cannot evaluate on an empty sample set")
    hits = sum(
        predict(model, store, img).class_id == int(y) for img, y in zip(images, labels)
    )
    return hits / images.shape[0]
