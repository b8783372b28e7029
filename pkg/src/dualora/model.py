"""Composition of the frozen backbone with shared and task-specific adapters.

Block routing: with transition position ``l``, blocks 1..l carry the shared
adapter and blocks l+1..N carry the current task's specific adapter. The
``flip_positions`` ablation swaps the two roles while keeping the transition
point (and therefore the early-exit readout) at block ``l``.

Forward passes run on the autodiff tape; inference paths simply never call
backward. A pass counter, when supplied, increments once per block that is
executed with an adapter attached, which is what makes the shared prefix
measurably cheaper at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapters as adp
from . import autodiff as ad
from . import backbone as bb
from .errors import ConfigError, InvalidInputError, MissingAdapterError


@dataclass
class TaskComponents:
    """Everything learned for one task that survives training."""

    task_id: int
    classes: tuple[int, ...]
    specific: adp.SpecificAdapter | None
    block_weights: adp.BlockWeights | None


@dataclass
class PassCounter:
    """Counts adapter-bearing block applications for one query."""

    applications: int = 0

    def bump(self) -> None:
        self.applications += 1


@dataclass
class ContinualModel:
    backbone: bb.Backbone
    position_l: int
    rank: int
    flip_positions: bool = False
    shared: adp.SharedAdapter | None = None
    tasks: list[TaskComponents] = field(default_factory=list)

    @property
    def num_blocks(self) -> int:
        return self.backbone.cfg.num_blocks

    @property
    def width(self) -> int:
        return self.backbone.cfg.width

    @property
    def shared_blocks(self) -> tuple[int, ...]:
        n, l = self.num_blocks, self.position_l
        rng_ = range(l + 1, n + 1) if self.flip_positions else range(1, l + 1)
        return tuple(rng_)

    @property
    def specific_blocks(self) -> tuple[int, ...]:
        n, l = self.num_blocks, self.position_l
        rng_ = range(1, l + 1) if self.flip_positions else range(l + 1, n + 1)
        return tuple(rng_)

    def is_shared_block(self, i: int) -> bool:
        return (i <= self.position_l) != self.flip_positions

    def components_for(self, task_id: int) -> TaskComponents:
        for c in self.tasks:
            if c.task_id == task_id:
                return c
        raise MissingAdapterError(f"no adapter trained for task {task_id}")


def build_model(
    backbone: bb.Backbone,
    position_l: int,
    rank: int,
    rng: np.random.Generator,
    *,
    flip_positions: bool = False,
    fixed_down: bool = True,
    shared_down_init: str = "orthogonal",
) -> ContinualModel:
    """Assemble the model and draw the shared adapter (its ``B`` is for keeps)."""
    if not 0 <= position_l <= backbone.cfg.num_blocks:
        raise ConfigError(
            f"position_l must lie in [0, {backbone.cfg.num_blocks}], got {position_l}"
        )
    model = ContinualModel(
        backbone=backbone, position_l=position_l, rank=rank, flip_positions=flip_positions
    )
    if model.shared_blocks:
        model.shared = adp.init_shared(
            model.shared_blocks,
            backbone.cfg.attach_set,
            rank,
            backbone.cfg.width,
            rng,
            fixed_down=fixed_down,
            down_init=shared_down_init,
        )
    return model


def _shared_deltas(model, block, up_values=None):
    out = {}
    for p in model.backbone.cfg.attach_set:
        pair = model.shared.pair(block, p)
        if up_values is None:
            out[p] = lambda h, pair=pair: pair.delta(h)
        else:
            up = up_values[(block, p)]
            out[p] = lambda h, pair=pair, up=up: ad.matmul(
                ad.matmul(h, ad.swap_last2(ad.leaf(pair.down))),
                ad.swap_last2(ad.constant(up)),
            )
    return out


def _specific_deltas(model, block, task: TaskComponents, mu: ad.Tensor | None):
    out = {}
    for p in model.backbone.cfg.attach_set:
        out[p] = lambda h, p=p: adp.specific_delta(
            task.specific, task.block_weights, h, block, p, mu=mu
        )
    return out


def run_blocks(
    model: ContinualModel,
    state: bb.TokenState,
    blocks,
    *,
    task: TaskComponents | None = None,
    shared_up_values: dict | None = None,
    counter: PassCounter | None = None,
) -> bb.TokenState:
    """Apply a contiguous run of blocks with their routed adapter deltas.

    ``task`` supplies the specific adapter for specific-role blocks (pass
    None to run those blocks bare, e.g. to show a fresh adapter changes
    nothing). ``shared_up_values`` substitutes frozen up-projection values on
    the shared-role blocks, which is how the teacher prefix is evaluated
    without gradients.
    """
    blocks = tuple(blocks)
    mu = None
    if (
        task is not None
        and task.block_weights is not None
        and any(not model.is_shared_block(i) for i in blocks)
    ):
        mu = task.block_weights.mu_tensor()
    for i in blocks:
        deltas = {}
        if model.is_shared_block(i):
            if model.shared is not None:
                deltas = _shared_deltas(model, i, shared_up_values)
        elif task is not None and task.specific is not None:
            deltas = _specific_deltas(model, i, task, mu)
        state = bb.block_forward(model.backbone, state, i, deltas)
        if deltas and counter is not None:
            counter.bump()
    return state


@dataclass
class ForwardResult:
    cls_final: ad.Tensor
    cls_at_l: ad.Tensor | None
    state_at_l: bb.TokenState
    final_state: bb.TokenState


def forward_features(
    model: ContinualModel,
    images: np.ndarray,
    task: TaskComponents | None,
    *,
    collect_transition_cls: bool = False,
    counter: PassCounter | None = None,
    shared_up_values: dict | None = None,
) -> ForwardResult:
    """Full forward: embed, prefix blocks 1..l, suffix blocks l+1..N, CLS."""
    l, n = model.position_l, model.num_blocks
    state = bb.patch_embed(images, model.backbone)
    state = run_blocks(
        model,
        state,
        range(1, l + 1),
        task=task,
        shared_up_values=shared_up_values,
        counter=counter,
    )
    cls_at_l = None
    if collect_transition_cls:
        if l < 1:
            raise InvalidInputError("no transition readout exists at position 0")
        cls_at_l = bb.extract_cls(model.backbone, state)
    state_at_l = state
    state = run_blocks(
        model,
        state,
        range(l + 1, n + 1),
        task=task,
        shared_up_values=shared_up_values,
        counter=counter,
    )
    return ForwardResult(
        cls_final=bb.extract_cls(model.backbone, state),
        cls_at_l=cls_at_l,
        state_at_l=state_at_l,
        final_state=state,
    )


def transition_cls_with(
    model: ContinualModel,
    images: np.ndarray,
    *,
    shared_up_values: dict | None = None,
    prefix_task: TaskComponents | None = None,
) -> np.ndarray:
    """CLS readout at the transition point, as plain values (no gradients).

    The teacher pass uses this with the previous task's snapshot: substituted
    up-projection values when the prefix is shared, or the previous task's
    frozen components when positions are flipped.
    """
    l = model.position_l
    if l < 1:
        raise InvalidInputError("no transition readout exists at position 0")
    state = bb.patch_embed(images, model.backbone)
    state = run_blocks(
        model,
        state,
        range(1, l + 1),
        task=prefix_task,
        shared_up_values=shared_up_values,
    )
    return bb.extract_cls(model.backbone, state).value
