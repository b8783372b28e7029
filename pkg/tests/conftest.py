import pytest

from dualora import backbone as bb
from dualora import classifier as clf
from dualora import model as mdl
from dualora import numerics as nm
from dualora import streams as st
from dualora import trainer as tr

MICRO_BACKBONE = dict(num_blocks=2, width=16, heads=2, image_side=8, patch_side=4, channels=1)
MICRO_TRAIN = dict(rank=2, position_l=1, epochs=3, batch_size=4, learning_rate=3e-4)


def build_micro(seed=0, *, num_classes=4, num_tasks=2, train_per_class=6, test_per_class=3,
                noise_std=0.05, backbone_overrides=None, train_overrides=None):
    """Small 2-block setup shared by the slower integration-style tests."""
    bcfg = bb.BackboneConfig(**{**MICRO_BACKBONE, **(backbone_overrides or {})})
    tcfg = tr.TrainConfig(**{**MICRO_TRAIN, **(train_overrides or {})})
    dataset = st.gen_synthetic(
        num_classes, train_per_class, test_per_class,
        bcfg.image_side, bcfg.channels, noise_std, nm.make_rng(seed),
    )
    stream = st.split_tasks(dataset, num_tasks)
    backbone = bb.init_backbone(bcfg, nm.make_rng(seed + 1))
    model = mdl.build_model(
        backbone, tcfg.position_l, tcfg.rank, nm.make_rng(seed + 2),
        flip_positions=tcfg.flip_positions, fixed_down=tcfg.fix_b,
        shared_down_init=tcfg.shared_down_init,
    )
    return stream, backbone, model, tcfg


@pytest.fixture
def micro():
    return build_micro()


@pytest.fixture(scope="session")
def trained_micro():
    """A completed 2-task micro run; treat as read-only."""
    stream, backbone, model, tcfg = build_micro()
    store = clf.PrototypeStore()
    logs = [
        tr.train_task(model, store, task, tcfg, nm.make_rng(100 + task.task_id))
        for task in stream.tasks
    ]
    return dict(stream=stream, backbone=backbone, model=model, store=store, cfg=tcfg, logs=logs)
