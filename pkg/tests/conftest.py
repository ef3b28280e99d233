import pytest

from discdiff.data import build_phantom_dataset
from discdiff.training import AblationFlags, LossWeights, ModelConfig, ScheduleConfig, TrainConfig


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Ten 16x16 phantom volumes, one slice each: 7 train / 1 val / 2 test."""
    out = tmp_path_factory.mktemp("tinydata")
    return build_phantom_dataset(
        out, n_volumes=10, slices_per_volume=1, resolution=16, scale=2, seed=7
    )


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        iterations=6,
        M=3,
        batch_size=2,
        learning_rate=1e-3,
        model=ModelConfig(
            base_channels=8,
            num_res_blocks=1,
            attention_resolutions=(8,),
            channel_multipliers=(1, 2),
            learn_variance=True,
            in_resolution=16,
        ),
        schedule=ScheduleConfig(T=20),
        sampling_steps=4,
        ema_decay=0.5,
        seed=11,
        checkpoint_interval=100,
    )
    base.update(overrides)
    return TrainConfig(**base)
