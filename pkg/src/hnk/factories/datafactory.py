from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from hnk.runtime_session import HnkSession
import logging

from ..exception import HnkExceptBadConfig
from ..helpers.file_func import check_readable
from ..helpers.obj_factory import ObjectFactory
from ..scenes import DatasetLoader, Sample, generate, split_dataset


class DatasetFactory(ObjectFactory):
    def __init__(self):
        ObjectFactory.__init__(
            self,
            {
                "splits_from_config": SplitsFromConfigBuilder(),
                "scenes_from_options": ScenesFromOptionsBuilder(),
            },
        )


class BaseDataBuilder:
    @staticmethod
    def validate(session: HnkSession, samples: list[Sample]):
        model = session.run_config.model
        for sample in samples:
            if (sample.width, sample.height) != (model.input_w, model.input_h):
                raise HnkExceptBadConfig(f"Sample {sample.name} is {sample.width}x{sample.height}, the model "
                                         f"expects {model.input_w}x{model.input_h}")


class SplitsFromConfigBuilder(BaseDataBuilder):
    """Train and validation splits, either loaded from data.manifest or generated from data.scene"""

    def __call__(self, session: HnkSession) -> tuple[list[Sample], list[Sample]]:
        logger = logging.getLogger("debug_log")
        data = session.run_config.data
        if data.manifest:
            loader = DatasetLoader(data.classes, data.category_merge)
            samples = loader.load(check_readable(data.manifest, "Manifest"))
            if len(samples) < 2:
                raise HnkExceptBadConfig(f"Manifest {data.manifest} holds {len(samples)} samples, a train and a "
                                         f"validation split need at least 2")
            logger.info(f"Loaded {len(samples)} samples from {data.manifest} ({loader.dropped} boxes dropped, "
                        f"{loader.clipped} clipped)")
            train, val = split_dataset(samples, min(data.val_count, len(samples) - 1), data.scene.seed)
        else:
            samples = generate(data.scene, data.train_count + data.val_count)
            logger.info(f"Generated {len(samples)} scenes with seed {data.scene.seed}")
            train, val = samples[:data.train_count], samples[data.train_count:]
        self.validate(session, train + val)
        return train, val


class ScenesFromOptionsBuilder:
    """Scenes for synth: --n samples, or as many as both splits of the data section hold"""

    def __call__(self, session: HnkSession) -> list[Sample]:
        data = session.run_config.data
        count = session.options.n if session.options.n is not None else data.train_count + data.val_count
        return generate(data.scene, count)


dataset_factory = DatasetFactory()
