from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from hnk.runtime_session import HnkSession
import logging

from ..checkpoint import load_checkpoint
from ..exception import HnkExceptBadOptions
from ..helpers.file_func import check_readable
from ..helpers.obj_factory import ObjectFactory
from ..model import ModelParams, build


class ModelFactory(ObjectFactory):
    def __init__(self):
        ObjectFactory.__init__(
            self,
            {
                "model_from_config": ModelFromConfigBuilder(),
                "model_from_checkpoint": ModelFromCheckpointBuilder(),
            },
        )


class ModelFromConfigBuilder:
    def __call__(self, session: HnkSession) -> ModelParams:
        return build(session.run_config.model, session.run_config.train.seed)


class ModelFromCheckpointBuilder:
    def __call__(self, session: HnkSession) -> ModelParams:
        path = session.options.checkpoint
        if not path:
            raise HnkExceptBadOptions(f"Specify the trained model with --{session.options.opt_name_checkpoint}")
        params = load_checkpoint(check_readable(path, "Checkpoint"), session.run_config.model)
        logging.getLogger("debug_log").info(f"Loaded {len(params)} tensors from {path}")
        return params


model_factory = ModelFactory()
