from ..exception import HnkExceptInternalError


class ObjectFactory:
    def __init__(self, builders: dict):
        # Store all builders in a str:builderclass fashion, e.g. "model_from_checkpoint":ModelFromCheckpoint
        self._builders: dict = builders

    def create(self, key: str, *args, **kwargs):
        """ The factories are called by the create()-method.
            Depending on the key, the registered builder is called with the remaining arguments"""
        builder = self._builders.get(key)
        if not builder:
            raise HnkExceptInternalError(f"No builder registered for {key}")
        return builder(*args, **kwargs)
