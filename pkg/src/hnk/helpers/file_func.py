import os

from ..exception import HnkExceptBadFile


def create_dir(dir_path):
    if not os.path.exists(dir_path):
        os.makedirs(dir_path)


def output_path(out_dir: str, name: str) -> str:
    """Path of an artifact under the run's output directory, which is created on demand"""
    create_dir(out_dir)
    return os.path.join(out_dir, name)


def check_readable(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise HnkExceptBadFile(f"{what} {path} does not exist or is not a file")
    return path
