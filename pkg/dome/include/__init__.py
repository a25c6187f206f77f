import os

PACKAGE_PATH = os.path.dirname(__file__)
CONFIGS_PATH = os.path.join(PACKAGE_PATH, "configs")


def config_path(name: str) -> str:
    """Path of a bundled config, e.g. config_path("train")."""
    return os.path.join(CONFIGS_PATH, f"{name}.yml")
