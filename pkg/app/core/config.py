from pydantic import ConfigDict
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    PROJECT_NAME: str = "MFFlow"
    API_STR: str = "/api"

    # Where commands write checkpoints and CSV artifacts unless the
    # experiment config names another directory
    OUTPUT_DIR: str = "runs"

    # Optional experiment config (JSON) picked up when --config is absent
    CONFIG_PATH: str = ""

    LOG_LEVEL: str = "INFO"

    model_config = ConfigDict(case_sensitive=True, env_file=".env")


settings = Settings()
