from pathlib import Path
from typing import Union

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings managed by Pydantic."""

    # Reproducibility
    EMBER_SEED: int = Field(default=0, description="Default seed for every command.")
    EMBER_LOG_LEVEL: str = Field(default="INFO", description="Logging level name.")

    PROJECT_ROOT: str = Field(
        default_factory=lambda: str(Path(__file__).resolve().parent.parent),
        description="Absolute path to the project root directory.",
    )
    RUNS_DIR: str = Field(
        default="runs",
        description="Directory for run outputs. Relative paths are resolved from PROJECT_ROOT.",
    )

    # Quantization / AMP defaults
    EMBER_CALIB_BATCHES: int = Field(
        default=100, description="Calibration batches used when no flag is given."
    )
    EMBER_LOSS_SCALE: float = Field(
        default=128.0, description="Static AMP loss scale (power of two)."
    )

    model_config = SettingsConfigDict(
        env_file=str(Path(__file__).resolve().parent.parent / ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @property
    def project_root_path(self) -> Path:
        """Checkout directory that relative run paths hang off."""
        return Path(self.PROJECT_ROOT).expanduser().resolve()

    def resolve_path(self, path_value: Union[str, Path]) -> Path:
        """Anchor a relative run or data path at ``project_root_path``. ``~`` is expanded first."""
        path = Path(path_value).expanduser()
        if path.is_absolute():
            return path
        return self.project_root_path / path

    @property
    def runs_path(self) -> Path:
        """Where ``ember`` commands write run directories by default."""
        return self.resolve_path(self.RUNS_DIR)


settings = Settings()
