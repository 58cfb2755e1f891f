from pathlib import Path

from src.config import Settings, settings


def test_runs_path_is_anchored_to_project_root(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "PROJECT_ROOT", str(tmp_path))
    monkeypatch.setattr(settings, "RUNS_DIR", "nested/runs")

    assert settings.runs_path == tmp_path.resolve() / "nested" / "runs"


def test_absolute_paths_are_kept(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "PROJECT_ROOT", "/somewhere/else")

    assert settings.resolve_path(str(tmp_path)) == tmp_path


def test_environment_overrides_defaults(monkeypatch):
    monkeypatch.setenv("EMBER_SEED", "17")
    monkeypatch.setenv("EMBER_LOSS_SCALE", "1024")

    fresh = Settings()

    assert fresh.EMBER_SEED == 17
    assert fresh.EMBER_LOSS_SCALE == 1024.0
    assert Path(fresh.PROJECT_ROOT).is_absolute()


def test_relative_and_home_paths(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "PROJECT_ROOT", str(tmp_path))
    monkeypatch.setenv("HOME", str(tmp_path / "home"))

    assert settings.resolve_path(Path("data") / "flame") == tmp_path.resolve() / "data" / "flame"
    assert settings.resolve_path("~/frames") == tmp_path / "home" / "frames"
