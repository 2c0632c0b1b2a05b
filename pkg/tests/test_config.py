import pytest

from utils.common.config import RuntimeSettings, get_runtime_settings


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No worker-cap variables and no .env file in the working directory."""
    for name in ("DWNAS_THREADS", "TNAS_THREADS", "TNAS_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    yield monkeypatch
    monkeypatch.undo()
    get_runtime_settings(refresh=True)


class TestRuntimeSettings:
    def test_defaults(self, clean_env):
        settings = get_runtime_settings(refresh=True)
        assert settings.threads == 1
        assert settings.log_level == "INFO"

    def test_worker_cap_from_environment(self, clean_env):
        clean_env.setenv("DWNAS_THREADS", "4")
        assert get_runtime_settings(refresh=True).threads == 4

    def test_prefixed_worker_cap_still_read(self, clean_env):
        clean_env.setenv("TNAS_THREADS", "3")
        assert get_runtime_settings(refresh=True).threads == 3

    def test_unprefixed_name_wins_over_prefixed(self, clean_env):
        clean_env.setenv("TNAS_THREADS", "3")
        clean_env.setenv("DWNAS_THREADS", "2")
        assert get_runtime_settings(refresh=True).threads == 2

    def test_other_settings_keep_the_prefix(self, clean_env):
        clean_env.setenv("TNAS_LOG_LEVEL", "DEBUG")
        assert get_runtime_settings(refresh=True).log_level == "DEBUG"

    def test_zero_threads_rejected(self, clean_env):
        clean_env.setenv("DWNAS_THREADS", "0")
        with pytest.raises(ValueError):
            RuntimeSettings()

    def test_field_name_accepted(self, clean_env):
        assert RuntimeSettings(threads=5).threads == 5

    def test_cached_until_refresh(self, clean_env):
        first = get_runtime_settings(refresh=True)
        clean_env.setenv("DWNAS_THREADS", "6")
        assert get_runtime_settings() is first
        assert get_runtime_settings(refresh=True).threads == 6
