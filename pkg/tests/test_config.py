"""Configuration loading tests."""

import math

import pytest

from src.config import (
    PipelineConfig,
    PromptToggles,
    SemanticsConfig,
    SuperpointConfig,
    load_config,
)
from src.exceptions import ConfigError


@pytest.fixture(autouse=True)
def no_endpoint_env(monkeypatch):
    for name in ("UG_MASK_ENDPOINT", "UG_EMBED_ENDPOINT", "UG_VLM_ENDPOINT"):
        monkeypatch.delenv(name, raising=False)


class TestDefaults:
    """Tests for built-in defaults."""

    def test_defaults(self):
        """Without a file every section takes its defaults."""
        config = load_config()
        assert config == PipelineConfig()
        assert config.semantics.u == 5
        assert config.views.l == 3
        assert config.merge.stages == 5
        assert config.reasoner.max_retries == 1
        assert config.providers.kind == "mock"
        assert config.superpoints.angle_thresh == pytest.approx(math.radians(15.0))

    def test_toggle_labels(self):
        """Toggle rows are labelled by what they switch off."""
        assert PromptToggles().label == "all"
        assert PromptToggles(spatial=False).label == "no_spatial"
        assert PromptToggles(semantic=False, visual_cot=False).label == "no_semantic_visual_cot"


class TestLoadToml:
    """Tests for TOML files."""

    def test_sections(self, tmp_path):
        """Values from the file override defaults section by section."""
        path = tmp_path / "ug.toml"
        path.write_text(
            "workers = 2\n"
            "[semantics]\nu = 8\nscales = [1.0, 2.0]\n"
            "[reasoner.toggles]\nspatial = false\n"
            "[providers]\nkind = 'http'\n"
            "[providers.vlm]\nendpoint = 'http://vlm.test'\ntimeout = 30\n"
        )
        config = load_config(path)
        assert config.workers == 2
        assert config.semantics.u == 8
        assert config.semantics.scales == (1.0, 2.0)
        assert config.semantics.max_views == 10
        assert not config.reasoner.toggles.spatial
        assert config.providers.vlm.endpoint == "http://vlm.test"
        assert config.providers.vlm.timeout == 30

    def test_environment_endpoint(self, tmp_path, monkeypatch):
        """Endpoint variables take precedence over the file."""
        path = tmp_path / "ug.toml"
        path.write_text("[providers.mask]\nendpoint = 'http://file.test'\n")
        monkeypatch.setenv("UG_MASK_ENDPOINT", "http://env.test")
        monkeypatch.setenv("UG_EMBED_ENDPOINT", "http://embed.test")
        config = load_config(path)
        assert config.providers.mask.endpoint == "http://env.test"
        assert config.providers.embed.endpoint == "http://embed.test"
        assert config.providers.vlm.endpoint == ""

    @pytest.mark.parametrize(
        "content",
        [
            "workers = [",
            "unknown_key = 1\n",
            "[semantics]\nu = 0\n",
            "[semantics]\nscales = [1.5, 2.0]\n",
            "[superpoints]\nvoxel_size = 0.5\nseed_spacing = 0.1\n",
            "[merge]\norder = 'random'\n",
        ],
    )
    def test_invalid(self, tmp_path, content):
        """Syntax errors, unknown keys and bad values are config errors."""
        path = tmp_path / "ug.toml"
        path.write_text(content)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        """An unreadable file is a config error."""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")


class TestSectionValidation:
    """Tests for cross-field checks."""

    def test_prompt_bounds(self):
        """min_prompts may not exceed max_prompts."""
        with pytest.raises(ValueError):
            SemanticsConfig(min_prompts=60, max_prompts=50)

    def test_seed_spacing(self):
        """Seeds cannot be closer than one voxel."""
        with pytest.raises(ValueError):
            SuperpointConfig(voxel_size=0.1, seed_spacing=0.05)
