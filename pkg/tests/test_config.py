from __future__ import annotations

import pytest

from rose.config import (
    ABLATIONS,
    RoseConfig,
    apply_ablation,
    build_ports,
    default_config_text,
    parse_config,
)
from rose.errors import ConfigurationError


class TestParseConfig:
    def test_default_text_parses_to_defaults(self):
        config = parse_config(default_config_text(fixture_path="fixture.json"))
        reference = RoseConfig()
        assert config.irag == reference.irag
        assert config.vpe == reference.vpe
        assert config.websense == reference.websense
        assert config.runtime == reference.runtime
        assert config.backends.fixture_path == "fixture.json"

    def test_partial_document_keeps_other_defaults(self):
        config = parse_config("[vpe]\naccept_threshold = 0.7\n")
        assert config.vpe.accept_threshold == 0.7
        assert config.vpe.cluster_delta == RoseConfig().vpe.cluster_delta

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_config("[nonsense]\nkey = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_config("[vpe]\nbogus = 1\n")

    def test_bad_value_type_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_config("[runtime]\nworkers = many\n")
        with pytest.raises(ConfigurationError):
            parse_config("[runtime]\nenable_vpe = maybe\n")

    def test_known_terms_comma_list(self):
        config = parse_config("[engine]\nknown_terms = Alpha One, Beta Two\n")
        assert config.engine.known_terms == ("Alpha One", "Beta Two")


class TestAblations:
    def test_all_presets_disable_the_gate(self):
        for ablation in ABLATIONS:
            config = apply_ablation(RoseConfig(), ablation)
            assert config.runtime.enable_websense is False

    def test_switch_matrix(self):
        expectations = {
            "baseline": (False, False, False),
            "irag": (True, False, False),
            "irag_tpe": (True, True, False),
            "irag_vpe": (True, False, True),
            "full": (True, True, True),
        }
        for ablation, (irag_on, tpe_on, vpe_on) in expectations.items():
            runtime = apply_ablation(RoseConfig(), ablation).runtime
            assert (runtime.enable_irag, runtime.enable_tpe, runtime.enable_vpe) == (irag_on, tpe_on, vpe_on)

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ConfigurationError):
            apply_ablation(RoseConfig(), "everything")


class TestBuildPorts:
    def test_unknown_provider_rejected(self):
        config = parse_config("[backends]\nprovider = cloud\nfixture_path = x.json\n")
        with pytest.raises(ConfigurationError):
            build_ports(config)

    def test_mock_provider_requires_fixture_path(self):
        config = parse_config("[backends]\nprovider = mock\n")
        with pytest.raises(ConfigurationError):
            build_ports(config)
