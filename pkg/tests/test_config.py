"""Config parsing: every rejection names the field that caused it."""

import copy

import pytest
import yaml

from tpsim.config import load_config, parse_config, validate_config
from tpsim.core import ConfigError


@pytest.fixture(scope="module")
def raw(config_dir):
    return yaml.safe_load((config_dir / "reference.yaml").read_text())


def _broken(raw, mutate):
    doc = copy.deepcopy(raw)
    mutate(doc)
    return doc


def test_reference_parses_and_spot_checks(ref_cfg):
    assert ref_cfg.geometry.num_sets == 64 and ref_cfg.geometry.num_colours == 4
    assert ref_cfg.policy.slice_length == 8192
    assert ref_cfg.policy.replacement == "plru"
    assert ref_cfg.analysis.shuffles >= 100
    assert {o.ident for o in ref_cfg.scenario.objects} >= {"s_buf", "t_gbuf"}
    assert ref_cfg.scenario.slices == 6
    assert ref_cfg.source.endswith("reference.yaml")


def test_kernel_window_is_mapped_automatically(ref_cfg):
    kvb = ref_cfg.policy.kernel_vbase
    for d in ref_cfg.policy.domains:
        for page in d.kernel_image:
            assert ref_cfg.amap.translate_page(kvb + page) == page
    for page in ref_cfg.policy.global_pages(ref_cfg.geometry):
        assert ref_cfg.amap.translate_page(kvb + page) == page


def test_universe_covers_the_address_map(ref_cfg):
    g = ref_cfg.geometry
    for ppage in ref_cfg.amap.pages.values():
        assert g.page_of(ppage) in ref_cfg.universe_pages


def test_missing_section_is_named(raw):
    with pytest.raises(ConfigError, match="policy: missing required section"):
        parse_config(_broken(raw, lambda d: d.pop("policy")))


def test_missing_field_is_named(raw):
    with pytest.raises(ConfigError, match="geometry.line_size"):
        parse_config(_broken(raw, lambda d: d["geometry"].pop("line_size")))


def test_wrong_spec_version(raw):
    with pytest.raises(ConfigError, match="spec_version"):
        parse_config(_broken(raw, lambda d: d.update(spec_version=99)))


def test_addresses_must_be_hex_strings(raw):
    with pytest.raises(ConfigError, match="kernel_globals"):
        parse_config(_broken(raw, lambda d: d["policy"].update(kernel_globals=[3200])))
    with pytest.raises(ConfigError, match="address_map"):
        parse_config(_broken(
            raw, lambda d: d["scenario"]["address_map"].update({"0x99000": 123})
        ))


def test_integers_must_be_integers(raw):
    with pytest.raises(ConfigError, match="slice_length"):
        parse_config(_broken(raw, lambda d: d["policy"].update(slice_length="fast")))
    with pytest.raises(ConfigError, match="slice_length"):
        parse_config(_broken(raw, lambda d: d["policy"].update(slice_length=True)))


def test_analysis_guards(raw):
    with pytest.raises(ConfigError, match="shuffles"):
        parse_config(_broken(raw, lambda d: d["analysis"].update(shuffles=10)))
    with pytest.raises(ConfigError, match="bin_width"):
        parse_config(_broken(raw, lambda d: d["analysis"].update(bin_width=0)))


def test_object_rejections(raw):
    def dup(d):
        d["scenario"]["objects"].append(dict(d["scenario"]["objects"][0]))
    with pytest.raises(ConfigError, match="duplicate object id"):
        parse_config(_broken(raw, dup))

    def stray_owner(d):
        d["scenario"]["objects"][0]["owner"] = 7
    with pytest.raises(ConfigError, match="unknown domain 7"):
        parse_config(_broken(raw, stray_owner))

    def outside(d):
        d["scenario"]["objects"][0]["base"] = "0x90000"
    with pytest.raises(ConfigError, match="outside domain"):
        parse_config(_broken(raw, outside))


def test_initial_cache_parse(raw):
    doc = _broken(raw, lambda d: d["scenario"].update(
        initial_cache=[{"addr": "0x1440", "level": 2}, {"addr": "0x2400"}]
    ))
    cfg = parse_config(doc)
    assert cfg.scenario.initial_cache == [(0x1440, 2), (0x2400, 1)]
    with pytest.raises(ConfigError, match="initial_cache"):
        parse_config(_broken(raw, lambda d: d["scenario"].update(initial_cache=["0x1440"])))


def test_validate_config_catches_colour_overlap(raw, ref_cfg):
    validate_config(ref_cfg)   # the shipped config is sound
    doc = _broken(raw, lambda d: d["policy"]["domains"][1].update(colours=[1, 2]))
    cfg = parse_config(doc)
    with pytest.raises(ConfigError, match="already claimed"):
        validate_config(cfg)


def test_load_config_io_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("spec_version: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)
    top = tmp_path / "top.yaml"
    top.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="top level"):
        load_config(top)
