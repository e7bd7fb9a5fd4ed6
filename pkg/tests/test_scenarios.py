import glob
import os

import pytest

from tacnet.errors import InvalidInput
from tacnet.scenarios import SCENARIOS, from_dict, load_config

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "*.yaml"))))
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.scenario in SCENARIOS


def test_defaults():
    cfg = from_dict({"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}]})
    assert cfg.protocol.duration_s == 3600 + 300 + 21600
    assert cfg.calibration.jars_pct_wv == (0, .12, .24, .36, .48, .60)
    assert cfg.device.slope_counts_per_ppm == 185.0
    assert cfg.subjects[0].params.body_mass_kg == 75.0


def test_curve_and_windows_parse():
    cfg = from_dict({"scenario": "baseline_characterization",
                     "subjects": [{"label": "a", "drinks": 0}],
                     "calibration": {"curve": {"slope_counts_per_ppm": 185, "intercept_counts": 273}},
                     "analysis": {"fit_windows_s": [[0, 10], [-5, 0]], "plateau_window_s": [1, 2]}})
    assert cfg.calibration.curve.slope_counts_per_ppm == 185.0
    assert cfg.analysis.fit_windows_s == ((0.0, 10.0), (-5.0, 0.0))
    assert cfg.analysis.plateau_window_s == (1.0, 2.0)


def two(a=None, b=None, drinks=(1, 1), scenario="clothing_comparison"):
    return {"scenario": scenario,
            "subjects": [{"label": "a", "drinks": drinks[0], "params": a or {}},
                         {"label": "b", "drinks": drinks[1], "params": b or {}}]}


@pytest.mark.parametrize("doc", [
    {"scenario": "nope"},
    {"scenario": "one_drink", "bogus": 1},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 2}]},
    {"scenario": "two_drink", "subjects": [{"label": "a", "drinks": 1}]},
    {"scenario": "baseline_characterization", "subjects": [{"label": "a", "drinks": 1}]},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1, "params": {"mass": 1}}]},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}, {"label": "a", "drinks": 1}]},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}],
     "calibration": {"window_min": [25, 40]}},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}],
     "calibration": {"jars_pct_wv": [0.1, 0.1]}},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}],
     "faults": {"service_outages_s": [[10, 5]]}},
    {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 1}],
     "faults": {"disconnects_s": [1, 2]}},
    two(),
    two({"perspiration_mL_hr": 21}, {"perspiration_mL_hr": 500, "body_mass_kg": 60}),
    two({"perspiration_mL_hr": 21}, {"perspiration_mL_hr": 500}, drinks=(1, 2)),
    {"scenario": "interpersonal_comparison", "subjects": [{"label": "a", "drinks": 1}]},
    "not a mapping",
])
def test_invalid_configs(doc):
    with pytest.raises(InvalidInput):
        from_dict(doc)


def test_valid_comparisons():
    from_dict(two({"perspiration_mL_hr": 21}, {"perspiration_mL_hr": 500}))
    from_dict(two({"body_mass_kg": 80}, {"body_mass_kg": 60}, scenario="interpersonal_comparison"))


def test_load_config_errors(tmp_path):
    with pytest.raises(InvalidInput):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: [unclosed")
    with pytest.raises(InvalidInput):
        load_config(bad)
