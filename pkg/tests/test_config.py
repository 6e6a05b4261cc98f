import pytest

from progfreeze.config import ConfigError, ExperimentConfig, dumps, loads, parse_config, to_dict
from progfreeze.freeze import Mode
from progfreeze.trainer import Init

TEXT = """
seed: 3
cohort: {n_pos: 10, n_neg: 14, image_size: 16}
architecture: {stem_channels: 4, widths: [4, 4, 8, 8]}
train:
  grid:
    - {init: XRAY_LIKE_PRETRAIN, mode: ProgFreeze, epochs: 3}
    - {init: RGB_LIKE_PRETRAIN, mode: FullIFT, probe_epochs: 1, epochs: 3, cutmix: true}
split: {k: 5, repeats: 2}
fedsim: {n_sites: 2, rounds_per_phase: [1, 2, 1], phase1_mode: HEAD_FEDAVG}
"""


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.split.k == 5 and cfg.split.repeats == 6
    assert cfg.cohort.n_pos == 57 and cfg.cohort.n_neg == 104
    assert len(cfg.train_configs()) == 17
    assert cfg.arch().in_size == 32
    assert parse_config(None) == cfg


def test_round_trip():
    cfg = loads(TEXT)
    again = loads(dumps(cfg))
    assert again == cfg
    assert to_dict(again) == to_dict(cfg)


def test_values_reach_run_objects():
    cfg = loads(TEXT)
    tcs = cfg.train_configs()
    assert [t.init for t in tcs] == [Init.XRAY_LIKE_PRETRAIN, Init.RGB_LIKE_PRETRAIN]
    assert tcs[1].mode is Mode.FULL_IFT and tcs[1].cutmix.enabled and tcs[1].probe_epochs == 1
    assert all(t.seed == 3 for t in tcs)
    fed = cfg.federation()
    assert fed.n_sites == 2 and fed.rounds_per_phase == (1, 2, 1)
    assert cfg.arch().widths == (4, 4, 8, 8)
    assert cfg.cohort_seed() == 3 and cfg.split_seed() == 3


@pytest.mark.parametrize("text,path", [
    ("cohort: {n_pos: 10, bogus: 1}", "cohort.bogus"),
    ("train: {grid: [{epochs: 3, lr: 0.1}]}", "train.grid.0.lr"),
    ("split: {k: 1}", "split.k"),
    ("unknown_section: {}", "unknown_section"),
    ("fedsim: {phase1_mode: SOMETHING}", "fedsim.phase1_mode"),
])
def test_errors_name_the_key(text, path):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.key_path == path


def test_non_mapping_document_rejected():
    with pytest.raises(ConfigError):
        loads("- 1\n- 2\n")
