import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from octpad import autoencoder as ae  # noqa: E402
from octpad.bscan_io import load_manifest, select  # noqa: E402
from octpad.preprocess import PreprocessConfig, preprocess_volume  # noqa: E402
from octpad.synth import SynthParams, generate_dataset  # noqa: E402

SMALL_H, SMALL_W = 32, 64


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A tiny phantom dataset: 3 model, 3 score, 2+2 test volumes of 4 B-scans."""
    out = tmp_path_factory.mktemp("small")
    params = SynthParams(seed=3, height=SMALL_H, width=SMALL_W, bscans_per_volume=4)
    _, _, manifest = generate_dataset(out, 3, dict(model=3, score=3, test_bona=2, test_pai=2), params)
    return manifest


@pytest.fixture(scope="session")
def small_pre():
    return PreprocessConfig(target_height=SMALL_H, target_width=SMALL_W, nlm_template=3, nlm_search=7)


@pytest.fixture(scope="session")
def small_cfg():
    return ae.AEConfig(input_height=SMALL_H, input_width=SMALL_W, encoder_blocks=3, decoder_blocks=4,
                       base_channels=4, epochs=3, batch_size=4, seed=11)


@pytest.fixture(scope="session")
def small_model(small_dataset, small_pre, small_cfg):
    volumes, split = load_manifest(small_dataset)
    model_set = [preprocess_volume(v, small_pre) for v in select(volumes, split.model_set)]
    return ae.train(ae.build_model(small_cfg), model_set)
