"""Full pipeline runs on synthetic data. Run with `pytest -m slow`."""

import logging

import numpy as np
import pytest

from pipeline.ingest_builder import DataConfig
from pipeline.nn_core import TrainConfig, evaluate, reference_td_dense_spec, save_model
from pipeline.preprocess import ConstantImpute, PreprocessConfig
from pipeline.reports import build_report
from pipeline.synthgen import SynthSpec, generate
from pipeline_config import PARAM_COUNT_RANGE
from service.service import ArchitectureConfig, PipelineService, RunConfig, evaluation_frames

pytestmark = pytest.mark.slow

logger = logging.getLogger(__name__)

DEFAULT_RUN = RunConfig(
    data=DataConfig(window_len=60, hop=2, holdout_workers=["w9"]),
    preprocess=PreprocessConfig(normalize="per_skeleton"),
    architecture=ArchitectureConfig(family="td_dense", td_layers=4, td_units=32, dense_layers=2, dense_units=64),
    train=TrainConfig(learning_rate=1e-3, epochs=30, batch_size=64),
)


@pytest.fixture(scope="module")
def default_output():
    return generate(SynthSpec(), seed=0)


@pytest.fixture(scope="module")
def trained(default_output):
    return PipelineService(DEFAULT_RUN).run(default_output.streams)


def test_small_td_dense_reaches_target_accuracy(trained):
    model, history, split = trained
    assert len(history.epochs) <= 30
    assert evaluate(model, split.val).accuracy >= 0.95
    assert evaluate(model, split.holdout).accuracy >= 0.85


def test_holdout_report(trained, default_output):
    model, _, _ = trained
    frames = evaluation_frames(model, default_output.streams, DEFAULT_RUN.data, "holdout")
    bundle = build_report(frames, fps=30, anchor_class=1, smoothing=15, name="holdout")
    cycle = bundle.summary["cycle"]
    assert cycle["mean_predicted_s"] == pytest.approx(cycle["mean_label_s"], rel=0.05)

    share = bundle.summary["transition"]["share_near_transition"]
    if share <= 0.5:
        logger.warning("only %.0f%% of holdout errors lie near a transition", 100 * share)


def test_training_is_reproducible(tmp_path):
    spec = SynthSpec(n_workers=3, minutes_per_worker=0.25, holdout_worker="w3", sloppy_workers=[])
    run = DEFAULT_RUN.model_copy(update={
        "data": DataConfig(window_len=20, hop=4, holdout_workers=["w3"]),
        "train": TrainConfig(learning_rate=1e-3, epochs=3, batch_size=32),
    })
    paths = []
    for name in ("a.bin", "b.bin"):
        model, _, _ = PipelineService(run).run(generate(spec, seed=2).streams)
        save_model(model, str(tmp_path / name))
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_reference_architecture_trains_one_epoch():
    spec = SynthSpec(n_workers=2, minutes_per_worker=0.25, holdout_worker=None, sloppy_workers=[])
    preprocess = PreprocessConfig(normalize="per_skeleton", impute=ConstantImpute(value=2.0))
    run = RunConfig(
        data=DataConfig(window_len=104, hop=8, holdout_workers=[]),
        preprocess=preprocess,
        model=reference_td_dense_spec(preprocess.feature_len, window_len=104),
        train=TrainConfig(learning_rate=1e-4, epochs=1, batch_size=32),
    )
    model, history, _ = PipelineService(run).run(generate(spec, seed=4).streams)
    lo, hi = PARAM_COUNT_RANGE
    assert lo <= model.param_count <= hi
    assert len(history.epochs) == 1 and np.isfinite(history.epochs[0].train_loss)
