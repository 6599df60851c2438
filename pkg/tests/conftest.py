"""Shared fixtures.

The expensive artifacts (trained model, calibration, quantized variants,
tuned models, the twin-task chain) are built once per session and shared;
everything downstream is deterministic given the seeds pinned here.
"""

import numpy as np
import pytest

from qeft import data as shipped_data
from qeft.calibration import collect_calibration, select_global
from qeft.merging import apply_to_quantized, extract_delta
from qeft.model import (
    ModelConfig, TrainConfig, encode_bytes, init_model, split_corpus,
    train_dense,
)
from qeft.qmodel import quantize_model
from qeft.reorder import build_plan
from qeft.tuning import TuneConfig, finetune

# small architecture for unit tests that need a real model but not quality
SMALL_CONFIG = ModelConfig(d_model=32, n_heads=4, head_dim=8, d_ff=64,
                           n_blocks=2, vocab_size=256, max_seq=64, seed=5)

# twin-experiment protocol (calibrated once; see notes in the README)
SIBLING_TRAIN = dict(steps=300, lr=3e-4)
TASK_B_TUNE = dict(steps=100, lr=1e-4)
DENSE_FT = dict(steps=400, lr=1e-4)


@pytest.fixture(scope="session")
def corpus_ids():
    return encode_bytes(shipped_data.load_text("tiny_corpus.txt"))


@pytest.fixture(scope="session")
def corpus_split(corpus_ids):
    return split_corpus(corpus_ids)


@pytest.fixture(scope="session")
def task_a_split():
    return split_corpus(encode_bytes(shipped_data.load_text("task_a.txt")))


@pytest.fixture(scope="session")
def task_b_split():
    return split_corpus(encode_bytes(shipped_data.load_text("task_b.txt")))


@pytest.fixture(scope="session")
def small_model():
    return init_model(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_hessian(small_model, corpus_split):
    train_ids, _ = corpus_split
    return collect_calibration(small_model, train_ids, n_seq=4, seq_len=48,
                               seed=0)


@pytest.fixture(scope="session")
def small_quantized(small_model, small_hessian):
    return quantize_model(small_model, small_hessian, k=4, bits=4, g=16,
                          mode="optq", reorder="ogr")


# ---------------------------------------------------------------------------
# full-scale trained pipeline (shared by integration/acceptance tests)

@pytest.fixture(scope="session")
def trained_model(corpus_split):
    train_ids, _ = corpus_split
    model = init_model(ModelConfig(seed=0))
    return train_dense(model, train_ids, config=TrainConfig(seed=0))


@pytest.fixture(scope="session")
def trained_hessian(trained_model, corpus_split):
    train_ids, _ = corpus_split
    return collect_calibration(trained_model, train_ids, seed=0)


@pytest.fixture(scope="session")
def trained_gwc(trained_hessian):
    return select_global(trained_hessian.diag(), 8, n_blocks=4)


@pytest.fixture(scope="session")
def trained_plan(trained_gwc, trained_model):
    return build_plan(trained_gwc, trained_model.config)


@pytest.fixture(scope="session")
def qeft_frozen(trained_model, trained_hessian):
    """Default 4-bit g=32 k=8 optq+grid OGR quantization of the toy model."""
    return quantize_model(trained_model, trained_hessian, k=8, bits=4, g=32,
                          mode="optq", reorder="ogr")


@pytest.fixture(scope="session")
def qeft_tuned(qeft_frozen, corpus_split):
    train_ids, _ = corpus_split
    tuned, _ = finetune(qeft_frozen, train_ids, TuneConfig(seed=0))
    return tuned


@pytest.fixture(scope="session")
def dense_finetuned(trained_model, corpus_split):
    train_ids, _ = corpus_split
    return train_dense(trained_model, train_ids,
                       config=TrainConfig(lr_schedule="constant", seed=0,
                                          **DENSE_FT))


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory, trained_model):
    from qeft.container import save_checkpoint
    path = tmp_path_factory.mktemp("acc") / "dense.qeft"
    save_checkpoint(path, trained_model)
    return path


# ---------------------------------------------------------------------------
# twin-task chain (PEFT merging)

@pytest.fixture(scope="session")
def sibling_model(trained_model, task_a_split):
    a_train, _ = task_a_split
    return train_dense(trained_model, a_train,
                       config=TrainConfig(seed=0, **SIBLING_TRAIN))


@pytest.fixture(scope="session")
def sibling_quantized(sibling_model, corpus_split, qeft_frozen):
    train_ids, _ = corpus_split
    hess = collect_calibration(sibling_model, train_ids, seed=0)
    return quantize_model(sibling_model, hess, k=8, bits=4, g=32,
                          mode="optq", reorder="ogr",
                          gwc=qeft_frozen.gwc, plan=qeft_frozen.plan)


@pytest.fixture(scope="session")
def task_b_delta(qeft_frozen, task_b_split):
    b_train, _ = task_b_split
    tuned_b, _ = finetune(qeft_frozen, b_train,
                          TuneConfig(seed=0, **TASK_B_TUNE))
    return extract_delta(tuned_b, qeft_frozen)


@pytest.fixture(scope="session")
def merged_sibling(sibling_quantized, task_b_delta):
    return apply_to_quantized(sibling_quantized, task_b_delta)


def fd_relative_error(fd, an, scale):
    """Relative error with a floor tied to the gradient scale, so entries
    below the float32 finite-difference noise floor do not dominate."""
    return abs(fd - an) / max(abs(fd), abs(an), 0.02 * scale)
