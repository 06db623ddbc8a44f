"""Shared fixtures: small dataset bundles and model specs used across tests."""

import numpy as np
import pytest

from saliencylab.envdata import GeneratorConfig, generate
from saliencylab.models import Model, ModelSpec, build_model


TINY_CLS = GeneratorConfig(kind="tabular_cls", d_core=3, d_spur=3, d_noise=4,
                           samples_per_env=120)
TINY_REG = GeneratorConfig(kind="tabular_reg", d_core=3, d_spur=3, d_noise=4,
                           samples_per_env=120)


@pytest.fixture(scope="session")
def tiny_cls_bundle():
    return generate(TINY_CLS, seed=0)


@pytest.fixture(scope="session")
def tiny_reg_bundle():
    return generate(TINY_REG, seed=0)


@pytest.fixture(scope="session")
def tiny_image_bundle():
    cfg = GeneratorConfig(kind="tiny_image_cls", samples_per_env=40,
                          image_size=8)
    return generate(cfg, seed=0)


@pytest.fixture
def mlp_spec(tiny_cls_bundle):
    return ModelSpec(kind="mlp", hidden=(6,),
                     input_shape=tiny_cls_bundle.feature_shape(),
                     output_dim=2, activation="softplus")


@pytest.fixture
def cnn_spec():
    return ModelSpec(kind="cnn", hidden=(3, 4), input_shape=(2, 8, 8),
                     output_dim=2, activation="softplus")


def affine_relu_model(weights, bias=None, shift=1000.0):
    """An MLP that is exactly affine on a bounded input region.

    The hidden layer passes each input through relu after adding a large
    positive shift, so for |x| < shift every unit is active and the model
    computes ``x @ weights + const`` exactly.  ``weights`` has shape (d, k).
    """
    weights = np.asarray(weights, dtype=np.float64)
    d, k = weights.shape
    spec = ModelSpec(kind="mlp", hidden=(d,), input_shape=(d,), output_dim=k,
                     activation="relu")
    params = {"W0": np.eye(d), "b0": np.full(d, shift),
              "W1": weights,
              "b1": (np.zeros(k) if bias is None else np.asarray(bias, float))
              - shift * weights.sum(axis=0)}
    return Model(spec=spec, params=params)
