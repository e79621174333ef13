import numpy as np
import pytest

from datta import tensor as T
from datta.model import Model, ModelSpec
from datta.normalizers import NormConfig, normalize
from conftest import TINY


def _sbn(model):
    return lambda i, f, g, b: normalize(f, model.bn[i], None, True, NormConfig("sbn"), g, b)


def test_spec_validation_and_sizes():
    assert ModelSpec().site_sizes() == [28, 13, 6]
    assert TINY.site_sizes() == [10, 4]
    with pytest.raises(ValueError):
        ModelSpec(channels=(4,), kernels=(3, 3), strides=(1, 1))
    with pytest.raises(ValueError, match="larger than feature map"):
        ModelSpec(image_size=4, kernels=(5, 3, 3))
    assert ModelSpec.from_dict(ModelSpec().to_dict()) == ModelSpec()


def test_init_is_seeded(tiny_batch):
    a, b, c = Model.init(TINY, 0), Model.init(TINY, 0), Model.init(TINY, 1)
    assert a.state_hash() == b.state_hash() != c.state_hash()
    out = a.forward(tiny_batch, _sbn(a))
    assert out.shape == (8, TINY.num_classes)


def test_clone_is_deep(tiny_model):
    twin = tiny_model.clone()
    twin.bn[0].gamma[:] = 7
    assert tiny_model.bn[0].gamma[0] != 7


def test_stem_plus_head_equals_forward(tiny_model, tiny_batch):
    norm = _sbn(tiny_model)
    full = tiny_model.forward(tiny_batch, norm).data
    split = tiny_model.head(tiny_model.stem(tiny_batch), norm).data
    np.testing.assert_array_equal(full, split)


def test_only_requested_sites_are_trainable(tiny_model, tiny_batch):
    with T.Graph() as g:
        loss = T.softmax_entropy(tiny_model.forward(tiny_batch, _sbn(tiny_model), g, trainable_sites=(1,)))
    assert set(T.backward(g, loss)) == {"bn1.gamma", "bn1.beta"}


def test_load_affine_and_set_arrays(tiny_model):
    tiny_model.load_affine({"bn1.beta": T.Tensor(np.full(6, 0.25))})
    assert tiny_model.bn[1].beta.dtype == np.float32 and tiny_model.bn[1].beta[0] == 0.25
    tiny_model.set_trainable_arrays({"head.bias": np.ones(5)})
    np.testing.assert_array_equal(tiny_model.head_b, np.ones(5, np.float32))
    with pytest.raises(KeyError):
        tiny_model.set_trainable_arrays({"mystery": np.ones(1)})


def test_named_arrays_cover_every_parameter(tiny_model):
    names = set(tiny_model.named_arrays())
    assert {"conv0.kernel", "conv1.kernel", "bn0.gamma", "bn1.var_source", "head.weight", "head.bias"} <= names
    assert len(names) == 2 * 5 + 2
