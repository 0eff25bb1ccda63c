import numpy as np
import pytest

from mmnas import tensor as T
from mmnas.ops import OP_KINDS
from mmnas.tensor import Tensor, _result

import gradient_suite as G
from gradcheck import directional_errors, projected

TOL = 1e-4


@pytest.mark.parametrize("kind", OP_KINDS)
def test_op_gradients(kind):
    assert max(G.check_op(kind, np.random.default_rng(7))) < TOL


@pytest.mark.parametrize("check", [G.check_stem, G.check_preprocess, G.check_normalize, G.check_head])
def test_layer_gradients(check):
    assert max(check(np.random.default_rng(3))) < TOL


def test_supernet_gradients_including_stem_entry_and_alpha_entry():
    assert max(G.check_supernet(np.random.default_rng(5), 5)) < TOL


def test_checker_catches_a_wrong_backward(rng):
    def sloppy_square(a):
        return _result(a.data ** 2, (a,), lambda g: (g * 2.02 * a.data,))
    x = Tensor(rng.standard_normal(50), requires_grad=True)
    errs = directional_errors(projected(lambda: T.relu(sloppy_square(x)), rng), [x], rng)
    assert errs[0] > 5e-3
