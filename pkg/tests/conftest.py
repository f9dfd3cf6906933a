import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mae3d import _kernels_py  # noqa: E402

try:
    from mae3d import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

KERNEL_IMPLS = [pytest.param(_kernels_py, id="python")]
if _kernels_c is not None:
    KERNEL_IMPLS.append(pytest.param(_kernels_c, id="cython"))


@pytest.fixture(params=KERNEL_IMPLS, scope="module")
def kernel_impl(request):
    return request.param


TINY_MODEL = dict(num_patches=4, patch_size=16, d_feat=16, d_pos=8, extractor_hidden=(8, 16), pos_hidden=8,
                  enc_depth=1, enc_dim=16, enc_heads=2, dec_depth=1, dec_dim=16, dec_heads=2,
                  center_hidden=(16, 16), fold_hidden=(16, 8), patch_radius=0.3)


def tiny_model_config(**kw):
    from mae3d.config import ModelConfig
    return ModelConfig(**{**TINY_MODEL, **kw})


def tiny_pretrain_config(**kw):
    from mae3d.config import PretrainConfig
    model = kw.pop("model", None) or tiny_model_config()
    base = dict(epochs=2, batch_size=2, base_lr=1e-3, n_points=64, model=model)
    return PretrainConfig(**{**base, **kw})


@pytest.fixture
def tiny_cfg():
    return tiny_pretrain_config()


# acceptance criterion number -> (passed, detail); printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"#{n} {'PASS' if ok else 'FAIL'}  {detail}")
