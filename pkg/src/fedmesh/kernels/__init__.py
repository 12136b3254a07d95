"""Hot training kernels, compiled when available.

The Cython build (``_ckernels``) is preferred; the numpy module
``_pykernels`` is used when the extension is missing or when
``FEDMESH_PURE_PYTHON`` is set. Both expose::

    forward(feats, params, F, H) -> probs [n, 2]
    loss_and_grad(feats, labels, params, F, H) -> (loss, grad)
    adam_update(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)
    train_epochs(feats, labels, orders, batch_size, params, m, v, step,
                 lr, beta1, beta2, eps, F, H) -> (step, epoch_losses)

Results agree across backends to rounding, not bit for bit; a run always
uses one backend throughout.
"""
import os

from fedmesh.kernels import _pykernels

if os.environ.get("FEDMESH_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from fedmesh.kernels import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

forward = _impl.forward
loss_and_grad = _impl.loss_and_grad
adam_update = _impl.adam_update
train_epochs = _impl.train_epochs


def available_backends():
    """Map backend name to module for every backend importable here."""
    out = {"python": _pykernels}
    try:
        from fedmesh.kernels import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
