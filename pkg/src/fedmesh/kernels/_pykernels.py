"""numpy implementation of the training kernels.

Parameters travel as one flat float64 vector laid out as
``w1 (F*H, row-major) | b1 (H) | w2 (H*2, row-major) | b2 (2)``.
"""
import numpy as np

PROB_FLOOR = 1e-12


def _unpack(params, F, H):
    o1 = F * H
    o2 = o1 + H
    o3 = o2 + 2 * H
    return (
        params[:o1].reshape(F, H),
        params[o1:o2],
        params[o2:o3].reshape(H, 2),
        params[o3:o3 + 2],
    )


def _softmax2(z):
    d = z[:, 1] - z[:, 0]
    e = np.exp(-np.abs(d))
    big = 1.0 / (1.0 + e)
    small = e / (1.0 + e)
    pos = d >= 0
    out = np.empty_like(z)
    out[:, 1] = np.where(pos, big, small)
    out[:, 0] = np.where(pos, small, big)
    return out


def forward(feats, params, F, H):
    w1, b1, w2, b2 = _unpack(params, F, H)
    hidden = np.maximum(feats @ w1 + b1, 0.0)
    return _softmax2(hidden @ w2 + b2)


def loss_and_grad(feats, labels, params, F, H):
    # non-finite values propagate to the caller, which checks the gradient
    with np.errstate(invalid="ignore", over="ignore"):
        return _loss_and_grad(feats, labels, params, F, H)


def _loss_and_grad(feats, labels, params, F, H):
    w1, b1, w2, b2 = _unpack(params, F, H)
    n = feats.shape[0]
    pre = feats @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    probs = _softmax2(hidden @ w2 + b2)

    rows = np.arange(n)
    p_true = probs[rows, labels]
    loss = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))

    dz = probs.copy()
    dz[rows, labels] -= 1.0
    # the clamp makes the loss flat below the floor
    dz[p_true < PROB_FLOOR] = 0.0
    dz /= n

    grad = np.empty_like(params)
    gw1, gb1, gw2, gb2 = _unpack(grad, F, H)
    gw2[...] = hidden.T @ dz
    gb2[...] = dz.sum(axis=0)
    da = (dz @ w2.T) * (pre > 0.0)
    gw1[...] = feats.T @ da
    gb1[...] = da.sum(axis=0)
    return loss, grad


def adam_update(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam step; updated params are rounded to float32 precision."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params[...] = (params - step).astype(np.float32)


def train_epochs(feats, labels, orders, batch_size, params, m, v, step,
                 lr, beta1, beta2, eps, F, H):
    n = feats.shape[0]
    losses = np.zeros(orders.shape[0])
    for e, order in enumerate(orders):
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_grad(feats[idx], labels[idx], params, F, H)
            step += 1
            adam_update(params, grad, m, v, lr, beta1, beta2, eps,
                        1.0 - beta1 ** step, 1.0 - beta2 ** step)
            total += loss * len(idx)
        losses[e] = total / n
    return step, losses
