"""Train a small conv net in plain numpy for the benchmark tests.

Two-class synthetic task on 8x8 single-channel images: class 0 lights
up the top-left region, class 1 the bottom-right, over mild noise.
The trained weights are handed back as a regular model graph.
"""

import numpy as np

from dynlin.layers import (
    ActivationParams,
    ConvParams,
    FCParams,
    LayerSpec,
    PoolParams,
    TokenShape,
)
from dynlin.modelio import ModelGraph
from dynlin.tensor_ops import ConvGeometry

H = W = 8
CH_OUT = 4
CLASSES = 2


def make_dataset(rng, n):
    x = rng.normal(0.0, 0.3, (n, H, W))
    y = rng.integers(0, CLASSES, n)
    for i in range(n):
        if y[i] == 0:
            x[i, 1:4, 1:4] += 1.5
        else:
            x[i, 4:7, 4:7] += 1.5
    return x, y


def train_toy_cnn(seed=0, n_train=256, steps=250, lr=0.1):
    """Returns (model, train_accuracy, held-out images, their labels)."""
    rng = np.random.default_rng(seed)
    x, y = make_dataset(rng, n_train)
    x_test, y_test = make_dataset(rng, 32)

    conv_geom = ConvGeometry(H, W, 3, 3, 1, 1)
    pool_geom = ConvGeometry(H, W, 2, 2, 2, 0)
    t_pool = pool_geom.t_out

    # patches never change during training, gather them once
    cols = np.stack([conv_geom.gather(im.reshape(-1, 1)) for im in x])

    k_mat = rng.normal(0.0, 0.3, (CH_OUT, 9))
    b = np.zeros(CH_OUT)
    w = rng.normal(0.0, 0.1, (CH_OUT * t_pool, CLASSES))
    bw = np.zeros(CLASSES)
    onehot = np.eye(CLASSES)[y]
    n = len(x)

    for _ in range(steps):
        conv = np.einsum("mp,nps->nms", k_mat, cols) + b[None, :, None]
        relu = np.maximum(conv, 0.0)
        windows = relu[:, :, pool_geom.index]          # (n, m, 4, t_pool)
        arg = windows.argmax(axis=2)
        pooled = windows.max(axis=2)                   # (n, m, t_pool)
        feats = pooled.reshape(n, -1)                  # channel-major flatten
        logits = feats @ w + bw
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)

        dlogits = (p - onehot) / n
        dw = feats.T @ dlogits
        dbw = dlogits.sum(axis=0)
        dfeats = dlogits @ w.T
        dpooled = dfeats.reshape(n, CH_OUT, t_pool)
        dwindows = np.zeros_like(windows)
        np.put_along_axis(dwindows, arg[:, :, None, :], dpooled[:, :, None, :],
                          axis=2)
        drelu = np.zeros_like(relu)
        np.add.at(drelu.transpose(2, 0, 1), pool_geom.index,
                  dwindows.transpose(2, 3, 0, 1))
        dconv = drelu * (conv > 0)
        dk = np.einsum("nms,nps->mp", dconv, cols)
        db = dconv.sum(axis=(0, 2))

        k_mat -= lr * dk
        b -= lr * db
        w -= lr * dw
        bw -= lr * dbw

    acc = float((logits.argmax(axis=1) == y).mean())

    kernel = np.zeros((3, 3, 1, CH_OUT))
    for m in range(CH_OUT):
        kernel[:, :, 0, m] = k_mat[m].reshape(3, 3)
    model = ModelGraph(
        layers=[
            LayerSpec("conv2d", ConvParams(kernel=kernel, bias=b.copy(),
                                           stride=1, pad=1)),
            LayerSpec("activation", ActivationParams("relu")),
            LayerSpec("maxpool2d", PoolParams(2, 2)),
            LayerSpec("flatten", None),
            LayerSpec("fc", FCParams(w=w.copy(), b=bw.copy())),
        ],
        input_shape=TokenShape(H * W, 1, H, W),
        logits=CLASSES,
    )
    return model, acc, x_test, y_test
