"""Deterministic toy torch models used for fixtures and parity probes."""

import numpy as np
import torch
from torch import nn

from .modules import Residual, SelectToken, SelfAttention

BLOCK_CORNERS = ((1, 1), (1, 4), (4, 1))  # class-dependent bright patch


def toy_dataset(seed: int, n: int):
    """8x8 single-channel images, three classes, bright 3x3 block."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.3, size=(n, 1, 8, 8))
    y = rng.integers(0, 3, size=n)
    for i, cls in enumerate(y):
        r, c = BLOCK_CORNERS[cls]
        x[i, 0, r:r + 3, c:c + 3] += 1.5
    return (torch.from_numpy(x.astype(np.float32)),
            torch.from_numpy(y.astype(np.int64)))


def build_toy_cnn(seed: int) -> nn.Sequential:
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(4 * 4 * 4, 3),
    )


def train_toy_cnn(seed: int = 0, n_train: int = 512, n_test: int = 96,
                  steps: int = 300, lr: float = 0.01):
    """Returns (eval-mode model, test accuracy, x_test, y_test)."""
    x_train, y_train = toy_dataset(seed, n_train)
    x_test, y_test = toy_dataset(seed + 1, n_test)
    model = build_toy_cnn(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for step in range(steps):
        idx = torch.randint(0, n_train, (64,),
                            generator=torch.Generator().manual_seed(seed + step))
        opt.zero_grad()
        loss = loss_fn(model(x_train[idx]), y_train[idx])
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        acc = float((model(x_test).argmax(dim=1) == y_test).float().mean())
    return model, acc, x_test, y_test


def build_toy_mlp(seed: int) -> nn.Sequential:
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Linear(4, 8),
        nn.GELU(),
        nn.Linear(8, 3),
    ).eval()


def build_attention_demo(seed: int) -> nn.Sequential:
    """Sequence model exercising norm, residual, attention and readout."""
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Linear(4, 8),
        Residual(nn.Identity(),
                 nn.Sequential(nn.LayerNorm(8), SelfAttention(8, 2))),
        nn.LayerNorm(8),
        SelectToken(0),
        nn.Linear(8, 3),
    ).eval()
