"""Small wrapper modules for graph shapes the exporter understands.

Plain ``nn.Sequential`` covers feed-forward stacks; these wrappers add
the three structural pieces the bundle format supports beyond that:
residual merges, single-token readout, and self-attention (which
``nn.MultiheadAttention`` alone cannot express inside a Sequential
because it takes three arguments).
"""

import torch
from torch import nn


class Residual(nn.Module):
    """Sum of branch outputs; every branch receives the same input."""

    def __init__(self, *branches: nn.Module):
        super().__init__()
        if len(branches) < 2:
            raise ValueError("a residual merge needs at least two branches")
        self.branches = nn.ModuleList(branches)

    def forward(self, x):
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = out + branch(x)
        return out


class SelectToken(nn.Module):
    """Keep a single token from a (batch, tokens, channels) sequence."""

    def __init__(self, index: int):
        super().__init__()
        self.index = int(index)

    def forward(self, x):
        return x[:, self.index:self.index + 1, :]


class SelfAttention(nn.Module):
    """Batch-first self-attention over a (batch, tokens, channels) sequence."""

    def __init__(self, embed_dim: int, num_heads: int, bias: bool = True):
        super().__init__()
        self.inner = nn.MultiheadAttention(
            embed_dim, num_heads, bias=bias, batch_first=True)

    def forward(self, x):
        out, _ = self.inner(x, x, x, need_weights=False)
        return out
