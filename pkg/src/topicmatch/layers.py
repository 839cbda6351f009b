import torch
from torch import nn

from .numerics import attention


class AttentionLayer(nn.Module):
    """Multi-head attention block: projections, kernel, merge, MLP, residual.

    ``forward(x, source)`` updates ``x`` with messages gathered from ``source``;
    self-attention is ``forward(x, x)``.
    """

    def __init__(self, d, heads, kernel="dot"):
        super().__init__()
        self.heads = heads
        self.kernel = kernel
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.merge = nn.Linear(d, d, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(2 * d, 2 * d, bias=False),
            nn.GELU(),
            nn.Linear(2 * d, d, bias=False),
        )
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, source, counter=None, kernel=None, mask=None):
        msg = attention(self.q_proj(x), self.k_proj(source), self.v_proj(source),
                        self.heads, kernel or self.kernel, counter, mask)
        msg = self.norm1(self.merge(msg))
        msg = self.norm2(self.mlp(torch.cat([x, msg], dim=-1)))
        return x + msg
