"""Fixed-vocabulary prompt embeddings (robot, task and environment tags)."""
from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import InvalidArgument

VOCAB = ("arm_A", "arm_B", "reach", "pick_lift", "env_A", "env_B")


class PromptTable(nn.Module):
    """One learned ``cond_dim`` vector per vocabulary token."""

    def __init__(self, cond_dim=64, vocab=VOCAB):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.embed = nn.Embedding(len(self.vocab), cond_dim)
        nn.init.normal_(self.embed.weight, std=1.0)

    @property
    def cond_dim(self):
        return self.embed.embedding_dim

    def ids(self, tokens):
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise InvalidArgument(f"unknown prompt tokens {unknown}; vocabulary is {list(self.vocab)}")
        return torch.tensor([self.index[t] for t in tokens], dtype=torch.long)

    def forward(self, batch_tokens):
        """Mean token embedding per prompt; an empty prompt maps to the zero vector."""
        rows = []
        for tokens in batch_tokens:
            if len(tokens) == 0:
                rows.append(torch.zeros(self.cond_dim))
            else:
                rows.append(self.embed(self.ids(tokens)).mean(0))
        return torch.stack(rows)


def encode_prompt(table: PromptTable, tokens) -> torch.Tensor:
    return table([list(tokens)])[0]


def prompt_tokens(arm_domain: str, task: str, env_domain: str) -> list[str]:
    """Prompt for a clip showing ``arm_domain``'s arm doing ``task`` in ``env_domain``."""
    return [f"arm_{arm_domain}", task, f"env_{env_domain}"]
