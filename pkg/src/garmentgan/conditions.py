"""Condition vector layout: supervised one-hot blocks plus a continuous code.

A condition vector is ``[onehot(fit)? | onehot(shape)? | c_u?]`` depending on
which attributes the model conditions on and whether a continuous
unsupervised code is present (semi-supervised mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

_ONEHOT_ATOL = 1e-5
_RANGE_ATOL = 1e-6


@dataclass(frozen=True)
class ConditionSpec:
    fit_classes: int = 0
    shape_classes: int = 0
    d_u: int = 0

    def __post_init__(self):
        if self.fit_classes < 0 or self.shape_classes < 0 or self.d_u < 0:
            raise ValueError("condition block sizes must be >= 0")
        if self.fit_classes == 0 and self.shape_classes == 0:
            raise ValueError("at least one supervised attribute required")

    @property
    def dim(self) -> int:
        return self.fit_classes + self.shape_classes + self.d_u

    @property
    def supervised_dim(self) -> int:
        return self.fit_classes + self.shape_classes

    def blocks(self):
        """(name, offset, size) for each supervised one-hot block."""
        out = []
        offset = 0
        if self.fit_classes:
            out.append(("fit", 0, self.fit_classes))
            offset = self.fit_classes
        if self.shape_classes:
            out.append(("shape", offset, self.shape_classes))
        return out

    def block_sizes(self) -> dict:
        return {name: size for name, _, size in self.blocks()}

    def validate(self, c: torch.Tensor):
        if c.ndim != 2 or c.shape[1] != self.dim:
            raise ValueError(f"condition batch must be (B, {self.dim}), got {tuple(c.shape)}")
        for name, off, size in self.blocks():
            block = c[:, off:off + size]
            sums = block.sum(dim=1)
            if ((sums - 1.0).abs() > _ONEHOT_ATOL).any():
                raise ValueError(f"{name} one-hot block does not sum to 1")
            if (block < -_ONEHOT_ATOL).any() or (block > 1.0 + _ONEHOT_ATOL).any():
                raise ValueError(f"{name} one-hot block has entries outside [0, 1]")
        if self.d_u:
            cu = c[:, self.supervised_dim:]
            if (cu.abs() > 1.0 + _RANGE_ATOL).any():
                raise ValueError("c_u components outside [-1, 1]")

    def make(self, fit=None, shape=None, c_u=None, batch_size=None,
             dtype=torch.float32) -> torch.Tensor:
        """Assemble a condition batch from label indices / code tensors."""
        parts = {}
        for name, values in (("fit", fit), ("shape", shape)):
            if values is not None:
                parts[name] = torch.as_tensor(values, dtype=torch.int64).reshape(-1)
        if c_u is not None:
            c_u = torch.as_tensor(c_u, dtype=dtype)
            if c_u.ndim == 1:
                c_u = c_u.unsqueeze(0)
        if batch_size is None:
            for t in list(parts.values()) + ([c_u] if c_u is not None else []):
                batch_size = t.shape[0]
                break
        if batch_size is None:
            raise ValueError("cannot infer batch size")

        cols = []
        for name, _, size in self.blocks():
            if name not in parts:
                raise ValueError(f"condition requires a {name} label")
            idx = parts[name]
            if idx.shape[0] == 1 and batch_size > 1:
                idx = idx.expand(batch_size)
            if (idx < 0).any() or (idx >= size).any():
                raise ValueError(f"{name} label outside 0..{size - 1}")
            cols.append(torch.nn.functional.one_hot(idx, size).to(dtype))
        if self.d_u:
            if c_u is None:
                raise ValueError("condition requires a c_u block")
            if c_u.shape[0] == 1 and batch_size > 1:
                c_u = c_u.expand(batch_size, -1)
            if c_u.shape != (batch_size, self.d_u):
                raise ValueError(f"c_u must be (B, {self.d_u})")
            cols.append(c_u.to(dtype))
        c = torch.cat(cols, dim=1)
        self.validate(c)
        return c

    def sample(self, n: int, rng: torch.Generator, label_probs=None) -> torch.Tensor:
        """Random conditions: labels from ``label_probs`` (uniform default),
        c_u ~ U[-1, 1]."""
        kwargs = {}
        for name, _, size in self.blocks():
            if label_probs is not None and name in label_probs:
                probs = torch.as_tensor(label_probs[name], dtype=torch.float64)
                kwargs[name] = torch.multinomial(probs, n, replacement=True,
                                                 generator=rng)
            else:
                kwargs[name] = torch.randint(0, size, (n,), generator=rng)
        if self.d_u:
            kwargs["c_u"] = torch.rand(n, self.d_u, generator=rng) * 2.0 - 1.0
        return self.make(batch_size=n, **kwargs)

    def split(self, c: torch.Tensor) -> dict:
        """Condition batch -> {'fit': block, 'shape': block, 'c_u': block}."""
        out = {name: c[:, off:off + size] for name, off, size in self.blocks()}
        if self.d_u:
            out["c_u"] = c[:, self.supervised_dim:]
        return out

    def labels(self, c: torch.Tensor) -> dict:
        return {name: block.argmax(dim=1)
                for name, block in self.split(c).items() if name != "c_u"}
