"""Conditional Real-NVP-style normalizing flow.

The model is a stack of levels; each level alternates a fixed seeded
permutation with a conditional affine coupling layer.  After every level
except the last, the second half of the active dimensions (in
post-permutation order) is factored out and bypasses the remaining levels.
The output vector is assembled as

    x = [factored_level_1 | factored_level_2 | ... | final_active]

which fixes the index layout used by the inverse pass.  Every layer is a
bijection for each condition, so the composition is one too.

The coupling transform is x_A = z_A * exp(a(z_B, s)) + b(z_B, s) with
x_B = z_B; (a, b) come from a small feedforward conditioner applied to
[z_B, enc(s)] plus a linear residual path from enc(s) alone, and the
log-scales a are squashed to (-clamp, clamp) before use.  The final
conditioner layer and the residual matrix start at zero, so every coupling
begins as the identity map.

For d = 1 there is no z_B half; the coupling degrades to an elementwise
affine map whose parameters depend on the condition alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

LOG_TWO_PI = float(np.log(2.0 * np.pi))

_CHECKPOINT_MAGIC = b"FLOWOT01"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConditionEncoding:
    """How the condition index s enters the conditioner networks.

    one-hot: index s becomes the s-th standard basis vector of R^n.
    scalar:  index s becomes the single value ``values[s]`` in [0, 1].
    """

    kind: str
    n_conditions: int
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("one-hot", "scalar"):
            raise ContractViolation(f"ConditionEncoding: unknown kind '{self.kind}'")
        if self.n_conditions < 1:
            raise ContractViolation("ConditionEncoding: n_conditions must be >= 1")
        if self.kind == "scalar":
            if self.values is None or len(self.values) != self.n_conditions:
                raise ContractViolation("ConditionEncoding: scalar kind needs one value per condition")
            vals = tuple(float(v) for v in self.values)
            if min(vals) < 0.0 or max(vals) > 1.0:
                raise ContractViolation("ConditionEncoding: scalar values must lie in [0, 1]")
            object.__setattr__(self, "values", vals)
        elif self.values is not None:
            raise ContractViolation("ConditionEncoding: one-hot kind takes no values")

    @property
    def dim(self) -> int:
        return self.n_conditions if self.kind == "one-hot" else 1

    def encode(self, cond, batch: int) -> np.ndarray:
        """Encoding matrix [batch, dim] for a scalar index or per-row indices."""
        idx = np.asarray(cond)
        if idx.ndim == 0:
            idx = np.full(batch, int(idx))
        if idx.shape != (batch,):
            raise ContractViolation(f"condition batch {idx.shape} does not match batch size {batch}")
        idx = idx.astype(np.intp)
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= self.n_conditions:
            raise ContractViolation(
                f"condition index out of range [0, {self.n_conditions})"
            )
        if self.kind == "one-hot":
            enc = np.zeros((batch, self.n_conditions))
            enc[np.arange(batch), idx] = 1.0
            return enc
        return np.asarray(self.values, dtype=np.float64)[idx].reshape(batch, 1)


class Permutation:
    """Fixed column permutation; volume preserving."""

    def __init__(self, perm: np.ndarray):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv_perm = np.empty_like(self.perm)
        self.inv_perm[self.perm] = np.arange(self.perm.size)

    def forward(self, z: Tensor) -> Tensor:
        return ad.permute_cols(z, self.perm)

    def inverse(self, x: Tensor) -> Tensor:
        return ad.permute_cols(x, self.inv_perm)


class CouplingLayer:
    """Conditional affine coupling on ``d_active`` dimensions.

    Part A is the first ``d_active // 2`` columns (or the single column at
    d_active = 1); part B is the rest and passes through unchanged.
    """

    def __init__(
        self,
        name: str,
        d_active: int,
        enc_dim: int,
        hidden: tuple[int, ...],
        clamp: float,
        residual: bool,
        rng: np.random.Generator,
    ):
        if d_active < 1:
            raise ContractViolation("CouplingLayer: needs at least one active dimension")
        if clamp <= 0:
            raise ContractViolation("CouplingLayer: clamp must be positive")
        self.name = name
        self.d_a = max(1, d_active // 2)
        self.d_b = d_active - self.d_a
        self.clamp = float(clamp)
        self.residual = bool(residual)
        self.params: dict[str, Tensor] = {}

        sizes = [self.d_b + enc_dim, *hidden, 2 * self.d_a]
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(max(fan_in, 1))
            self.params[f"{name}.w{i}"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
        self._n_layers = len(sizes) - 1
        if residual:
            self.params[f"{name}.res"] = Tensor(np.zeros((enc_dim, 2 * self.d_a)), requires_grad=True)

    def _scale_shift(self, z_b: Tensor | None, enc: Tensor) -> tuple[Tensor, Tensor]:
        h = enc if z_b is None else ad.concat([z_b, enc], axis=1)
        for i in range(self._n_layers):
            h = ad.linear(h, self.params[f"{self.name}.w{i}"], self.params[f"{self.name}.b{i}"])
            if i < self._n_layers - 1:
                h = ad.tanh(h)
        if self.residual:
            h = ad.add(h, ad.matmul(enc, self.params[f"{self.name}.res"]))
        a, b = ad.split(h, (self.d_a, self.d_a), axis=1)
        return ad.scaled_tanh(a, self.clamp), b

    def forward(self, z: Tensor, enc: Tensor) -> tuple[Tensor, Tensor]:
        z_a, z_b = ad.split(z, (self.d_a, self.d_b), axis=1) if self.d_b > 0 else (z, None)
        a, b = self._scale_shift(z_b, enc)
        x_a = ad.add(ad.mul(z_a, ad.exp(a)), b)
        x = ad.concat([x_a, z_b], axis=1) if z_b is not None else x_a
        return x, ad.asum(a, axis=1)

    def inverse(self, x: Tensor, enc: Tensor) -> tuple[Tensor, Tensor]:
        x_a, x_b = ad.split(x, (self.d_a, self.d_b), axis=1) if self.d_b > 0 else (x, None)
        a, b = self._scale_shift(x_b, enc)
        z_a = ad.mul(ad.sub(x_a, b), ad.exp(ad.neg(a)))
        z = ad.concat([z_a, x_b], axis=1) if x_b is not None else z_a
        return z, ad.neg(ad.asum(a, axis=1))


class _Level:
    def __init__(self, pairs, n_keep: int, n_factored: int):
        self.pairs = pairs  # [(Permutation, CouplingLayer), ...]
        self.n_keep = n_keep
        self.n_factored = n_factored


class ConditionalFlowModel:
    """Multi-scale conditional flow f(z, s) with exact inverse and density."""

    def __init__(
        self,
        d: int,
        encoding: ConditionEncoding,
        n_levels: int = 1,
        couplings_per_level: int = 8,
        hidden: tuple[int, ...] = (64, 64),
        clamp: float = 5.0,
        residual: bool = True,
        seed: int = 0,
        condition_weights=None,
    ):
        if d < 1:
            raise ContractViolation("ConditionalFlowModel: d must be >= 1")
        if n_levels < 1 or couplings_per_level < 1:
            raise ContractViolation("ConditionalFlowModel: levels and couplings must be >= 1")
        if d == 1 and n_levels != 1:
            raise ContractViolation("ConditionalFlowModel: d = 1 supports a single level only")
        self.d = d
        self.encoding = encoding
        self.n_levels = n_levels
        self.couplings_per_level = couplings_per_level
        self.hidden = tuple(int(h) for h in hidden)
        self.clamp = float(clamp)
        self.residual = bool(residual)
        self.seed = int(seed)
        self.condition_weights = (
            None if condition_weights is None else np.asarray(condition_weights, dtype=np.float64)
        )

        rng = np.random.default_rng(seed)
        self.levels: list[_Level] = []
        active = d
        for lvl in range(n_levels):
            last = lvl == n_levels - 1
            if active < 2 and d > 1:
                raise ContractViolation(
                    f"ConditionalFlowModel: level {lvl} has {active} active dims; reduce n_levels"
                )
            pairs = []
            for k in range(couplings_per_level):
                perm = Permutation(rng.permutation(active))
                layer = CouplingLayer(
                    f"L{lvl}.C{k}", active, encoding.dim, self.hidden, clamp, residual, rng
                )
                pairs.append((perm, layer))
            n_factored = 0 if last else active // 2
            n_keep = active - n_factored
            if not last and n_keep < 2:
                raise ContractViolation(
                    f"ConditionalFlowModel: factoring at level {lvl} leaves {n_keep} dims; reduce n_levels"
                )
            self.levels.append(_Level(pairs, n_keep, n_factored))
            active = n_keep

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for level in self.levels:
            for _, layer in level.pairs:
                out.update(layer.params)
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # -- condition handling --------------------------------------------------

    def _enc(self, cond, batch: int) -> Tensor:
        return Tensor(self.encoding.encode(cond, batch))

    @staticmethod
    def _as_batch(x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim != 2:
            raise ContractViolation(f"expected a [batch, d] tensor, got shape {t.shape}")
        if not np.isfinite(t.data).all():
            raise ContractViolation("input batch contains non-finite values")
        return t

    # -- passes ---------------------------------------------------------------

    def forward(self, z, cond) -> tuple[Tensor, Tensor]:
        """Latent batch -> data space; returns (x, total log |det Df|)."""
        z = self._as_batch(z)
        if z.shape[1] != self.d:
            raise ContractViolation(f"forward: batch has dim {z.shape[1]}, model has d={self.d}")
        enc = self._enc(cond, z.shape[0])
        active = z
        logdet = None
        factored = []
        for level in self.levels:
            for perm, layer in level.pairs:
                active = perm.forward(active)
                active, ld = layer.forward(active, enc)
                logdet = ld if logdet is None else ad.add(logdet, ld)
            if level.n_factored:
                active, out = ad.split(active, (level.n_keep, level.n_factored), axis=1)
                factored.append(out)
        x = ad.concat([*factored, active], axis=1) if factored else active
        return x, logdet

    def inverse(self, x, cond) -> tuple[Tensor, Tensor]:
        """Data batch -> latent space; returns (z, total log |det Df^{-1}|)."""
        x = self._as_batch(x)
        if x.shape[1] != self.d:
            raise ContractViolation(f"inverse: batch has dim {x.shape[1]}, model has d={self.d}")
        enc = self._enc(cond, x.shape[0])
        sizes = [level.n_factored for level in self.levels if level.n_factored]
        sizes.append(self.levels[-1].n_keep)
        parts = ad.split(x, sizes, axis=1)
        factored = list(parts[:-1])
        active = parts[-1]
        logdet = None
        for level in reversed(self.levels):
            if level.n_factored:
                active = ad.concat([active, factored.pop()], axis=1)
            for perm, layer in reversed(level.pairs):
                active, ld = layer.inverse(active, enc)
                active = perm.inverse(active)
                logdet = ld if logdet is None else ad.add(logdet, ld)
        return active, logdet

    def log_prob(self, x, cond) -> Tensor:
        """log p(x | s) via the latent standard normal and the inverse pass."""
        z, logdet_inv = self.inverse(x, cond)
        quad = ad.scalar_mul(ad.asum(ad.square(z), axis=1), -0.5)
        base = ad.scalar_add(quad, -0.5 * self.d * LOG_TWO_PI)
        return ad.add(base, logdet_inv)

    def sample(self, n: int, cond, rng: np.random.Generator) -> np.ndarray:
        """n draws from the pushforward of N(0, I) under f(., cond)."""
        if n < 1:
            raise ContractViolation(f"sample: n must be >= 1, got {n}")
        z = rng.standard_normal((n, self.d))
        x, _ = self.forward(z, cond)
        return x.data

    # -- structure descriptor --------------------------------------------------

    def architecture(self) -> dict:
        """JSON-serializable structural description (no parameter values)."""
        enc = {"kind": self.encoding.kind, "n_conditions": self.encoding.n_conditions}
        if self.encoding.values is not None:
            enc["values"] = list(self.encoding.values)
        return {
            "d": self.d,
            "n_levels": self.n_levels,
            "couplings_per_level": self.couplings_per_level,
            "hidden": list(self.hidden),
            "clamp": self.clamp,
            "residual": self.residual,
            "levels": [
                {
                    "n_keep": level.n_keep,
                    "n_factored": level.n_factored,
                    "permutations": [perm.perm.tolist() for perm, _ in level.pairs],
                }
                for level in self.levels
            ],
        }


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   8 bytes   magic "FLOWOT01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: format_version, architecture (as produced by
#             ConditionalFlowModel.architecture), encoding spec, seed,
#             condition_weights (list or null) and an ordered list of
#             {"name", "shape"} parameter descriptors
#   rest      the parameter arrays in descriptor order, each as raw
#             little-endian float64, C order
#
# A save/load round trip restores parameter bytes exactly.


def save_checkpoint(model: ConditionalFlowModel, path) -> None:
    params = model.parameters()
    enc = {"kind": model.encoding.kind, "n_conditions": model.encoding.n_conditions}
    if model.encoding.values is not None:
        enc["values"] = list(model.encoding.values)
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "encoding": enc,
        "seed": model.seed,
        "condition_weights": (
            None if model.condition_weights is None else model.condition_weights.tolist()
        ),
        "params": [{"name": name, "shape": list(p.data.shape)} for name, p in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ConditionalFlowModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CHECKPOINT_MAGIC:
            raise ContractViolation(f"not a flow checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != _CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {header['format_version']}")
        arch = header["architecture"]
        enc_spec = header["encoding"]
        encoding = ConditionEncoding(
            kind=enc_spec["kind"],
            n_conditions=enc_spec["n_conditions"],
            values=tuple(enc_spec["values"]) if "values" in enc_spec else None,
        )
        model = ConditionalFlowModel(
            d=arch["d"],
            encoding=encoding,
            n_levels=arch["n_levels"],
            couplings_per_level=arch["couplings_per_level"],
            hidden=tuple(arch["hidden"]),
            clamp=arch["clamp"],
            residual=arch["residual"],
            seed=header["seed"],
            condition_weights=header["condition_weights"],
        )
        for level, level_spec in zip(model.levels, arch["levels"]):
            for (perm, _), stored in zip(level.pairs, level_spec["permutations"]):
                perm.perm = np.asarray(stored, dtype=np.intp)
                perm.inv_perm = np.empty_like(perm.perm)
                perm.inv_perm[perm.perm] = np.arange(perm.perm.size)
        params = model.parameters()
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ContractViolation("checkpoint truncated")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            if spec["name"] not in params:
                raise ContractViolation(f"checkpoint parameter '{spec['name']}' not in model")
            if params[spec["name"]].data.shape != shape:
                raise ContractViolation(f"checkpoint shape mismatch for '{spec['name']}'")
            params[spec["name"]].data = np.ascontiguousarray(arr)
    return model
