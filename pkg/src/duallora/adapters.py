"""Dual low-rank adapters on linear projections.

Two bypass branches share one frozen projection: a context branch that
reads the hidden states (delta = B @ A @ h) and a prompt branch that reads
the mean prompt embedding (delta = B_p @ A_p @ p, broadcast to every
position under mean-add fusion). Both use the LoRA init rule: A Gaussian,
B zero, so a fresh adapter is an exact no-op. The context branch folds
into the weight (W + BA) and the prompt branch, being input-independent
once p is fixed, folds into the bias (b + B_p A_p p), giving a plain
linear layer at inference time.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, MergeStateError, ShapeError
from .rng import SeededRng
from .tensor import Tensor

FUSION_KINDS = ("mean_add", "cross_attention", "gate_attention")
PLACEMENTS = ("qv", "qkv", "qkvo")
COMBINATIONS = ("horizontal", "vertical")
PROMPT_INPUTS = ("slot_prompt", "slot_embedding")


@dataclass
class DualLoraConfig:
    rank: int = 8
    target_projections: str = "qv"
    fusion: str = "mean_add"
    combination: str = "horizontal"
    n_prompt_loras: int = 1
    init_std: float = 0.02
    seed: int = 0
    prompt_input: str = "slot_prompt"
    scale: float = 1.0           # parity knob; no alpha/r factor by default
    prompt_in_decoder: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.target_projections not in PLACEMENTS:
            raise ConfigError(f"unknown target_projections {self.target_projections!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.combination not in COMBINATIONS:
            raise ConfigError(f"unknown combination {self.combination!r}")
        if self.prompt_input not in PROMPT_INPUTS:
            raise ConfigError(f"unknown prompt_input {self.prompt_input!r}")
        if self.n_prompt_loras < 0:
            raise ConfigError(f"n_prompt_loras must be >= 0, got {self.n_prompt_loras}")

    def to_dict(self) -> dict:
        return asdict(self)


def fingerprint(p) -> str:
    """Hash of the exact prompt-summary bytes; guards the merged state."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()[:16]


class LoraPair:
    """The (A, B) factor pair: delta-W = B @ A, rank(B @ A) <= r."""

    def __init__(self, A: Tensor, B: Tensor, rank: int, scale: float = 1.0):
        self.A = A
        self.B = B
        self.rank = rank
        self.scale = scale

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self, x: Tensor) -> Tensor:
        """B @ (A @ x) for row-major x [L, d_in], factor-wise (BA never built)."""
        out = T.matmul(T.matmul(x, T.transpose(self.A)), T.transpose(self.B))
        return out if self.scale == 1.0 else T.mul(out, self.scale)

    def delta_vec(self, p: Tensor) -> Tensor:
        """B @ (A @ p) for a vector p [d_in]."""
        out = T.matmul(self.B, T.matmul(self.A, p))
        return out if self.scale == 1.0 else T.mul(out, self.scale)

    def delta_matrix(self) -> np.ndarray:
        """Dense B @ A, used only on the cold merge path."""
        return self.scale * (self.B.data @ self.A.data)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


def init_lora(d_out: int, d_in: int, rank: int, init_std: float,
              seed: int | SeededRng, scale: float = 1.0) -> LoraPair:
    """A ~ N(0, init_std^2) from the seeded stream, B = 0."""
    if rank > min(d_out, d_in):
        raise ConfigError(
            f"rank {rank} exceeds min(d_out={d_out}, d_in={d_in})")
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    A = Tensor(rng.normal((rank, d_in), std=init_std), requires_grad=True)
    B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
    return LoraPair(A, B, rank, scale)


def context_delta(pair: LoraPair, h: Tensor) -> Tensor:
    """The B A h term of the context branch."""
    if h.ndim == 1:
        return pair.delta_vec(h)
    return pair.delta(h)


def prompt_summary_input(prompt_embeddings: Tensor) -> Tensor:
    """Mean over the prompt rows; the p fed to the prompt branch."""
    if prompt_embeddings.ndim != 2 or prompt_embeddings.shape[0] < 1:
        raise ContractError(
            f"prompt summary needs at least one embedding row, got shape "
            f"{prompt_embeddings.shape}")
    return T.mean(prompt_embeddings, axis=0)


class Fusion:
    """Combines the context-side output with the prompt-branch vector."""

    def __init__(self, kind: str, d_out: int, rng: SeededRng | None = None,
                 init_std: float = 0.02):
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion {kind!r}")
        self.kind = kind
        self.d_out = d_out
        self._scale = 1.0 / np.sqrt(d_out)
        if kind == "cross_attention":
            self.wq = Tensor(rng.normal((d_out, d_out), std=init_std), requires_grad=True)
            self.wv = Tensor(rng.normal((d_out, d_out), std=init_std), requires_grad=True)
        elif kind == "gate_attention":
            self.wg = Tensor(rng.normal((d_out, d_out), std=init_std), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        if self.kind == "cross_attention":
            return [self.wq, self.wv]
        if self.kind == "gate_attention":
            return [self.wg]
        return []

    def named_parameters(self) -> dict[str, Tensor]:
        if self.kind == "cross_attention":
            return {"fusion.wq": self.wq, "fusion.wv": self.wv}
        if self.kind == "gate_attention":
            return {"fusion.wg": self.wg}
        return {}

    def apply(self, context_term: Tensor, prompt_term: Tensor) -> Tensor:
        if self.kind == "mean_add":
            return T.add(context_term, prompt_term)
        if self.kind == "cross_attention":
            # prompt attends over positions; per-position additive share of
            # the projected prompt term
            query = T.matmul(self.wq, prompt_term)
            scores = T.mul(T.matmul(context_term, query), self._scale)
            weights = T.softmax(scores, axis=-1)
            value = T.matmul(self.wv, prompt_term)
            return T.add(context_term, T.outer(weights, value))
        # gate_attention: per-position sigmoid gate scales the prompt term
        gate = T.sigmoid(T.matmul(context_term, T.matmul(self.wg, prompt_term)))
        return T.add(context_term, T.outer(gate, prompt_term))


class AdaptedProjection:
    """Frozen linear projection plus optional context/prompt adapters.

    Forward input is row-major [L, d_in]; output [L, d_out] = x W^T + b
    plus whatever adapter branches are attached and unmerged.
    """

    def __init__(self, W: Tensor, b: Tensor):
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeError(f"projection W {W.shape} vs b {b.shape}")
        self.W = W
        self.b = b
        self.context_adapter: LoraPair | None = None
        self.prompt_adapters: list[LoraPair] = []
        self.fusion: Fusion | None = None
        self.combination = "horizontal"
        self.merged_context = False
        self.merged_prompt_for: str | None = None
        self._merged_prompt_vec: np.ndarray | None = None
        self._merged_prompt_delta: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def _prompt_delta_vec(self, p: Tensor) -> Tensor:
        total = self.prompt_adapters[0].delta_vec(p)
        for pair in self.prompt_adapters[1:]:
            total = T.add(total, pair.delta_vec(p))
        return total

    def __call__(self, x: Tensor, p: Tensor | None = None) -> Tensor:
        context_active = self.context_adapter is not None and not self.merged_context
        prompt_active = bool(self.prompt_adapters) and self.merged_prompt_for is None
        if self.merged_prompt_for is not None and p is not None:
            if fingerprint(p) != self.merged_prompt_for:
                raise MergeStateError(
                    "projection is merged for a different prompt summary")
        if prompt_active and p is None:
            raise ContractError(
                "prompt adapter attached and unmerged but no prompt summary given")

        base = T.add(T.matmul(x, T.transpose(self.W)), self.b)
        if not context_active and not prompt_active:
            return base

        if self.combination == "vertical" and prompt_active:
            # stacked: prompt shift feeds the context branch's input
            if not context_active:
                raise ContractError("vertical combination requires an unmerged "
                                    "context adapter")
            shifted = T.add(x, self._prompt_delta_vec(p))
            return T.add(base, self.context_adapter.delta(shifted))

        out = base
        if context_active:
            out = T.add(out, self.context_adapter.delta(x))
        if prompt_active:
            out = self.fusion.apply(out, self._prompt_delta_vec(p))
        return out

    # -- merging ------------------------------------------------------------

    def _guard_vertical_merge(self):
        if self.combination == "vertical" and self.prompt_adapters:
            raise MergeStateError(
                "vertical combination is not mergeable: the prompt shift "
                "passes through B A and cannot fold into a static bias")

    def merge_context(self) -> None:
        if self.context_adapter is None:
            raise MergeStateError("no context adapter to merge")
        if self.merged_context:
            raise MergeStateError("context adapter already merged")
        self._guard_vertical_merge()
        self.W.data += self.context_adapter.delta_matrix()
        self.merged_context = True

    def unmerge_context(self) -> None:
        if not self.merged_context:
            raise MergeStateError("context adapter is not merged")
        self.W.data -= self.context_adapter.delta_matrix()
        self.merged_context = False

    def merge_prompt(self, p) -> None:
        if not self.prompt_adapters:
            raise MergeStateError("no prompt adapter to merge")
        if self.merged_prompt_for is not None:
            raise MergeStateError("prompt adapter already merged")
        self._guard_vertical_merge()
        if self.fusion is not None and self.fusion.kind != "mean_add":
            raise MergeStateError(
                f"{self.fusion.kind} fusion is position-dependent and cannot "
                "merge into the bias")
        vec = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        if vec.shape != (self.prompt_adapters[0].d_in,):
            raise ShapeError(
                f"prompt summary shape {vec.shape} vs adapter d_in "
                f"{self.prompt_adapters[0].d_in}")
        delta = sum(pair.delta_matrix() @ vec for pair in self.prompt_adapters)
        self.b.data += delta
        self.merged_prompt_for = fingerprint(vec)
        self._merged_prompt_vec = vec.copy()
        self._merged_prompt_delta = delta

    def unmerge_prompt(self) -> None:
        if self.merged_prompt_for is None:
            raise MergeStateError("prompt adapter is not merged")
        self.b.data -= self._merged_prompt_delta
        self.merged_prompt_for = None
        self._merged_prompt_vec = None
        self._merged_prompt_delta = None

    # -- bookkeeping ----------------------------------------------------------

    def adapter_parameters(self) -> list[Tensor]:
        params = []
        if self.context_adapter is not None:
            params.extend(self.context_adapter.parameters())
        for pair in self.prompt_adapters:
            params.extend(pair.parameters())
        if self.fusion is not None:
            params.extend(self.fusion.parameters())
        return params

    def named_adapter_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.context_adapter is not None:
            out["context.A"] = self.context_adapter.A
            out["context.B"] = self.context_adapter.B
        for k, pair in enumerate(self.prompt_adapters):
            out[f"prompt.{k}.A"] = pair.A
            out[f"prompt.{k}.B"] = pair.B
        if self.fusion is not None:
            out.update(self.fusion.named_parameters())
        return out


@dataclass
class AdapterRegistry:
    """Immutable record of which projections carry which adapters."""

    config: DualLoraConfig
    projections: dict[str, AdaptedProjection] = field(default_factory=dict)

    def trainable_parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for proj in self.projections.values():
            params.extend(proj.adapter_parameters())
        return params

    def trainable_param_count(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def lora_param_count(self) -> int:
        """Closed-form sum of r * (d_in + d_out) over all factor pairs."""
        total = 0
        for proj in self.projections.values():
            pairs = ([proj.context_adapter] if proj.context_adapter else []) \
                + proj.prompt_adapters
            for pair in pairs:
                total += pair.rank * (pair.d_in + pair.d_out)
        return total

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, proj in self.projections.items():
            for suffix, t in proj.named_adapter_tensors().items():
                out[f"{name}.{suffix}"] = t
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ConfigError(
                f"adapter checkpoint mismatch: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}")
        for name, t in own.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(
                    f"adapter tensor {name}: {arrays[name].shape} vs {t.shape}")
            t.data[...] = arrays[name]


def attach_adapters(model, config: DualLoraConfig) -> AdapterRegistry:
    """Attach context+prompt pairs to the configured attention projections.

    Freezes every base tensor first; only adapter (and fusion) parameters
    remain trainable afterwards.
    """
    for t in model.parameters():
        t.requires_grad = False
    registry = AdapterRegistry(config=config)
    targets = set(config.target_projections)
    for block_name, mha, in_decoder in model.attention_blocks():
        for kind in "qkvo":
            if kind not in targets:
                continue
            proj: AdaptedProjection = getattr(mha, kind)
            name = f"{block_name}.{kind}"
            rng = SeededRng(config.seed).derive(name)
            proj.combination = config.combination
            proj.context_adapter = init_lora(
                proj.d_out, proj.d_in, config.rank, config.init_std,
                rng.derive("context"), config.scale)
            want_prompt = config.n_prompt_loras > 0 and \
                (config.prompt_in_decoder or not in_decoder)
            if want_prompt:
                p_out = proj.d_in if config.combination == "vertical" else proj.d_out
                proj.prompt_adapters = [
                    init_lora(p_out, proj.d_in, config.rank, config.init_std,
                              rng.derive(f"prompt.{k}"), config.scale)
                    for k in range(config.n_prompt_loras)]
                proj.fusion = Fusion(config.fusion, proj.d_out,
                                     rng.derive("fusion"), config.init_std)
            registry.projections[name] = proj
    for t in registry.trainable_parameters():
        t.requires_grad = True
    return registry


def detach_adapters(model) -> None:
    """Remove every adapter, restoring the plain projections."""
    for _, mha, _ in model.attention_blocks():
        for kind in "qkvo":
            proj: AdaptedProjection = getattr(mha, kind)
            if proj.merged_context:
                proj.unmerge_context()
            if proj.merged_prompt_for is not None:
                proj.unmerge_prompt()
            proj.context_adapter = None
            proj.prompt_adapters = []
            proj.fusion = None
            proj.combination = "horizontal"
