"""Frozen-encoder / adapter-decoder sequence model.

Each decoder block ends in a mixture of bottleneck adapters (one per task)
whose outputs are blended by a softmax router. Event labels are emitted as
token sequences ``<bos> label... <eos>`` and read back with greedy decoding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .audio import NUM_BINS, EventLabel, FeatureSeq
from .numerics import DTYPE, DimensionError, softmax

BOS, EOS = "<bos>", "<eos>"
CHECKPOINT_VERSION = 1
ENCODER_SEED = 20240521


def _uniform(gen: torch.Generator, *shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(_uniform(gen, d_in, d_out, fan_in=d_in))
        self.bias = nn.Parameter(_uniform(gen, d_out, fan_in=d_in)) if bias else None

    def forward(self, x):
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


def adapter_forward(h: torch.Tensor, w_down: torch.Tensor, w_up: torch.Tensor) -> torch.Tensor:
    """Residual bottleneck transform ``h + relu(h @ w_down) @ w_up``."""
    if h.shape[-1] != w_down.shape[0] or w_down.shape[1] != w_up.shape[0] \
            or w_up.shape[1] != h.shape[-1]:
        raise DimensionError(
            f"adapter shapes {tuple(w_down.shape)}, {tuple(w_up.shape)} do not fit input "
            f"width {h.shape[-1]}")
    return h + torch.relu(h @ w_down) @ w_up


class AdapterExpert(nn.Module):
    def __init__(self, d: int, b: int, owner_task: int, gen: torch.Generator):
        super().__init__()
        if not b < d:
            raise ValueError("bottleneck must be narrower than the hidden width")
        self.owner_task = owner_task
        self.w_down = nn.Parameter(_uniform(gen, d, b, fan_in=d))
        # zero up-projection: a new expert is an exact identity
        self.w_up = nn.Parameter(torch.zeros(b, d, dtype=DTYPE))

    @property
    def frozen(self) -> bool:
        return not self.w_down.requires_grad

    def forward(self, h):
        return adapter_forward(h, self.w_down, self.w_up)


class Router(nn.Module):
    """Linear gate ``pooled @ W_g``; one zero-initialised column per expert."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.columns = nn.ParameterList()

    def add_column(self) -> None:
        self.columns.append(nn.Parameter(torch.zeros(self.d, dtype=DTYPE)))

    @property
    def weight(self) -> torch.Tensor:
        return torch.stack(list(self.columns), dim=1)

    def __len__(self):
        return len(self.columns)


def route(router: Router, block_input: torch.Tensor, causal: bool = False):
    """Router weights and logits for ``block_input`` of shape ``(..., p, d)``.

    With ``causal=False`` the input is mean-pooled over positions, giving one
    weight vector per sequence. With ``causal=True`` position j pools only
    positions ``<= j`` so decoding sees the same routing as teacher forcing.
    """
    if len(router) == 0:
        raise ValueError("router has no experts")
    if causal:
        p = block_input.shape[-2]
        counts = torch.arange(1, p + 1, dtype=DTYPE).unsqueeze(-1)
        pooled = block_input.cumsum(dim=-2) / counts
    else:
        pooled = block_input.mean(dim=-2)
    logits = pooled @ router.weight
    return softmax(logits, dim=-1), logits


class MoELayer(nn.Module):
    def __init__(self, d: int, b: int):
        super().__init__()
        self.d, self.b = d, b
        self.experts = nn.ModuleList()
        self.router = Router(d)

    def add_expert(self, owner_task: int, gen: torch.Generator) -> None:
        self.experts.append(AdapterExpert(self.d, self.b, owner_task, gen))
        self.router.add_column()

    def forward(self, h: torch.Tensor, causal: bool = True):
        alpha, logits = route(self.router, h, causal=causal)
        outs = torch.stack([expert(h) for expert in self.experts], dim=-1)
        weights = alpha.unsqueeze(-2) if causal else alpha[..., None, None, :]
        return (outs * weights).sum(dim=-1), logits, alpha


def moe_forward(layer: MoELayer, block_input: torch.Tensor) -> torch.Tensor:
    """Sequence-pooled mixture ``sum_i alpha_i * E_i(H)`` for one ``p x d`` input."""
    out, _, _ = layer(block_input, causal=False)
    return out


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.heads = heads
        self.q = Linear(d, d, gen)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = Linear(d, d, gen, bias=False)
        self.v = Linear(d, d, gen)
        self.o = Linear(d, d, gen)

    def forward(self, x, mem=None, key_mask=None, causal=False):
        mem = x if mem is None else mem
        B, P, d = x.shape
        T = mem.shape[1]
        h = self.heads
        q = self.q(x).view(B, P, h, d // h).transpose(1, 2)
        k = self.k(mem).view(B, T, h, d // h).transpose(1, 2)
        v = self.v(mem).view(B, T, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            tri = torch.ones(P, T, dtype=torch.bool).tril()
            scores = scores.masked_fill(~tri, float("-inf"))
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = softmax(scores, dim=-1)
        return self.o((attn @ v).transpose(1, 2).reshape(B, P, d))


def sinusoid(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, d, 2, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.attn = Attention(d, heads, gen)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.ff1 = Linear(d, 2 * d, gen)
        self.ff2 = Linear(2 * d, d, gen)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), key_mask=mask)
        return x + self.ff2(torch.relu(self.ff1(self.ln2(x))))


class Encoder(nn.Module):
    """Fixed-seed random transformer encoder over log-spectrogram frames.

    Frames are average-pooled in time by ``pool`` before projection.
    """

    def __init__(self, d: int = 64, heads: int = 4, layers: int = 2, pool: int = 2,
                 seed: int = ENCODER_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.pool = pool
        self.proj = Linear(NUM_BINS, d, gen)
        self.blocks = nn.ModuleList(EncoderBlock(d, heads, gen) for _ in range(layers))
        self.ln = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        _freeze(self)

    def pool_frames(self, frames: np.ndarray) -> torch.Tensor:
        n = max(1, frames.shape[0] // self.pool)
        x = frames[: n * self.pool] if frames.shape[0] >= self.pool else frames
        return torch.as_tensor(x.reshape(n, -1, frames.shape[1]).mean(axis=1), dtype=DTYPE)

    def forward(self, x, mask):
        x = self.proj(x)
        x = x + sinusoid(x.shape[1], x.shape[2])
        for block in self.blocks:
            x = block(x, mask)
        return self.ln(x)


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, b: int, gen: torch.Generator):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.self_attn = Attention(d, heads, gen)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.cross_attn = Attention(d, heads, gen)
        self.moe = MoELayer(d, b)

    def forward(self, x, mem, mem_mask):
        x = x + self.self_attn(self.ln1(x), causal=True)
        x = x + self.cross_attn(self.ln2(x), mem, key_mask=mem_mask)
        return self.moe(x, causal=True)


@dataclass
class RouterTrace:
    """Per-block router logits and weights, each ``(batch, positions, experts)``."""
    logits: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def instance_logits(self, pos_mask: torch.Tensor) -> torch.Tensor:
        """Block-summed logits per instance, averaged over valid positions."""
        m = pos_mask.to(DTYPE)[..., None]
        total = sum(lg for lg in self.logits)
        return (total * m).sum(dim=1) / m.sum(dim=1)


_ENCODER_CACHE: dict = {}


class MoeDecoderModel(nn.Module):
    def __init__(self, d: int = 64, heads: int = 4, bottleneck: int = 16,
                 encoder_layers: int = 2, decoder_layers: int = 2, pool: int = 2,
                 seed: int = 0, encoder_seed: int = ENCODER_SEED):
        super().__init__()
        self.config = dict(d=d, heads=heads, bottleneck=bottleneck, encoder_layers=encoder_layers,
                           decoder_layers=decoder_layers, pool=pool, seed=seed,
                           encoder_seed=encoder_seed)
        self.d = d
        self.encoder = Encoder(d, heads, encoder_layers, pool, encoder_seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList(DecoderBlock(d, heads, bottleneck, self.gen)
                                    for _ in range(decoder_layers))
        self.ln_f = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        # vocabulary-sized tensors grow in chunks as new labels arrive
        self.embed_chunks = nn.ParameterList()
        self.head_w = nn.ParameterList()
        self.head_b = nn.ParameterList()
        self.tokens: list[str] = []
        self.token_index: dict[str, int] = {}
        self.expert_owners: list[int] = []
        self._add_tokens([BOS, EOS])
        _freeze(self.blocks)

    # -- vocabulary -------------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def _add_tokens(self, new: list[str]) -> None:
        if not new:
            return
        k = len(new)
        emb = torch.randn(k, self.d, generator=self.gen, dtype=DTYPE)
        self.embed_chunks.append(nn.Parameter(emb, requires_grad=False))
        self.head_w.append(nn.Parameter(_uniform(self.gen, k, self.d, fan_in=self.d)))
        self.head_b.append(nn.Parameter(torch.zeros(k, dtype=DTYPE)))
        for tok in new:
            self.token_index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def add_labels(self, labels) -> list[str]:
        new = [lab.key for lab in sorted(labels, key=lambda x: x.key)
               if lab.key not in self.token_index]
        self._add_tokens(new)
        return new

    def encode_labels(self, labels) -> list[int]:
        from .audio import sort_labels
        try:
            return [self.token_index[lab.key] for lab in sort_labels(labels)]
        except KeyError as exc:
            raise KeyError(f"unknown token {exc.args[0]}") from None

    def label_tokens(self) -> list[int]:
        return list(range(2, self.vocab_size))

    # -- experts ----------------------------------------------------------
    @property
    def num_experts(self) -> int:
        return len(self.expert_owners)

    def expert_index(self, task_id: int) -> int:
        try:
            return self.expert_owners.index(task_id)
        except ValueError:
            raise KeyError(f"no expert owned by task {task_id}") from None

    def add_expert(self, task_id: int, freeze_previous: bool = True) -> None:
        if task_id in self.expert_owners:
            raise ValueError(f"task {task_id} already owns an expert")
        for block in self.blocks:
            if freeze_previous:
                for expert in block.moe.experts:
                    _freeze(expert)
            block.moe.add_expert(task_id, self.gen)
        self.expert_owners.append(task_id)

    def trainable_parameters(self) -> list[torch.Tensor]:
        params = []
        for block in self.blocks:
            for expert in block.moe.experts:
                params += [p for p in expert.parameters() if p.requires_grad]
            params += list(block.moe.router.columns)
        params += list(self.head_w) + list(self.head_b)
        return params

    def backbone_state(self) -> dict:
        """Attention weights of every decoder block (the part shared by all tasks)."""
        return {name: p.detach().clone() for name, p in self.blocks.named_parameters()
                if ".self_attn." in name or ".cross_attn." in name}

    def load_backbone(self, state: dict) -> None:
        params = dict(self.blocks.named_parameters())
        for name, value in state.items():
            if name not in params or params[name].shape != value.shape:
                raise DimensionError(f"backbone tensor {name!r} does not fit this model")
        with torch.no_grad():
            for name, value in state.items():
                params[name].copy_(value)

    # -- forward ----------------------------------------------------------
    def encode(self, features) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a list of feature matrices (or FeatureSeq) to padded memory + mask.

        Outputs are cached per feature matrix since the encoder is frozen.
        """
        outs = []
        sig = (self.config["encoder_seed"], self.d, self.config["heads"],
               self.config["encoder_layers"], self.config["pool"])
        for f in features:
            frames = f.frames if isinstance(f, FeatureSeq) else f
            key = (sig, frames.shape, hash(frames.tobytes()))
            hit = _ENCODER_CACHE.get(key)
            if hit is None:
                x = self.encoder.pool_frames(frames)[None]
                with torch.no_grad():
                    hit = self.encoder(x, torch.ones(1, x.shape[1], dtype=torch.bool))[0]
                _ENCODER_CACHE[key] = hit
            outs.append(hit)
        T = max(o.shape[0] for o in outs)
        mem = torch.zeros(len(outs), T, self.d, dtype=DTYPE)
        mask = torch.zeros(len(outs), T, dtype=torch.bool)
        for i, o in enumerate(outs):
            mem[i, : o.shape[0]] = o
            mask[i, : o.shape[0]] = True
        return mem, mask

    def decode_logits(self, mem, mem_mask, tokens: torch.Tensor):
        """Teacher-forced logits ``(B, P, V)`` and the router trace."""
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise KeyError("unknown token id")
        if self.num_experts == 0:
            raise RuntimeError("model has no experts; call add_expert first")
        emb = torch.cat(list(self.embed_chunks), dim=0)
        P = tokens.shape[1]
        x = emb[tokens] + sinusoid(P, self.d)
        trace = RouterTrace()
        for block in self.blocks:
            x, logits, alpha = block(x, mem, mem_mask)
            trace.logits.append(logits)
            trace.weights.append(alpha)
        x = self.ln_f(x)
        W = torch.cat(list(self.head_w), dim=0)
        bias = torch.cat(list(self.head_b), dim=0)
        return x @ W.T + bias, trace

    def forward(self, features, target_prefix):
        """Logits ``(len(prefix), V)`` for one clip's features and a token prefix."""
        prefix = [self.token_index[t] if isinstance(t, str) else int(t) for t in target_prefix]
        if not prefix or prefix[0] != self.token_index[BOS]:
            raise ValueError("prefix must start with <bos>")
        mem, mask = self.encode([features])
        logits, trace = self.decode_logits(mem, mask, torch.tensor([prefix]))
        return logits[0], trace

    @torch.no_grad()
    def decode_batch(self, mem, mem_mask, max_len: int = 4) -> list[list[int]]:
        """Greedy decoding; ties go to the lowest token index."""
        B = mem.shape[0]
        eos = self.token_index[EOS]
        seqs = torch.full((B, 1), self.token_index[BOS], dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(max_len):
            logits, _ = self.decode_logits(mem, mem_mask, seqs)
            nxt = logits[:, -1].argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, eos), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            done |= nxt == eos
            if done.all():
                break
        out = []
        for row in seqs[:, 1:].tolist():
            out.append(row[: row.index(eos)] if eos in row else row)
        return out

    def decode_greedy(self, features, max_len: int = 4) -> list[str]:
        mem, mask = self.encode([features])
        return [self.tokens[i] for i in self.decode_batch(mem, mask, max_len)[0]]

    def tokens_to_labels(self, ids) -> frozenset:
        return frozenset(EventLabel.from_key(self.tokens[i]) for i in ids if i >= 2)

    # -- checkpoints ------------------------------------------------------
    def encoder_checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.encoder.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    def parameter_checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "tokens": self.tokens,
            "token_chunks": [int(c.shape[0]) for c in self.embed_chunks],
            "experts": [
                {"block": bi, "owner_task": e.owner_task, "frozen": e.frozen}
                for bi, block in enumerate(self.blocks) for e in block.moe.experts
            ],
        }
        arrays = {name: p.detach().numpy() for name, p in self.named_parameters()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "MoeDecoderModel":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(**meta["config"])
            start = 2
            for k in meta["token_chunks"][1:]:
                model._add_tokens(meta["tokens"][start:start + k])
                start += k
            owners = [e["owner_task"] for e in meta["experts"] if e["block"] == 0]
            for owner in owners:
                model.add_expert(owner, freeze_previous=False)
            model.load_arrays({k: data[k] for k in data.files if k != "__meta__"})
            frozen = {(e["block"], e["owner_task"]): e["frozen"] for e in meta["experts"]}
        for bi, block in enumerate(model.blocks):
            for expert in block.moe.experts:
                expert.requires_grad_(not frozen[(bi, expert.owner_task)])
        return model

    def load_arrays(self, arrays: dict) -> None:
        params = dict(self.named_parameters())
        if set(arrays) != set(params):
            raise DimensionError("checkpoint parameter names do not match the model")
        for name, p in params.items():
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise DimensionError(
                    f"{name}: checkpoint shape {arrays[name].shape} != model {tuple(p.shape)}")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.as_tensor(arrays[name]))
