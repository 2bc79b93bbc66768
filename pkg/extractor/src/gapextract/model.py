"""Deterministic numpy toy transformer LM with capture hooks.

Small pre-norm decoder: rmsnorm, multi-head causal attention, a two-layer
MLP, tied unembedding, greedy decoding. Forward passes capture per-layer
hidden states, per-layer key matrices, decision-position attention rows,
and pre/post-norm token norms. Runtime interventions supported:

- input calibration: an affine per-dimension transform applied to the input
  embeddings of a token span before layer 0;
- output calibration: the same transform applied to the final hidden states
  of a span before unembedding;
- KV merging: at planned layers, each planned token group's keys and values
  collapse to the group mean held by the group's first token; the other
  group members drop out of the KV sequence at those layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import VOCAB_SIZE


@dataclass
class Captures:
    hiddens: list[np.ndarray] = field(default_factory=list)  # L+1 entries (T, D)
    keys: list[np.ndarray] = field(default_factory=list)  # L entries (T, D)
    decision_attn: np.ndarray | None = None  # (L, H, T)
    preln: np.ndarray | None = None  # (L + 1, T)
    postln: np.ndarray | None = None  # (L + 1, T)


@dataclass
class RuntimeInterventions:
    input_affine: tuple[np.ndarray, np.ndarray] | None = None  # (scale, shift)
    input_span: tuple[int, int] | None = None
    output_affine: tuple[np.ndarray, np.ndarray] | None = None
    output_span: tuple[int, int] | None = None
    merge_groups: dict[int, list[list[int]]] = field(default_factory=dict)  # absolute indices


class ToyLM:
    """Parameters are drawn once from the model seed; every forward pass is
    a pure function of its inputs."""

    def __init__(self, seed: int = 0, dim: int = 16, n_heads: int = 4, n_layers: int = 6):
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.head_dim = dim // n_heads
        scale = 1.0 / np.sqrt(dim)
        self.embed = rng.standard_normal((VOCAB_SIZE, dim))
        self.layers = []
        for _ in range(n_layers):
            self.layers.append(
                {
                    "wq": rng.standard_normal((dim, dim)) * scale,
                    "wk": rng.standard_normal((dim, dim)) * scale,
                    "wv": rng.standard_normal((dim, dim)) * scale,
                    "wo": rng.standard_normal((dim, dim)) * scale,
                    "w1": rng.standard_normal((dim, 2 * dim)) * scale,
                    "w2": rng.standard_normal((2 * dim, dim)) * scale,
                    "g1": np.ones(dim),
                    "g2": np.ones(dim),
                }
            )
        self.final_norm_weight = np.ones(dim)
        self.norm_eps = 1e-6

    def _rms(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + self.norm_eps) * g

    def _positions(self, t: int) -> np.ndarray:
        pos = np.arange(t)[:, None]
        freqs = np.exp(-np.arange(self.dim // 2) * (np.log(1e4) / (self.dim // 2)))
        angles = pos * freqs[None, :]
        return 0.3 * np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def input_embeddings(self, token_ids: list[int]) -> np.ndarray:
        return self.embed[np.asarray(token_ids, dtype=int)]

    def forward(
        self,
        x: np.ndarray,
        interventions: RuntimeInterventions | None = None,
        decision_pos: int | None = None,
        capture: bool = False,
    ) -> tuple[np.ndarray, Captures | None]:
        """Run the stack over input embeddings x (T, D); returns final-layer
        logits (T, V) and captures for the requested decision position."""
        iv = interventions or RuntimeInterventions()
        x = np.asarray(x, dtype=np.float64).copy()
        t = x.shape[0]
        if iv.input_affine is not None and iv.input_span is not None:
            a, b = iv.input_span
            scale, shift = iv.input_affine
            x[a:b] = x[a:b] * scale + shift
        x = x + self._positions(t)
        caps = Captures() if capture else None
        if capture:
            caps.hiddens.append(x.copy())
            caps.decision_attn = np.zeros((self.n_layers, self.n_heads, t))
            # one row per hidden state: layer norms plus the final norm
            caps.preln = np.zeros((self.n_layers + 1, t))
            caps.postln = np.zeros((self.n_layers + 1, t))
        hd = self.head_dim
        for li, layer in enumerate(self.layers):
            normed = self._rms(x, layer["g1"])
            if capture:
                caps.preln[li] = np.linalg.norm(x, axis=1)
                caps.postln[li] = np.linalg.norm(normed, axis=1)
            q = normed @ layer["wq"]
            k = normed @ layer["wk"]
            v = normed @ layer["wv"]
            if capture:
                caps.keys.append(k.copy())
            # merged layers attend over a reduced KV sequence
            kv_index = np.arange(t)
            groups = iv.merge_groups.get(li, [])
            if groups:
                keep = np.ones(t, dtype=bool)
                for g in groups:
                    leader = g[0]
                    k[leader] = k[g].mean(axis=0)
                    v[leader] = v[g].mean(axis=0)
                    keep[g[1:]] = False
                kv_index = np.flatnonzero(keep)
                k, v = k[kv_index], v[kv_index]
            ctx = np.zeros_like(x)
            for h in range(self.n_heads):
                sl = slice(h * hd, (h + 1) * hd)
                scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
                mask = kv_index[None, :] > np.arange(t)[:, None]  # causal
                scores = np.where(mask, -np.inf, scores)
                scores -= scores.max(axis=1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=1, keepdims=True)
                ctx[:, sl] = w @ v[:, sl]
                if capture and decision_pos is not None:
                    # scatter reduced weights back to full positions so rows
                    # stay length-T and still sum to 1
                    caps.decision_attn[li, h, kv_index] = w[decision_pos]
            x = x + ctx @ layer["wo"]
            normed2 = self._rms(x, layer["g2"])
            x = x + np.maximum(normed2 @ layer["w1"], 0.0) @ layer["w2"]
            if capture:
                caps.hiddens.append(x.copy())
        if iv.output_affine is not None and iv.output_span is not None:
            a, b = iv.output_span
            scale, shift = iv.output_affine
            x[a:b] = x[a:b] * scale + shift
        final = self._rms(x, self.final_norm_weight)
        if capture:
            caps.preln[self.n_layers] = np.linalg.norm(x, axis=1)
            caps.postln[self.n_layers] = np.linalg.norm(final, axis=1)
        logits = final @ self.embed.T
        return logits, caps

    def generate_greedy(
        self,
        prompt: np.ndarray,
        max_new_tokens: int,
        interventions: RuntimeInterventions | None = None,
        stop_id: int | None = None,
    ) -> list[int]:
        """Greedy continuation; new tokens re-enter through the embedding
        table. Interventions keep their absolute spans and layer groups."""
        x = np.asarray(prompt, dtype=np.float64)
        out: list[int] = []
        for _ in range(max_new_tokens):
            logits, _ = self.forward(x, interventions)
            nxt = int(logits[-1].argmax())
            out.append(nxt)
            if stop_id is not None and nxt == stop_id:
                break
            x = np.concatenate([x, self.embed[nxt][None, :]])
        return out
