"""Synthetic trace-bundle generators with planted alignment structure.

Two families:

- redundant: each text question frame appears k times on the speech side,
  with copy c drawn from a later layer of an AR(1) layer chain so that the
  temporal smearing also widens the cross-layer similarity ridge as k grows.
- phases: speech layers split into a noise regime, a regime interpolating
  toward advancing text layers, and a regime locked onto the top text layer,
  with per-layer noise chosen from a measured noise-to-similarity table so
  the planted similarity curve is a step followed by a linear ramp.

All randomness flows through one seeded generator, so identical parameters
and seed give bit-identical bundles.
"""

from __future__ import annotations

import numpy as np

from .bundle import BundleError, BundleManifest, SampleMeta, TraceBundle

VOCAB_ROWS = 32
NUM_OPTIONS = 4
NUM_HEADS = 4
KEY_DIM = 8

# measured mean linear CKA between X and X + sigma * N(0,1) at T=96, D=16,
# used to invert a target similarity into a noise scale
_SIGMA_ANCHORS = np.array(
    [0.05, 0.10, 0.15, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90]
)
_CKA_ANCHORS = np.array(
    [0.9979, 0.9916, 0.9811, 0.9668, 0.9291, 0.8831, 0.8289, 0.7714, 0.7195, 0.6670, 0.6129]
)

# planted per-layer similarity targets for the phases fixture
_PHASE2_CKA_LO = 0.72
_PHASE2_CKA_HI = 0.985

_OPTION_LETTERS = "ABCD"


def sigma_for_cka(target: float) -> float:
    """Noise scale whose expected CKA against the clean matrix is target."""
    lo, hi = float(_CKA_ANCHORS[-1]), float(_CKA_ANCHORS[0])
    t = min(max(target, lo), hi)
    # np.interp needs ascending x
    return float(np.interp(t, _CKA_ANCHORS[::-1], _SIGMA_ANCHORS[::-1]))


def _attention_rows(rng: np.random.Generator, n_layers: int, t: int, alpha: float) -> np.ndarray:
    attn = rng.dirichlet(np.full(t, alpha), size=(n_layers, NUM_HEADS))
    return attn.astype(np.float64)


def _norm_curves(rng: np.random.Generator, n_layers: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    layer_scale = 1.0 + 0.15 * np.arange(n_layers)[:, None]
    preln = layer_scale + 0.01 * rng.standard_normal((n_layers, t))
    postln = 1.0 + 0.01 * rng.standard_normal((n_layers, t))
    return preln, postln


def _decision_column(
    rng: np.random.Generator, unembed: np.ndarray, n_layers: int, target_row: int
) -> np.ndarray:
    """Hidden states at the decision position, ramping toward one unembedding
    row so late-layer candidate margins have a definite sign."""
    d = unembed.shape[1]
    ramp = 3.0 * np.arange(n_layers) / max(n_layers - 1, 1)
    return ramp[:, None] * unembed[target_row] + 0.3 * rng.standard_normal((n_layers, d))


def _sample_meta(
    sample_id: str,
    dataset: str,
    modality: str,
    t_total: int,
    question_span: tuple[int, int],
    correct_option: int,
    answered_option: int,
    subject_label: int,
) -> SampleMeta:
    letter = _OPTION_LETTERS[answered_option]
    return SampleMeta(
        sample_id=sample_id,
        dataset=dataset,
        modality=modality,
        question_span=question_span,
        valid_mask=[True] * t_total,
        decision_position=t_total - 1,
        candidate_token_ids=list(range(NUM_OPTIONS)),
        correct_option=correct_option,
        generated_text=f"The answer is ({letter}).",
        subject_label=subject_label,
    )


def _assemble(
    model_name: str,
    dataset: str,
    hidden_dim: int,
    num_layers: int,
    rng: np.random.Generator,
    per_pair: list[dict],
) -> TraceBundle:
    """Shared bundle assembly: projection head plus per-pair arrays/metadata."""
    unembed = rng.standard_normal((VOCAB_ROWS, hidden_dim))
    arrays: dict[str, np.ndarray] = {
        "head/unembed_rows": unembed,
        "head/norm_weight": np.ones(hidden_dim),
    }
    samples: list[SampleMeta] = []
    for pair in per_pair:
        sid = pair["sample_id"]
        correct = pair["correct_option"]
        subject = pair["subject_label"]
        for modality in ("t2t", "s2t"):
            stack = pair[modality]  # (L, T_question, D), question tokens only
            n_layers_mod, t_q, _ = stack.shape
            answered = correct if modality == "t2t" else (correct + 1) % NUM_OPTIONS
            target_row = answered
            decision = _decision_column(rng, unembed, n_layers_mod, target_row)
            full = np.concatenate([stack, decision[:, None, :]], axis=1)
            t_total = t_q + 1
            alpha = 0.15 if modality == "t2t" else 5.0
            arrays[f"hidden/{sid}/{modality}"] = full
            arrays[f"attn/{sid}/{modality}"] = _attention_rows(rng, n_layers_mod, t_total, alpha)
            keys = pair.get(f"keys_{modality}")
            if keys is None:
                keys = rng.standard_normal((n_layers_mod, t_q, KEY_DIM))
            decision_key = rng.standard_normal((n_layers_mod, 1, KEY_DIM))
            arrays[f"keys/{sid}/{modality}"] = np.concatenate([keys, decision_key], axis=1)
            preln, postln = _norm_curves(rng, n_layers_mod, t_total)
            arrays[f"norms/{sid}/{modality}/preln"] = preln
            arrays[f"norms/{sid}/{modality}/postln"] = postln
            samples.append(
                _sample_meta(sid, dataset, modality, t_total, (0, t_q), correct, answered, subject)
            )
    manifest = BundleManifest(
        model_name=model_name,
        num_layers=num_layers,
        hidden_dim=hidden_dim,
        num_heads=NUM_HEADS,
        vocab_rows=VOCAB_ROWS,
        norm_kind="rmsnorm",
        norm_epsilon=1e-6,
        includes_embedding=False,
        full_vocab=True,
        row_token_ids=list(range(VOCAB_ROWS)),
        samples=samples,
        arrays={name: list(arr.shape) for name, arr in arrays.items()},
        key_dim=KEY_DIM,
    )
    # store-precision pass keeps in-memory bundles bit-identical to reread ones
    arrays = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in arrays.items()}
    bundle = TraceBundle(manifest=manifest, arrays=arrays)
    bundle.validate()
    return bundle


def gen_fixture_redundant(
    k: int,
    t_t: int,
    d: int,
    noise_sigma: float,
    seed: int,
    num_layers: int = 16,
    num_pairs: int = 1,
) -> TraceBundle:
    """Planted temporal redundancy: speech question frame (layer, t*k + c)
    equals text frame (min(layer + c, L - 1), t) plus Gaussian noise.

    Text layers form an AR(1) chain over depth, so copy c of a frame still
    matches its source token at every layer while pulling the cross-layer
    similarity ridge wider as k grows. k=1 with zero noise reproduces the
    text stack exactly.
    """
    if k < 1:
        raise BundleError("repetition factor k must be >= 1")
    if t_t < 2:
        raise BundleError("text question length must be >= 2")
    if noise_sigma < 0:
        raise BundleError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    rho = 0.9
    pairs = []
    for p in range(num_pairs):
        subject = p % 2
        text = np.empty((num_layers, t_t, d))
        text[0] = rng.standard_normal((t_t, d))
        for layer in range(1, num_layers):
            text[layer] = rho * text[layer - 1] + np.sqrt(1 - rho * rho) * rng.standard_normal(
                (t_t, d)
            )
        speech = np.empty((num_layers, t_t * k, d))
        for c in range(k):
            src = np.minimum(np.arange(num_layers) + c, num_layers - 1)
            speech[:, c::k, :] = text[src] + noise_sigma * rng.standard_normal(
                (num_layers, t_t, d)
            )
        # class offset for probing; removed by column centering so the
        # similarity structure is unchanged
        offset = np.zeros(d)
        offset[subject] = 1.5
        text = text + offset
        speech = speech + offset
        key_base = rng.standard_normal((num_layers, t_t, KEY_DIM))
        keys_s2t = np.repeat(key_base, k, axis=1)  # copies share one key exactly
        pairs.append(
            {
                "sample_id": f"item{p:03d}",
                "correct_option": p % NUM_OPTIONS,
                "subject_label": subject,
                "t2t": text,
                "s2t": speech,
                "keys_s2t": keys_s2t,
            }
        )
    return _assemble("fixture-redundant", "synthetic-redundant", d, num_layers, rng, pairs)


def gen_fixture_phases(
    l_s: int,
    l_t: int,
    b1: int,
    b3: int,
    seed: int,
    t_q: int = 96,
    d: int = 16,
    num_pairs: int = 1,
) -> TraceBundle:
    """Planted three-phase speech trajectory against independent text layers.

    Speech layers below b1 are pure noise; layers in [b1, b3) equal an
    advancing text layer plus noise scheduled so the planted similarity rises
    linearly from {lo} to {hi}; layers at and above b3 repeat the top text
    layer. The per-pair top speech layer is close enough to the top text
    layer that alignment there recovers the identity token mapping.
    """
    if not 0 < b1 < b3 < l_s:
        raise BundleError("need 0 < b1 < b3 < L_s")
    if b3 < int(np.ceil(0.6 * l_s)):
        raise BundleError("b3 must lie in the final 40% of speech layers")
    rng = np.random.default_rng(seed)
    n2 = b3 - b1
    cka_targets = np.linspace(_PHASE2_CKA_LO, _PHASE2_CKA_HI, n2)
    sigma_tail = sigma_for_cka(_PHASE2_CKA_HI)
    pairs = []
    for p in range(num_pairs):
        subject = p % 2
        text = rng.standard_normal((l_t, t_q, d))
        speech = np.empty((l_s, t_q, d))
        for i in range(l_s):
            if i < b1:
                speech[i] = rng.standard_normal((t_q, d))
                continue
            if i < b3:
                if n2 > 1:
                    m = int(round((i - b1) * (l_t - 1) / (n2 - 1)))
                else:
                    m = l_t - 1
                sigma = sigma_for_cka(float(cka_targets[i - b1]))
            else:
                m = l_t - 1
                sigma = sigma_tail
            speech[i] = text[m] + sigma * rng.standard_normal((t_q, d))
        offset = np.zeros(d)
        offset[subject] = 1.5
        pairs.append(
            {
                "sample_id": f"item{p:03d}",
                "correct_option": p % NUM_OPTIONS,
                "subject_label": subject,
                "t2t": text + offset,
                "s2t": speech + offset,
            }
        )
    return _assemble("fixture-phases", "synthetic-phases", d, l_t, rng, pairs)


gen_fixture_phases.__doc__ = gen_fixture_phases.__doc__.format(
    lo=_PHASE2_CKA_LO, hi=_PHASE2_CKA_HI
)
