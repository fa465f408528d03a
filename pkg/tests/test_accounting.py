import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftacl.accounting import (
    MODES,
    PRESETS,
    ModelSpec,
    adapter_shapes,
    backbone_shapes,
    checkpoint_nbytes,
    complexity_report,
    format_param_report,
    head_shapes,
    param_report,
)
from ftacl.adapter import AdapterConfig, AdapterSet
from ftacl.encoder import ASTBackbone, EncoderConfig, LinearHead, build_fta_mask
from ftacl.fileformat import save_bundle
from ftacl.tokenizer import TokenGrid, TokenizerConfig

FULL = PRESETS["paper-full"]


@pytest.mark.parametrize(
    "M,T_,gsa,fta,k",
    [(12, 9, 11881, 2377, "0.2"), (12, 49, 346921, 36457, "0.105"), (12, 100, 1442401, 135601, "0.094"), (1, 1, 4, 4, "1.0")],
)
def test_complexity_golden(M, T_, gsa, fta, k):
    r = complexity_report(TokenGrid(M, T_))
    assert (r.o_gsa_over_d, r.o_fta_over_d, r.k_display) == (gsa, fta, k)


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 64))
def test_fta_count_equals_mask_nnz_times_d(M, T_, d):
    g = TokenGrid(M, T_)
    r = complexity_report(g, d)
    assert r.o_fta == build_fta_mask(g).nnz * d
    assert r.o_gsa == g.n_tokens**2 * d
    if M >= 2 and T_ >= 2:
        assert r.o_fta < r.o_gsa


def test_full_preset_totals():
    full = param_report(FULL, "full_finetune", 1)
    assert abs(full.total - 86.33e6) / 86.33e6 < 0.02
    ai = param_report(FULL, "adapter_incremental", 3)
    assert abs(ai.total - 96.6e6) / 96.6e6 < 0.05
    assert ai.trainable_fraction < 0.05
    assert ai.components["adapters"] == 3 * 3_265_536
    mi = param_report(FULL, "model_incremental", 3)
    assert abs(mi.total - 259.63e6) / 259.63e6 < 0.02
    ms = param_report(FULL, "model_sequential", 3)
    assert abs(ms.total - 86.62e6) / 86.62e6 < 0.02


def test_per_task_checkpoint_ratio_at_full_scale():
    full = checkpoint_nbytes({**backbone_shapes(FULL), **head_shapes(768, 50)}, {"kind": "model-inc"})
    task = checkpoint_nbytes({**adapter_shapes(FULL), **head_shapes(768, 50)}, {"kind": "adapter-inc"})
    assert task / full < 0.15
    rep = param_report(FULL, "adapter_incremental", 3)
    assert rep.per_task_checkpoint_bytes / param_report(FULL).storage_bytes < 0.15


def test_report_modes_and_errors():
    for mode in MODES:
        text = format_param_report(param_report(PRESETS["desk"], mode, 2))
        assert f"mode={mode}" in text and "total=" in text
    with pytest.raises(ValueError):
        param_report(FULL, "lora")
    with pytest.raises(ValueError):
        param_report(FULL, "full_finetune", 0)


def instantiate(s: ModelSpec, rng):
    tok = TokenizerConfig(kernel=s.kernel, embed_dim=s.d, in_channels=s.in_channels)
    enc = EncoderConfig(layers=s.layers, embed_dim=s.d, heads=s.heads, mlp_ratio=s.mlp_ratio)
    bb = ASTBackbone(tok, enc, TokenGrid(*s.pos_grid), rng)
    ad = AdapterSet(AdapterConfig(s.d, s.bottleneck, s.adapter_kernel), s.layers, rng)
    heads = [LinearHead(s.d, c, rng) for c in s.classes]
    return bb, ad, heads


specs = st.builds(
    lambda d, layers, ch, m0, t0, bf, classes: ModelSpec(
        d=d, layers=layers, heads=1, in_channels=ch, pos_grid=(m0, t0), bottleneck=max(1, d // bf), classes=classes
    ),
    st.integers(4, 24),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(2, 4),
    st.lists(st.integers(2, 9), min_size=1, max_size=3).map(tuple),
)


@given(specs)
@settings(max_examples=25, deadline=None)
def test_closed_form_matches_instantiated_models(s):
    bb, ad, heads = instantiate(s, np.random.default_rng(0))
    tasks = len(s.classes)
    hp = sum(h.num_parameters() for h in heads)
    assert param_report(s, "full_finetune", 1).total == bb.num_parameters() + heads[0].num_parameters()
    assert param_report(s, "adapter_incremental", tasks).total == bb.num_parameters() + tasks * ad.num_parameters() + hp
    assert param_report(s, "model_incremental", tasks).total == tasks * bb.num_parameters() + hp
    assert {k: v.shape for k, v in bb.state_dict().items()} == backbone_shapes(s)
    assert {"adapters." + k: v.shape for k, v in ad.state_dict().items()} == adapter_shapes(s)
    assert {"head." + k: v.shape for k, v in heads[0].state_dict().items()} == head_shapes(s.d, s.classes[0])


def test_checkpoint_size_matches_written_file(tmp_path):
    s = PRESETS["desk"]
    _, ad, heads = instantiate(s, np.random.default_rng(1))
    state = {"head." + k: v.astype(np.float32) for k, v in heads[0].state_dict().items()}
    state.update({"adapters." + k: v.astype(np.float32) for k, v in ad.state_dict().items()})
    meta = {"format_version": 1, "kind": "adapter-inc", "task_id": 1}
    n = save_bundle(tmp_path / "t.ftck", state, meta)
    assert n == (tmp_path / "t.ftck").stat().st_size
    assert n == checkpoint_nbytes({**adapter_shapes(s), **head_shapes(s.d, 4)}, meta)
