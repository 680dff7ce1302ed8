import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitilab.attention import WiringMode
from mitilab.data import SceneObject, SceneSpec
from mitilab.detr import (
    ModelConfig,
    anchor_queries,
    check_params,
    count_parameters,
    embed_features,
    embed_scene,
    init_model,
    model_forward,
    positional_encoding,
    scene_features,
)
from mitilab.tensor import NumericError, Tensor

SMALL = ModelConfig(d_model=16, heads=2, d_qk=8, d_v=8, h_mlp=24, enc_layers=2, dec_layers=2,
                    num_queries=5, num_classes=2, grid_size=4)


def scene(*objects, sid=0):
    return SceneSpec(sid, tuple(SceneObject(*o) for o in objects))


def random_tokens(cfg, seed, batch=None):
    shape = (cfg.n_tokens, cfg.d_model) if batch is None else (batch, cfg.n_tokens, cfg.d_model)
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def closed_form_count(cfg: ModelConfig) -> int:
    d, H, dqk, dv, h, C, Q = (cfg.d_model, cfg.heads, cfg.d_qk, cfg.d_v, cfg.h_mlp,
                              cfg.num_classes, cfg.num_queries)
    attn = H * (2 * d * dqk + d * dv) + H * dv * d
    mlp = d * h + h + h * d + d
    enc = attn + mlp + 4 * d
    dec = 2 * attn + mlp + 6 * d
    heads = d * (C + 1) + (C + 1) + 2 * (d * d + d) + 4 * d + 4
    embed = cfg.feature_dim * d + d
    return embed + Q * d + cfg.enc_layers * enc + cfg.dec_layers * dec + heads


def test_empty_scene_tokens_are_the_bias_row():
    params = init_model(SMALL, 0)
    tokens = embed_scene(scene(), SMALL, params).data
    np.testing.assert_array_equal(tokens, np.tile(params["embed.b"].data, (SMALL.n_tokens, 1)))


def test_identical_scenes_embed_identically():
    params = init_model(SMALL, 0)
    s = scene((1, 0.4, 0.4, 0.2, 0.3))
    np.testing.assert_array_equal(embed_scene(s, SMALL, params).data, embed_scene(s, SMALL, params).data)


def test_moving_an_object_one_cell_changes_only_the_cells_it_touches():
    g = SMALL.grid_size
    a = scene((0, 0.3125, 0.3125, 0.125, 0.125))  # exactly the cell block rows/cols 1
    b = scene((0, 0.5625, 0.3125, 0.125, 0.125))  # one cell to the right
    fa = scene_features(a, g, SMALL.num_classes)
    fb = scene_features(b, g, SMALL.num_classes)
    changed = {int(i) for i in np.flatnonzero(np.any(fa != fb, axis=1))}
    touched = set()
    for s in (a, b):
        o = s.objects[0]
        for gy, gx in itertools.product(range(g), range(g)):
            if (gx / g < o.cx + o.w / 2 and (gx + 1) / g > o.cx - o.w / 2
                    and gy / g < o.cy + o.h / 2 and (gy + 1) / g > o.cy - o.h / 2):
                touched.add(gy * g + gx)
    assert changed and changed <= touched


def test_features_reject_boxes_outside_the_unit_square():
    with pytest.raises(ValueError):
        scene_features(scene((0, 0.95, 0.5, 0.2, 0.2)), 4, 2)


def test_positional_encoding_examples():
    pe = positional_encoding(16, 8)
    assert pe.shape == (16, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert np.all(np.abs(pe) <= 1.0)
    with pytest.raises(ValueError):
        positional_encoding(16, 7)
    with pytest.raises(ValueError):
        positional_encoding(15, 8)


@pytest.mark.parametrize("grid", [2, 8, 17, 32])
def test_positional_encodings_do_not_collide(grid):
    pe = positional_encoding(grid * grid, 64)
    d2 = ((pe[:, None, :] - pe[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-8


def test_anchor_queries_shape_and_spread():
    q = anchor_queries(16, 8, 32)
    assert q.shape == (16, 32)
    assert len({tuple(np.round(r, 12)) for r in q}) == 16


def test_output_shapes_and_box_range():
    params = init_model(SMALL, 1)
    out = model_forward(random_tokens(SMALL, 2), SMALL, params)
    assert out.class_logits.shape == (5, 3) and out.boxes.shape == (5, 4)
    assert np.all((out.boxes.data > 0) & (out.boxes.data < 1))
    batched = model_forward(random_tokens(SMALL, 2, batch=3), SMALL, params)
    assert batched.boxes.shape == (3, 5, 4)


def test_batched_forward_matches_single_scene_forward():
    params = init_model(SMALL, 3)
    x = random_tokens(SMALL, 4, batch=2)
    both = model_forward(x, SMALL, params)
    one = model_forward(Tensor(x.data[1]), SMALL, params)
    np.testing.assert_allclose(both.boxes.data[1], one.boxes.data, atol=1e-13)


def test_miti_and_standard_differ_by_the_accumulated_skips():
    """Feed both wirings the same layer inputs; outputs differ by exactly the input."""
    miti_cfg = SMALL.replace(wiring="MitiResidual")
    std_cfg = SMALL.replace(wiring="StandardSkip")
    params = init_model(miti_cfg, 5)
    tokens = random_tokens(miti_cfg, 6)
    trace = []
    model_forward(tokens, miti_cfg, params, trace=trace)
    from mitilab.attention import decoder_layer_forward, layer_forward
    from mitilab.detr import decoder_layers, encoder_layers

    enc, dec = encoder_layers(std_cfg, params), decoder_layers(std_cfg, params)
    memory = trace[SMALL.enc_layers - 1][2]
    for stage, x_in, x_out in trace:
        i = int(stage[3:])
        if stage.startswith("enc"):
            std = layer_forward(x_in, enc[i], "StandardSkip").data
        else:
            std = decoder_layer_forward(x_in, memory, dec[i], "StandardSkip").data
        np.testing.assert_allclose(x_out.data - std, x_in.data, atol=1e-12)


def test_parameter_count_matches_closed_form_and_is_wiring_free():
    for cfg in (SMALL, ModelConfig(), SMALL.replace(heads=4, d_v=4)):
        counts = {count_parameters(init_model(cfg.replace(wiring=m), 0)) for m in WiringMode}
        assert counts == {closed_form_count(cfg)}


def test_doubling_heads_changes_count_by_formula():
    base = SMALL.replace(heads=2, d_v=8)
    double = SMALL.replace(heads=4, d_v=4)
    diff = count_parameters(init_model(double)) - count_parameters(init_model(base))
    # per attention block: 2 * d * d_qk more query/key weights; values and w_o unchanged
    blocks = base.enc_layers + 2 * base.dec_layers
    assert diff == blocks * 2 * base.d_model * base.d_qk * (4 - 2)


def test_zero_layer_model_is_queries_and_heads():
    cfg = SMALL.replace(enc_layers=0, dec_layers=0)
    params = init_model(cfg)
    assert not any(k.startswith(("enc", "dec")) for k in params)
    out = model_forward(random_tokens(cfg, 7, batch=2), cfg, params)
    assert out.boxes.shape == (2, 5, 4)
    np.testing.assert_array_equal(out.boxes.data[0], out.boxes.data[1])


def test_check_params_reports_mismatch():
    params = init_model(SMALL)
    check_params(SMALL, params)
    with pytest.raises(ValueError, match="missing"):
        check_params(SMALL.replace(dec_layers=3), params)


def test_non_finite_tokens_raise_with_stage():
    params = init_model(SMALL)
    bad = np.zeros((SMALL.n_tokens, SMALL.d_model))
    bad[0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        model_forward(Tensor(bad), SMALL, params)
    assert info.value.stage is not None


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=15, heads=3, d_v=5)
    with pytest.raises(ValueError):
        ModelConfig(miti_scope="everywhere")
    with pytest.raises(ValueError):
        ModelConfig(wiring="Dense")


def test_forward_is_deterministic():
    params = init_model(SMALL, 8)
    x = random_tokens(SMALL, 9)
    a, b = model_forward(x, SMALL, params), model_forward(x, SMALL, params)
    np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)
    np.testing.assert_array_equal(a.boxes.data, b.boxes.data)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(list(WiringMode)), st.permutations(range(16)), st.integers(0, 1000))
def test_without_positions_token_order_does_not_matter(mode, perm, seed):
    cfg = SMALL.replace(wiring=mode, positional=False)
    params = init_model(cfg, seed)
    x = random_tokens(cfg, seed + 1)
    a = model_forward(x, cfg, params)
    b = model_forward(Tensor(x.data[np.array(perm)]), cfg, params)
    np.testing.assert_allclose(a.boxes.data, b.boxes.data, atol=1e-10)
    np.testing.assert_allclose(a.class_logits.data, b.class_logits.data, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_embedding_is_affine_in_features(seed):
    params = init_model(SMALL, 0)
    rng = np.random.default_rng(seed)
    f = rng.uniform(size=(SMALL.n_tokens, SMALL.feature_dim))
    got = embed_features(Tensor(f), params).data
    np.testing.assert_allclose(got, f @ params["embed.w"].data + params["embed.b"].data, atol=1e-13)


def test_intermediate_outputs_use_the_shared_heads():
    cfg = SMALL.replace(dec_layers=3)
    params = init_model(cfg, 10)
    x = random_tokens(cfg, 11, batch=2)
    extra, trace = [], []
    final = model_forward(x, cfg, params, trace=trace, intermediate=extra)
    assert len(extra) == 2
    np.testing.assert_array_equal(final.boxes.data, model_forward(x, cfg, params).boxes.data)
    # the first auxiliary output is what a one-layer decoder would emit
    short = cfg.replace(dec_layers=1)
    kept = {k: v for k, v in params.items() if not k.startswith(("dec1", "dec2"))}
    np.testing.assert_allclose(extra[0].boxes.data, model_forward(x, short, kept).boxes.data, atol=1e-14)
