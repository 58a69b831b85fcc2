from dataclasses import replace
import json
import struct

import pytest
import torch

from flowmatch import fm_loss, interpolate, velocity_target
from models import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Checkpoint, DiTPainter, ModelConfig, OutputMode,
                    PatchEmbed, apply_rope, attention_logits, build_model, fuse_tokens, grid_positions, param_count,
                    patchify, preset, rope3d, rope_split, unpatchify)
from numerics import RngStream, finite_diff_grad, precision, sample_gaussian
from utils import ShapeError, ValidationError


def _inputs(rng, batch=1, h=4, w=4, n=3, dtype=None):
    x = sample_gaussian(rng, (batch, h, w, n, 8), dtype)
    y = sample_gaussian(rng, (batch, h, w, n, 8), dtype)
    m = torch.from_numpy(rng.uniform(0, 1, (batch, h, w, n, 4))).to(x.dtype)
    return x, y, m


def test_presets():
    cfg = preset("full")
    assert (cfg.num_blocks, cfg.num_heads, cfg.head_dim, cfg.ffn_ratio) == (24, 16, 72, 4)
    assert cfg.embed_dim == 1152
    assert preset("desk").embed_dim == 96
    with pytest.raises(ValidationError):
        preset("huge")


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(head_dim=7).validate()
    with pytest.raises(ValidationError):
        ModelConfig(patch=(2, 2, 2)).validate()
    cfg = preset("desk", output_mode=OutputMode.DOUBLE)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"num_blocks": 2, "depth": 3})


@pytest.mark.parametrize("head_dim, split", [(72, (24, 24, 24)), (24, (8, 8, 8)), (8, (4, 2, 2)), (48, (16, 16, 16))])
def test_rope_split(head_dim, split):
    assert rope_split(head_dim) == split
    assert sum(split) == head_dim


@pytest.mark.parametrize("head_dim", [7, 16, 2])
def test_rope_split_rejects(head_dim):
    with pytest.raises(ValidationError):
        rope_split(head_dim)


def test_token_order_is_temporal_major():
    positions = grid_positions(2, 3, 4)
    assert positions.shape == (24, 3)
    t, r, c = 1, 2, 3
    assert positions[(t * 3 + r) * 4 + c].tolist() == [t, r, c]


def test_rope_identity_at_origin():
    table = rope3d(torch.zeros(1, 3, dtype=torch.long), 24)
    assert torch.all(table.cos == 1) and torch.all(table.sin == 0)
    x = torch.randn(1, 24)
    assert torch.equal(apply_rope(x, table), x)


def test_rope_logits_invariant_under_shifts(rng):
    positions = grid_positions(3, 3, 3)
    q = sample_gaussian(rng, (27, 24), torch.float64)
    k = sample_gaussian(rng, (27, 24), torch.float64)
    base = attention_logits(q, k, rope3d(positions, 24))
    for axis in range(3):
        for shift in (1, 4):
            offset = [0, 0, 0]
            offset[axis] = shift
            shifted = attention_logits(q, k, rope3d(positions + torch.tensor(offset), 24))
            assert (shifted - base).abs().max() <= 1e-5


def test_rope_distinguishes_positions(rng):
    positions = grid_positions(3, 3, 3)
    q = sample_gaussian(rng, (27, 24), torch.float64)
    plain = q @ q.T / 24 ** 0.5
    assert not torch.allclose(attention_logits(q, q, rope3d(positions, 24)), plain)


def test_patchify_shapes_and_order():
    latent = torch.arange(8 * 8 * 17 * 8, dtype=torch.float32).reshape(1, 8, 8, 17, 8)
    tokens = patchify(latent)
    assert tokens.shape == (1, 272, 32)
    # token (t=1, row=2, col=3) holds rows 4-5, cols 6-7 of frame 1, flattened (row, col, channel)
    token = tokens[0, (1 * 4 + 2) * 4 + 3]
    assert torch.equal(token[:8], latent[0, 4, 6, 1])
    assert torch.equal(token[8:16], latent[0, 4, 7, 1])
    assert torch.equal(token[16:24], latent[0, 5, 6, 1])
    assert torch.equal(unpatchify(tokens, (17, 4, 4), 8), latent)


def test_patchify_rejects_odd_sizes():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(1, 7, 8, 3, 8))


def test_unpatchify_names_expected_length():
    with pytest.raises(ShapeError, match="L=48"):
        unpatchify(torch.zeros(1, 47, 32), (3, 4, 4), 8)


def test_zero_embedder_gives_zero_tokens():
    embed = PatchEmbed(8, 16)
    torch.nn.init.zeros_(embed.proj.weight)
    torch.nn.init.zeros_(embed.proj.bias)
    assert torch.equal(embed(torch.zeros(1, 4, 4, 3, 8)), torch.zeros(1, 12, 16))
    with pytest.raises(ShapeError):
        embed(torch.zeros(1, 4, 4, 3, 4))


def test_fuse_tokens(rng):
    a, b, c = (sample_gaussian(rng, (1, 5, 4)) for _ in range(3))
    zero = torch.zeros_like(a)
    assert torch.equal(fuse_tokens(a, zero, zero), a)
    assert torch.allclose(fuse_tokens(a, b, c), fuse_tokens(c, a, b))
    with pytest.raises(ShapeError):
        fuse_tokens(a, b, torch.zeros(1, 5, 3))


def test_gates_are_zero_at_init(small_cfg):
    model = build_model(small_cfg, seed=0)
    _, modulations = model.timestep_embed(torch.tensor([0.0, 0.5, 1.0]))
    for mod in modulations:
        assert torch.all(mod.gate_att == 0) and torch.all(mod.gate_ffn == 0)


def test_blocks_are_identity_at_init(small_cfg, rng):
    model = build_model(small_cfg, seed=0)
    tokens = sample_gaussian(rng, (2, 12, small_cfg.embed_dim))
    rope = rope3d(grid_positions(3, 2, 2), small_cfg.head_dim)
    with torch.no_grad():
        _, modulations = model.timestep_embed(torch.tensor([0.2, 0.9]))
        for block, mod in zip(model.blocks, modulations):
            assert torch.equal(block(tokens, mod, rope), tokens)


def test_timestep_embedding_separates_endpoints(small_cfg):
    model = build_model(small_cfg, seed=0)
    with torch.no_grad():
        c = model.t_embedder(torch.tensor([0.0, 1.0, 1.0]))
    assert not torch.allclose(c[0], c[1])
    assert torch.equal(c[1], c[2])


def test_single_token_attention_is_identity_weighted(small_cfg, rng):
    block = build_model(small_cfg, seed=0).blocks[0]
    v = sample_gaussian(rng, (1, 1, small_cfg.embed_dim))
    rope = rope3d(grid_positions(1, 1, 1), small_cfg.head_dim)
    qkv = block.attn.qkv(v).reshape(1, 1, 3, small_cfg.embed_dim)
    expected = block.attn.proj(qkv[:, :, 2])
    assert torch.allclose(block.attn(v, rope), expected, atol=1e-6)


def test_forward_shapes_and_purity(small_cfg, rng):
    model = build_model(small_cfg, seed=1)
    for layer in (model.final_layer.linear, *[b.adaLN_modulation[-1] for b in model.blocks]):
        torch.nn.init.normal_(layer.weight, std=0.1)
    x, y, m = _inputs(rng, batch=2)
    with torch.no_grad():
        out = model(x, y, m, torch.tensor([0.3, 0.6]))
        again = model(x, y, m, torch.tensor([0.3, 0.6]))
        swapped = model(x.flip(0), y.flip(0), m.flip(0), torch.tensor([0.6, 0.3]))
        single = model(x[0], y[0], m[0], 0.3)
    assert out.shape == x.shape
    assert torch.equal(out, again)
    assert torch.allclose(swapped.flip(0), out, atol=1e-5)
    assert torch.allclose(single, out[0], atol=1e-5)


def test_forward_rejects_mismatched_inputs(small_cfg, rng):
    model = build_model(small_cfg, seed=0)
    x, y, m = _inputs(rng)
    with pytest.raises(ShapeError):
        model(x, y[:, :, :, :2], m, 0.5)
    with pytest.raises(ShapeError):
        model(x[:, :3], y[:, :3], m[:, :3], 0.5)


def test_double_head_drops_second_half(small_cfg, rng):
    model = build_model(replace(small_cfg, output_mode=OutputMode.DOUBLE), seed=0)
    assert model.final_layer.linear.out_features == 4 * 16
    x, y, m = _inputs(rng)
    with torch.no_grad():
        assert model(x, y, m, 0.5).shape == x.shape


def test_model_gradients_match_finite_differences(grad_cfg, rng):
    with precision(torch.float64):
        model = build_model(grad_cfg, seed=0)
        # leave the zero-init heads non-zero so every parameter receives gradient
        for module in model.modules():
            if isinstance(module, torch.nn.Linear):
                torch.nn.init.normal_(module.weight, std=0.3)
                torch.nn.init.normal_(module.bias, std=0.1)
        x0, x1 = sample_gaussian(rng, (1, 8, 8, 5, 8)), sample_gaussian(rng, (1, 8, 8, 5, 8))
        y = sample_gaussian(rng, (1, 8, 8, 5, 8))
        m = torch.from_numpy(rng.uniform(0, 1, (1, 8, 8, 5, 4)))
        t = torch.tensor([0.4], dtype=torch.float64)
        target = velocity_target(x0, x1)
        x_t = interpolate(x0, x1, t)

        loss = fm_loss(model(x_t, y, m, t), target)
        loss.backward()

        checked, good = 0, 0
        picker = RngStream(99)
        for name, param in model.named_parameters():
            analytic = param.grad.reshape(-1)
            # a handful of coordinates per tensor keeps the oracle affordable
            picks = picker.integers(0, analytic.numel(), size=min(4, analytic.numel()))
            for i in sorted(set(int(p) for p in picks)):
                original = param.data.reshape(-1)[i].item()

                def f(value):
                    with torch.no_grad():
                        param.data.reshape(-1)[i] = value.item()
                        result = fm_loss(model(x_t, y, m, t), target).item()
                        param.data.reshape(-1)[i] = original
                    return result

                numeric = finite_diff_grad(f, torch.tensor(original, dtype=torch.float64)).item()
                g = analytic[i].item()
                if abs(g) <= 1e-6:
                    continue
                checked += 1
                good += abs(g - numeric) / max(abs(g), abs(numeric)) < 1e-4
        assert checked > 20
        assert good >= 0.95 * checked


def test_param_count_matches_allocation(small_cfg):
    for cfg in (small_cfg, preset("desk"), preset("grad-check"), replace(small_cfg, output_mode=OutputMode.DOUBLE)):
        model = DiTPainter(cfg)
        assert param_count(cfg) == sum(p.numel() for p in model.parameters())


def test_param_count_full_preset():
    assert 3.2e8 <= param_count(preset("full")) <= 4.8e8


def test_param_count_depth_scaling():
    cfg = preset("desk")
    empty = param_count(replace(cfg, num_blocks=0))
    per_block = param_count(replace(cfg, num_blocks=1)) - empty
    assert param_count(replace(cfg, num_blocks=8)) - empty == 8 * per_block
    model = DiTPainter(replace(cfg, num_blocks=0))
    assert empty == sum(p.numel() for p in model.parameters())


def test_checkpoint_roundtrip(tmp_path, small_cfg):
    model = build_model(small_cfg, seed=3)
    moments = {"x_embedder.proj.weight.exp_avg": torch.ones(3)}
    ckpt = Checkpoint.from_model(model, step=12, stage=1, optimizer=moments, optimizer_step=12, window=5)
    ckpt.save(tmp_path / "m.dtpc")
    back = Checkpoint.load(tmp_path / "m.dtpc")
    assert back.config == small_cfg
    assert (back.step, back.stage, back.optimizer_step, back.window) == (12, 1, 12, 5)
    assert list(back.params) == [name for name, _ in model.named_parameters()]
    for name, tensor in ckpt.params.items():
        assert torch.equal(back.params[name], tensor)
    assert torch.equal(back.optimizer["x_embedder.proj.weight.exp_avg"], torch.ones(3))
    rebuilt = back.build_model()
    for (_, a), (_, b) in zip(rebuilt.named_parameters(), model.named_parameters()):
        assert torch.equal(a, b)


def test_checkpoint_errors(tmp_path, small_cfg):
    path = tmp_path / "m.dtpc"
    path.write_bytes(b"DTPT")
    with pytest.raises(ValidationError, match="magic"):
        Checkpoint.load(path)
    ckpt = Checkpoint.from_model(build_model(small_cfg, seed=0))
    ckpt.params.pop("final_layer.linear.bias")
    with pytest.raises(ValidationError, match="missing"):
        ckpt.build_model()


@pytest.mark.parametrize("header, match", [
    ({"config": {}, "params": []}, "lacks"),
    ([1, 2, 3], "lacks"),
    ({"config": {}, "params": [["w"]], "optimizer": [], "step": 0, "stage": 0, "optimizer_step": 0}, "malformed"),
    ({"config": {"num_heads": "many"}, "params": [], "optimizer": [], "step": 0, "stage": 0, "optimizer_step": 0}, "malformed"),
])
def test_checkpoint_header_without_required_fields(tmp_path, header, match):
    body = json.dumps(header).encode("utf-8")
    path = tmp_path / "m.dtpc"
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(body)) + body)
    with pytest.raises(ValidationError, match=match):
        Checkpoint.load(path)
