import math

import numpy as np
import pytest
import torch

from sphereseg.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sphereseg.errors import ConfigurationError, DataError
from sphereseg.icosphere import build_icosphere
from sphereseg.model import Adam, ModelConfig, SphereSegNet, apply_index_map, eq_loss, seg_loss, total_loss
from sphereseg.selftest import _toy_model, equivariance_mse, fd_relative_error
from sphereseg.so3 import Rotation, build_rotation_maps, icosahedral_group, sample_rotation_uniform


def small_cfg(**kw):
    return ModelConfig(output_rank=3, depth=1, dim=8, heads=2, blocks_per_stage=1, **kw)


def test_shapes(gen):
    m = SphereSegNet(small_cfg())
    x = torch.randn(2, 642, 3, generator=gen, dtype=torch.float64)
    tok = m.project_tokens(x)
    assert tok.shape == (2, 162, 8)
    assert m(tok).shape == (2, 642, 14)
    with pytest.raises(ConfigurationError):
        m.project_tokens(x[:, :162])


def test_stage_ranks_and_validation():
    assert ModelConfig().stage_ranks == [4, 3, 2, 1]
    for bad in (dict(output_rank=0), dict(dim=10, heads=4), dict(num_classes=1), dict(depth=5, output_rank=3),
                dict(lambda_eq=-1.0), dict(transfer_ties="nearest")):
        with pytest.raises(ConfigurationError):
            SphereSegNet(ModelConfig(**bad))


def test_constant_tokens_embed_to_constant():
    m = SphereSegNet(small_cfg())
    v = torch.tensor([0.2, -1.0, 3.0], dtype=torch.float64)
    tok = m.project_tokens(v.expand(1, 642, 3))
    want = v @ m.embed.weight + m.embed.bias
    assert (tok - want).abs().max() <= 1e-12


@pytest.mark.parametrize("flags", [{}, dict(quadrature_attn=False, gauge_bias=False, geo_sampling=False)])
def test_head_bias_only_gives_constant_logits(gen, flags):
    m = SphereSegNet(small_cfg(**flags))
    beta = torch.randn(14, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.head.bias.copy_(beta)
    z = m(torch.randn(1, 162, 8, generator=gen, dtype=torch.float64))
    assert (z - beta).abs().max() <= 1e-12


def test_network_gradient_fd(gen):
    m = _toy_model()
    tok = torch.randn(1, 42, 8, generator=gen, dtype=torch.float64)
    w = torch.randn(1, 162, 5, generator=gen, dtype=torch.float64)
    params = list(m.parameters())
    assert fd_relative_error(lambda: (m(tok) * w).sum(), params) <= 1e-4


def test_seg_loss_examples():
    z = torch.zeros(1, 3, 14, dtype=torch.float64)
    loss, ok = seg_loss(z, [[0, 5, 0]])
    assert ok and abs(loss.item() - math.log(14)) <= 1e-12
    loss, ok = seg_loss(z, [[0, 0, 0]])
    assert not ok and loss.item() == 0.0
    z = torch.full((1, 2, 14), -1e4, dtype=torch.float64)
    z[0, 0, 3] = z[0, 1, 7] = 1e4
    assert seg_loss(z, [[3, 7]])[0].item() <= 1e-12
    with pytest.raises(DataError):
        seg_loss(z, [[3, 14]])
    with pytest.raises(DataError):
        seg_loss(z, [[3]])


def test_seg_loss_shift_invariance(gen):
    z = torch.randn(2, 20, 14, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, 14, (2, 20), generator=gen).numpy()
    shift = torch.randn(2, 20, 1, generator=gen, dtype=torch.float64) * 30
    assert abs(seg_loss(z, labels)[0].item() - seg_loss(z + shift, labels)[0].item()) <= 1e-9


def test_total_loss():
    assert abs(total_loss(1.0, 2.0, 0.05) - 1.1) <= 1e-12
    assert total_loss(0.7, 2.0, 0.0) == 0.7 and total_loss(0.7, 0.0, 0.05) == 0.7
    assert ModelConfig().lambda_eq == 0.05
    with pytest.raises(ConfigurationError):
        total_loss(1.0, 1.0, -0.1)


def _maps(rot, cfg):
    return build_rotation_maps(rot, build_icosphere(cfg.token_rank), build_icosphere(cfg.output_rank))


def test_eq_loss_identity_and_constant_model(gen):
    m = _toy_model()
    tok = torch.randn(1, 42, 8, generator=gen, dtype=torch.float64)
    assert eq_loss(m, tok, _maps(Rotation.identity(), m.cfg)).item() == 0.0
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.head.bias.copy_(torch.arange(5.0, dtype=torch.float64))
    rot = sample_rotation_uniform(np.random.default_rng(2))
    # kernel weights sum to 1 only up to rounding
    assert eq_loss(m, tok, _maps(rot, m.cfg)).item() <= 1e-24


def test_eq_loss_stops_target_gradient(gen):
    m = _toy_model()
    tok = torch.randn(1, 42, 8, generator=gen, dtype=torch.float64)
    maps = _maps(sample_rotation_uniform(np.random.default_rng(3)), m.cfg)
    z = m(tok)
    loss = eq_loss(m, tok, maps, z=z)
    assert torch.autograd.grad(loss, z, allow_unused=True)[0] is None
    z_fixed = m(tok).detach()
    # gradient equals that of a regression onto a constant target
    g1 = torch.autograd.grad(eq_loss(m, tok, maps, z=z_fixed), list(m.parameters()), allow_unused=True)
    target = apply_index_map(z_fixed, maps.idx_img)
    manual = ((m(apply_index_map(tok, maps.idx_proj)) - target) ** 2).mean()
    g2 = torch.autograd.grad(manual, list(m.parameters()), allow_unused=True)
    for a, b in zip(g1, g2):
        assert (a is None and b is None) or torch.allclose(a, b, atol=1e-14)
    assert fd_relative_error(lambda: eq_loss(m, tok, maps, z=z_fixed), list(m.parameters())) <= 1e-4


def test_group_equivariance_without_pe():
    assert equivariance_mse(3, abs_lat_pe=False) <= 1e-6


def test_latitude_pe_breaks_equivariance():
    assert equivariance_mse(3, abs_lat_pe=True) >= 1e-2


def test_adam_matches_closed_form():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = Adam([p], lr=0.1)
    p.grad = torch.tensor([0.5, -4.0], dtype=torch.float64)
    opt.step()
    # first step moves each coordinate by lr * sign(g) up to eps
    assert torch.allclose(p.detach(), torch.tensor([0.9, -1.9], dtype=torch.float64), atol=1e-8)
    ref = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    tref = torch.optim.Adam([ref], lr=0.1)
    p2 = torch.nn.Parameter(ref.detach().clone())
    o2 = Adam([p2], lr=0.1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = torch.as_tensor(rng.standard_normal(2))
        ref.grad, p2.grad = g.clone(), g.clone()
        tref.step()
        o2.step()
    assert torch.allclose(ref, p2, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, gen):
    m = _toy_model()
    opt = Adam(m.parameters(), lr=1e-3)
    ck = Checkpoint.from_model(m, step=7, opt=opt, extra={"note": "x"})
    path = tmp_path / "m.ssc"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.step == 7 and back.config == m.cfg and back.extra == {"note": "x"}
    m2 = back.build_model()
    tok = torch.randn(1, 42, 8, generator=gen, dtype=torch.float64)
    assert torch.equal(m(tok), m2(tok))
    bad = Checkpoint(back.config, {k: v for k, v in back.state.items() if k != "head.bias"})
    with pytest.raises(DataError):
        bad.build_model()


def test_group_maps_permute_geometry():
    # every icosahedral element maps the rank-2 mesh and areas onto themselves
    mesh = build_icosphere(2)
    for g in icosahedral_group()[::7]:
        f = build_rotation_maps(g, mesh, mesh).idx_img
        assert np.abs(mesh.area_weights[f] - mesh.area_weights).max() <= 1e-12
