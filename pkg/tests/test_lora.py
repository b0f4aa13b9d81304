import pytest
import torch

from focusfix.lora import LoRAModel, adapted_forward, effective_params, init_lora
from focusfix.model import MLPDenoiser
from focusfix.sampler import draw_initial_noise, sample_batch
from focusfix.schedule import ConfigurationError


def wide_model():
    with torch.random.fork_rng():
        torch.manual_seed(0)
        return MLPDenoiser(image_shape=(1, 8, 8), num_conditions=2, num_steps=3, hidden=64, emb_dim=32)


def test_rank_64_on_wide_weights():
    lora = init_lora(wide_model(), rank=64, seed=0)
    assert "fc1" in lora.adapted_names and "fc2" in lora.adapted_names
    for mod in lora.adapters().values():
        assert mod.rank == 64


def test_fresh_lora_is_identity(mlp_model, tiny_schedule):
    lora = init_lora(mlp_model, rank=2, seed=1)
    x = draw_initial_noise((3, 1, 2, 2), 4, torch.float64)
    cond = torch.tensor([0, 1, 0])
    base_out = mlp_model(x, cond, 2)
    assert torch.equal(lora(x, cond, 2), base_out)
    # and through full sampling
    a = sample_batch(mlp_model, tiny_schedule, cond, x)
    b = sample_batch(lora, tiny_schedule, cond, x)
    assert torch.equal(a, b)


def test_full_rank_fits_arbitrary_delta():
    # svd oracle: at full rank, A B can represent any delta to ~machine precision
    g = torch.Generator().manual_seed(3)
    d, k = 6, 9
    target = torch.randn(d, k, generator=g, dtype=torch.float64)
    u, s, vh = torch.linalg.svd(target, full_matrices=False)
    r = min(d, k)
    a = u[:, :r] * s[:r].sqrt()
    b = s[:r].sqrt()[:, None] * vh[:r]
    rel = float(torch.linalg.norm(a @ b - target) / torch.linalg.norm(target))
    assert rel <= 1e-6
    w0 = torch.randn(d, k, generator=g, dtype=torch.float64)
    z = torch.randn(k, generator=g, dtype=torch.float64)
    got = adapted_forward(w0, a, b, z)
    assert torch.allclose(got, (w0 + target) @ z, rtol=1e-9)


def test_adapted_forward_hand_case():
    w0 = torch.eye(2)
    a = torch.tensor([[1.0], [0.0]])
    b = torch.tensor([[0.0, 1.0]])
    z = torch.tensor([3.0, 5.0])
    h = adapted_forward(w0, a, b, z)
    assert torch.equal(h, torch.tensor([8.0, 5.0]))


def test_adapted_forward_matches_dense():
    g = torch.Generator().manual_seed(8)
    for d, k, r in [(4, 7, 2), (9, 3, 3), (5, 5, 1)]:
        w0 = torch.randn(d, k, generator=g, dtype=torch.float64)
        a = torch.randn(d, r, generator=g, dtype=torch.float64)
        b = torch.randn(r, k, generator=g, dtype=torch.float64)
        z = torch.randn(6, k, generator=g, dtype=torch.float64)
        dense = z @ (w0 + a @ b).T
        got = adapted_forward(w0, a, b, z)
        rel = float((got - dense).norm() / dense.norm())
        assert rel <= 1e-6


def test_adapted_forward_linear_in_z():
    g = torch.Generator().manual_seed(2)
    w0 = torch.randn(3, 4, generator=g, dtype=torch.float64)
    a = torch.randn(3, 2, generator=g, dtype=torch.float64)
    b = torch.randn(2, 4, generator=g, dtype=torch.float64)
    z1 = torch.randn(4, generator=g, dtype=torch.float64)
    z2 = torch.randn(4, generator=g, dtype=torch.float64)
    lhs = adapted_forward(w0, a, b, 2.0 * z1 + z2)
    rhs = 2.0 * adapted_forward(w0, a, b, z1) + adapted_forward(w0, a, b, z2)
    assert torch.allclose(lhs, rhs, rtol=1e-12)


def test_effective_params_endpoints(mlp_model, tiny_schedule):
    lora = init_lora(mlp_model, rank=2, seed=5)
    with torch.no_grad():
        for mod in lora.adapters().values():
            mod.B.normal_(generator=torch.Generator().manual_seed(1))

    x = draw_initial_noise((2, 1, 2, 2), 6, torch.float64)
    cond = torch.tensor([0, 1])

    merged0 = effective_params(mlp_model, lora, scale=0.0)
    assert torch.equal(
        sample_batch(merged0, tiny_schedule, cond, x),
        sample_batch(mlp_model, tiny_schedule, cond, x),
    )

    merged1 = effective_params(mlp_model, lora, scale=1.0)
    got = merged1(x, cond, 1)
    want = lora(x, cond, 1)
    assert torch.allclose(got, want, rtol=1e-6, atol=1e-12)


def test_effective_params_midpoint_is_mean(mlp_model):
    lora = init_lora(mlp_model, rank=2, seed=5)
    with torch.no_grad():
        for mod in lora.adapters().values():
            mod.B.normal_(generator=torch.Generator().manual_seed(2))
    m0 = effective_params(mlp_model, lora, scale=0.0)
    m1 = effective_params(mlp_model, lora, scale=1.0)
    mh = effective_params(mlp_model, lora, scale=0.5)
    for (n, p_h), p0, p1 in zip(mh.named_parameters(), m0.parameters(), m1.parameters()):
        assert torch.allclose(p_h, (p0 + p1) / 2.0, rtol=1e-12, atol=1e-15)


def test_gradients_reach_only_adapters(mlp_model, tiny_schedule):
    lora = init_lora(mlp_model, rank=2, seed=0)
    x = draw_initial_noise((1, 1, 2, 2), 7, torch.float64)
    out = sample_batch(lora, tiny_schedule, torch.tensor([0]), x, truncate_k=3)
    out.sum().backward()
    for name, p in lora.net.named_parameters():
        if name.endswith(".A") or name.endswith(".B"):
            continue
        assert p.grad is None
    assert any(p.grad is not None and float(p.grad.abs().sum()) > 0 for p in lora.lora_parameters())
    for p in mlp_model.parameters():
        assert p.grad is None


def test_rank_too_large_reports_weight():
    with pytest.raises(ConfigurationError, match="fc"):
        init_lora(wide_model(), rank=4096, seed=0)
    with pytest.raises(ConfigurationError, match="fc3"):
        init_lora(wide_model(), rank=65, targets=["fc3"], seed=0)


def test_lora_state_roundtrip(mlp_model):
    lora = init_lora(mlp_model, rank=2, seed=9)
    with torch.no_grad():
        for mod in lora.adapters().values():
            mod.B.normal_(generator=torch.Generator().manual_seed(3))
    state = lora.lora_state_dict()
    other = init_lora(mlp_model, rank=2, seed=1234)
    other.load_lora_state_dict(state)
    for (k1, v1), (k2, v2) in zip(
        sorted(state.items()), sorted(other.lora_state_dict().items())
    ):
        assert k1 == k2 and torch.equal(v1, v2)
