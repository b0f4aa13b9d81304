import numpy as np
import pytest
import torch

from focusfix.model import MLPDenoiser, StepIndexError
from focusfix.sampler import SampleRequest, cfg_predict, draw_initial_noise, predict_noise, sample, sample_batch
from focusfix.schedule import ConfigurationError, make_schedule


def test_zero_weight_network_outputs_zero(mlp_model):
    with torch.no_grad():
        for p in mlp_model.parameters():
            p.zero_()
    x = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    out = predict_noise(mlp_model, x, torch.tensor([0, 1]), 2)
    assert torch.equal(out, torch.zeros_like(out))


def test_predict_noise_deterministic(mlp_model):
    x = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    cond = torch.tensor([0, 1, 0])
    a = predict_noise(mlp_model, x, cond, 1)
    b = predict_noise(mlp_model, x, cond, 1)
    assert torch.equal(a, b)


def test_predict_noise_matches_reimplementation(mlp_model):
    # independent numpy reimplementation of the MLP forward pass
    x = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    cond = torch.tensor([1, 0])
    t = 3
    got = predict_noise(mlp_model, x, cond, t).detach().numpy()

    sd = {k: v.detach().numpy() for k, v in mlp_model.state_dict().items()}
    emb = sd["cond_embed.weight"][cond.numpy()] + sd["time_embed.weight"][[t, t]]
    h = np.concatenate([x.numpy().reshape(2, -1), emb], axis=1)
    h = np.tanh(h @ sd["fc1.weight"].T + sd["fc1.bias"])
    h = np.tanh(h @ sd["fc2.weight"].T + sd["fc2.bias"])
    expected = (h @ sd["fc3.weight"].T + sd["fc3.bias"]).reshape(2, 1, 2, 2)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_step_index_validation(mlp_model):
    x = torch.randn(1, 1, 2, 2, dtype=torch.float64)
    with pytest.raises(StepIndexError):
        predict_noise(mlp_model, x, 0, 0)
    with pytest.raises(StepIndexError):
        predict_noise(mlp_model, x, 0, 4)


def test_cfg_collapses_exactly(mlp_model):
    x = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    cond = torch.tensor([0, 1])
    uncond = predict_noise(mlp_model, x, mlp_model.null_condition, 1)
    condp = predict_noise(mlp_model, x, cond, 1)
    assert torch.equal(cfg_predict(mlp_model, x, cond, 1, 0.0), uncond)
    assert torch.equal(cfg_predict(mlp_model, x, cond, 1, 1.0), condp)


def test_cfg_linear_combination():
    class Stub:
        num_steps = 3
        null_condition = 1
        image_shape = (1, 2, 2)

        def __call__(self, x, cond, t):
            c = cond if isinstance(cond, int) else int(torch.as_tensor(cond).reshape(-1)[0])
            return torch.full_like(x, 2.0 if c == 0 else 0.5)

        def parameters(self):
            return iter([torch.zeros(1)])

    stub = Stub()
    x = torch.zeros(1, 1, 2, 2)
    out = cfg_predict(stub, x, 0, 1, 7.5)
    # eps_u + w (eps_c - eps_u) = 0.5 + 7.5 * 1.5
    assert torch.allclose(out, torch.full_like(x, 0.5 + 7.5 * 1.5))


def test_sample_deterministic_and_in_range(mlp_model, tiny_schedule):
    req = SampleRequest(condition=0, seed=42)
    a = sample(mlp_model, tiny_schedule, req)
    b = sample(mlp_model, tiny_schedule, req)
    assert torch.equal(a, b)
    assert a.shape == (1, 2, 2)
    assert float(a.abs().max()) <= 1.0


def test_forward_identical_across_truncation(mlp_model, tiny_schedule):
    x0 = draw_initial_noise((2, 1, 2, 2), 3, torch.float64)
    cond = torch.tensor([0, 1])
    outs = [
        sample_batch(mlp_model, tiny_schedule, cond, x0, truncate_k=k) for k in (0, 1, 2, 3)
    ]
    for other in outs[1:]:
        assert torch.equal(outs[0], other.detach())
    assert not outs[0].requires_grad  # K=0: no gradient connectivity
    assert outs[2].requires_grad


def test_truncation_severs_early_time_embeddings(mlp_model, tiny_schedule):
    # with K=1 only the t=1 step is connected: time-embedding rows for
    # t=2,3 must receive exactly zero gradient
    for p in mlp_model.parameters():
        p.requires_grad_(True)
    x0 = draw_initial_noise((1, 1, 2, 2), 5, torch.float64)
    out = sample_batch(mlp_model, tiny_schedule, torch.tensor([0]), x0, truncate_k=1)
    out.sum().backward()
    g = mlp_model.time_embed.weight.grad
    assert g is not None
    assert torch.equal(g[2], torch.zeros_like(g[2]))
    assert torch.equal(g[3], torch.zeros_like(g[3]))
    assert float(g[1].abs().sum()) > 0


def test_truncation_bounds(mlp_model, tiny_schedule):
    x0 = draw_initial_noise((1, 1, 2, 2), 1, torch.float64)
    with pytest.raises(ConfigurationError):
        sample_batch(mlp_model, tiny_schedule, torch.tensor([0]), x0, truncate_k=4)


def _full_chain_value(model, schedule, x0, cond):
    out = sample_batch(
        model, schedule, cond, x0, truncate_k=schedule.num_steps, clamp_denoised=False
    )
    return out.sum()


def test_full_chain_gradient_matches_finite_differences(scalar_model, tiny_schedule):
    # central differences over every parameter of a scalar-image chain
    model = scalar_model
    for p in model.parameters():
        p.requires_grad_(True)
    x0 = draw_initial_noise((1, 1, 1, 1), 9, torch.float64)
    cond = torch.tensor([1])

    value = _full_chain_value(model, tiny_schedule, x0, cond)
    grads = torch.autograd.grad(value, list(model.parameters()))

    h = 1e-6
    for p, g in zip(model.parameters(), grads):
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
            plus = float(_full_chain_value(model, tiny_schedule, x0, cond))
            with torch.no_grad():
                flat[idx] = orig - h
            minus = float(_full_chain_value(model, tiny_schedule, x0, cond))
            with torch.no_grad():
                flat[idx] = orig
            fd = (plus - minus) / (2 * h)
            denom = max(abs(fd), abs(float(gflat[idx])), 1e-8)
            assert abs(fd - float(gflat[idx])) / denom <= 1e-5


def test_trajectory_nan_detection(mlp_model, tiny_schedule):
    from focusfix.sampler import SamplingError

    with torch.no_grad():
        mlp_model.fc3.bias.fill_(float("nan"))
    x0 = draw_initial_noise((1, 1, 2, 2), 2, torch.float64)
    with pytest.raises(SamplingError):
        sample_batch(mlp_model, tiny_schedule, torch.tensor([0]), x0, clamp_denoised=False)


def test_request_shape_validation(mlp_model, tiny_schedule):
    req = SampleRequest(condition=0, seed=1, x_init=torch.zeros(2, 2, 2))
    with pytest.raises(ConfigurationError):
        sample(mlp_model, tiny_schedule, req)
