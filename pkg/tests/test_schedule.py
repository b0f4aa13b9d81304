import pytest
import torch

from focusfix.schedule import ConfigurationError, make_schedule


def test_single_step_schedule():
    sch = make_schedule(1, (0.1, 0.3))
    assert sch.num_steps == 1
    assert 0.0 < float(sch.gamma(1)) < 1.0


def test_fifty_step_schedule_monotone():
    sch = make_schedule(50)
    assert sch.gammas.shape == (50,)
    assert bool((sch.gammas[1:] < sch.gammas[:-1]).all())
    assert bool(((sch.gammas > 0) & (sch.gammas < 1)).all())


def test_cumulative_product_oracle():
    # independent running product in python floats
    sch = make_schedule(8, (1e-4, 2e-2), dtype=torch.float64)
    betas = [1e-4 + i * (2e-2 - 1e-4) / 7 for i in range(8)]
    prod = 1.0
    expected = []
    for b in betas:
        prod *= 1.0 - b
        expected.append(prod)
    assert torch.allclose(sch.gammas, torch.tensor(expected, dtype=torch.float64), rtol=1e-12)


def test_gamma_zero_is_one():
    sch = make_schedule(5, (0.05, 0.2))
    assert float(sch.gamma(0)) == 1.0
    with pytest.raises(IndexError):
        sch.gamma(6)


@pytest.mark.parametrize(
    "steps,rng",
    [(0, (0.1, 0.2)), (4, (0.0, 0.2)), (4, (0.1, 1.0)), (4, (0.3, 0.1)), (4, (-0.1, 0.5))],
)
def test_invalid_configuration(steps, rng):
    with pytest.raises(ConfigurationError):
        make_schedule(steps, rng)


def test_monotone_across_settings():
    for steps, rng in [(3, (0.01, 0.5)), (20, (0.02, 0.5)), (100, (0.001, 0.2))]:
        sch = make_schedule(steps, rng)
        assert bool((sch.gammas[1:] < sch.gammas[:-1]).all())
