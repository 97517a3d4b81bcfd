import pytest

from cign.schedules import FASHION_SCHEDULE, MNIST_SCHEDULE, ScheduleSet, lr_at, rho_at, tau_at
from cign.substrate import ConfigurationError


def test_mnist_learning_rate():
    assert lr_at(MNIST_SCHEDULE, 0) == 0.025
    assert lr_at(MNIST_SCHEDULE, 14999) == 0.025
    assert lr_at(MNIST_SCHEDULE, 15000) == 0.0125
    assert lr_at(MNIST_SCHEDULE, 30000) == 0.00625


def test_fashion_learning_rate():
    assert lr_at(FASHION_SCHEDULE, 0) == 0.01
    assert lr_at(FASHION_SCHEDULE, 15000) == pytest.approx(0.005, rel=1e-15)
    assert lr_at(FASHION_SCHEDULE, 30000) == pytest.approx(0.0025, rel=1e-15)
    assert lr_at(FASHION_SCHEDULE, 40000) == pytest.approx(0.01 * 0.5 * 0.5 * 0.1, rel=1e-15)
    assert lr_at(FASHION_SCHEDULE, 40000) == pytest.approx(0.00025, rel=1e-12)


def test_temperature():
    assert tau_at(MNIST_SCHEDULE, 0) == 25
    assert tau_at(MNIST_SCHEDULE, 1) == 25
    assert tau_at(MNIST_SCHEDULE, 2) == pytest.approx(24.9975, abs=1e-12)
    assert tau_at(MNIST_SCHEDULE, 10**9) == 1.0
    # the floor is reached after ln(25)/-ln(0.9999) ~ 32,188 decays
    assert tau_at(MNIST_SCHEDULE, 2 * 32188) == pytest.approx(1.0, abs=1e-3)
    assert tau_at(MNIST_SCHEDULE, 2 * 33000) == 1.0


def test_threshold_phases():
    assert rho_at(MNIST_SCHEDULE, 0) == 0.0
    assert rho_at(MNIST_SCHEDULE, 10) == 0.0
    assert rho_at(MNIST_SCHEDULE, 24) == 0.0
    assert rho_at(MNIST_SCHEDULE, 25) == 0.4
    assert rho_at(MNIST_SCHEDULE, 99) == 0.4
    assert rho_at(MNIST_SCHEDULE, 50, mode="eval") == 0.0


def test_rho_bound_checked_against_branching():
    s = MNIST_SCHEDULE.replace(rho_phases=((0, 0.0), (5, 0.6)))
    with pytest.raises(ConfigurationError):
        s.check_rho(2)
    MNIST_SCHEDULE.check_rho(2)
    with pytest.raises(ConfigurationError):
        MNIST_SCHEDULE.check_rho(3)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        ScheduleSet(base_lr=0)
    with pytest.raises(ConfigurationError):
        ScheduleSet(rho_phases=((1, 0.0),))
    with pytest.raises(ConfigurationError):
        ScheduleSet(batch_size=0)


def test_schedules_are_pure_functions_of_config():
    s = ScheduleSet.__new__(ScheduleSet)
    replay = ScheduleSet(**{k: v for k, v in MNIST_SCHEDULE.__dict__.items()})
    for it in (0, 1, 2, 999, 15000, 45001):
        assert lr_at(replay, it) == lr_at(MNIST_SCHEDULE, it)
        assert tau_at(replay, it) == tau_at(MNIST_SCHEDULE, it)
    assert replay == MNIST_SCHEDULE
    del s


def test_default_hyperparameters():
    s = MNIST_SCHEDULE
    assert (s.momentum, s.batch_size, s.epochs) == (0.9, 125, 100)
    assert (s.lambda_ig, s.lambda_balance, s.lambda_f, s.lambda_h) == (1.0, 2.0, 5e-5, 9e-4)
    assert (s.tau0, s.tau_decay, s.tau_period, s.tau_min) == (25.0, 0.9999, 2, 1.0)
    assert FASHION_SCHEDULE.lambda_balance == 5.0
