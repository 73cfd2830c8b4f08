import numpy as np
import pytest

from lgptrial.data import PatientSeries, TrialDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(rng, n_per_arm=4, arms=(1, 2), horizon=35, irregular=True):
    """Small random dataset with irregular weeks, for exactness checks."""
    patients = []
    for arm in arms:
        for j in range(n_per_arm):
            k = int(rng.integers(1, 8))
            if irregular:
                weeks = np.sort(rng.choice(np.arange(1, horizon + 1), size=k, replace=False))
            else:
                start = int(rng.integers(1, horizon - k + 2))
                weeks = np.arange(start, start + k)
            outcomes = rng.integers(0, 2, size=k)
            patients.append(PatientSeries(arm, f"p{arm}{j}", weeks, outcomes))
    return TrialDataset(tuple(patients), horizon)
