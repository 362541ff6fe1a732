"""Shared test doubles."""

import sys

import pytest


class CountingDataset:
    """Site data double that records who reads its rows."""

    def __init__(self, dataset):
        self.site_id = dataset.site_id
        self.n_obs = dataset.n_obs
        self.dim = dataset.dim
        self._rows = dataset.observations
        self.site_reads = 0
        self.foreign_reads = 0

    @property
    def observations(self):
        frame = sys._getframe(1)
        while frame is not None:
            if frame.f_globals.get("__name__") == "src.federation" and frame.f_code.co_name.startswith("handle_"):
                self.site_reads += 1
                return self._rows
            frame = frame.f_back
        self.foreign_reads += 1
        return self._rows


@pytest.fixture
def counting_dataset():
    return CountingDataset
