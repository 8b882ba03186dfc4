import math

import pandas as pd
import pytest

from dlab import settings
from dlab.experiments import cmd_sweep


@pytest.mark.slow
class TestCirclesSweep:
    def test_discrete_latents_beat_gaussian(self, tmp_path):
        summary = cmd_sweep("circles-sweep", tmp_path, workers=settings.THREADS, seeds=10, steps=3000)
        frame = pd.read_csv(tmp_path / "sweep.csv")
        disc = frame[frame["latent_kind"] == "discrete"]

        assert summary["runs_discrete"] == 10
        assert summary["median_mig_discrete"] > summary["median_mig_gaussian"]
        assert summary["aligned_discrete"] >= 3
        assert summary["rho_st_gap_mig"] < 0
        assert summary["selected_mig"] >= disc["mig"].median()
        assert not math.isnan(summary["median_mig_gaussian"])
        assert len(list(tmp_path.glob("*/latents.svg"))) == 20
