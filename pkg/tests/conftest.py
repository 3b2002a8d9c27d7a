import numpy as np
import pytest

from auricle import dataset


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """6 subjects x 1 collection x 2 samples, no drift."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = dataset.SynthConfig(
        n_subjects=6, n_collections=1, samples_per_subject_per_collection=2, seed=7
    )
    return dataset.generate_synthetic(cfg, out)


@pytest.fixture(scope="session")
def longitudinal_synth(tmp_path_factory):
    """4 subjects x 3 collections x 2 samples with drift."""
    out = tmp_path_factory.mktemp("synth_long")
    cfg = dataset.SynthConfig(
        n_subjects=4, n_collections=3, samples_per_subject_per_collection=2,
        drift_per_collection=0.1, seed=13,
    )
    return dataset.generate_synthetic(cfg, out)


def random_simple_polygon(rng, width, height, n_vertices=None):
    """Star-shaped polygons are always simple."""
    n = n_vertices or int(rng.integers(3, 12))
    cx = rng.uniform(0.25 * width, 0.75 * width)
    cy = rng.uniform(0.25 * height, 0.75 * height)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    if np.unique(angles).shape[0] < n:
        angles = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    rmax = min(cx, cy, width - cx, height - cy) - 1e-6
    radii = rng.uniform(0.2 * rmax, rmax, n)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return pts
