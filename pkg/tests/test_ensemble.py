import numpy as np
import pytest

from vdarwin.ensemble import FAMILIES, Ensemble, PhaseParticle, generate, read_csv, reference_ball, write_csv
from vdarwin.errors import EmptyEnsemble, InvalidSpec


def test_arrays_are_read_only():
    ens = reference_ball(16)
    with pytest.raises(ValueError):
        ens.x[0, 0] = 1.0


def test_support_radius_default_and_check():
    ens = Ensemble([[0.5, 0, 0]], [[0, 0.7, 0]], [1.0])
    assert ens.support_radius == pytest.approx(0.7)
    with pytest.raises(ValueError):
        Ensemble([[2.0, 0, 0]], [[0, 0, 0]], [1.0], support_radius=1.0)


def test_validation():
    with pytest.raises(EmptyEnsemble):
        Ensemble(np.zeros((0, 3)), np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        Ensemble([[0, 0, 0]], [[0, 0, 0]], [0.0])
    with pytest.raises(ValueError):
        Ensemble([[np.nan, 0, 0]], [[0, 0, 0]], [1.0])


def test_particles_roundtrip():
    ens = reference_ball(5)
    again = Ensemble.from_particles(list(ens))
    assert all(isinstance(q, PhaseParticle) for q in ens)
    assert np.array_equal(again.z, ens.z) and np.array_equal(again.w, ens.w)
    assert np.array_equal(Ensemble.from_z(ens.z, ens.w).z, ens.z)


def test_csv_roundtrip_is_lossless(tmp_path):
    ens = generate("two-stream", 40, seed=3)
    write_csv(ens, tmp_path / "e.csv")
    back = read_csv(tmp_path / "e.csv")
    assert np.array_equal(back.z, ens.z)
    assert np.array_equal(back.w, ens.w)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_csv(path)


def test_csv_no_rows(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x1,x2,x3,p1,p2,p3,w\n")
    with pytest.raises(EmptyEnsemble):
        read_csv(path)


@pytest.mark.parametrize("family", FAMILIES)
def test_families_respect_support(family):
    ens = generate(family, 300, radius=1.0, momentum_scale=0.4, seed=1)
    assert len(ens) == 300
    assert np.linalg.norm(ens.x, axis=1).max() <= 1.0
    assert np.linalg.norm(ens.p, axis=1).max() <= 1.0
    assert ens.total_weight == pytest.approx(1.0, rel=1e-15)


def test_generation_is_deterministic():
    a = generate("gaussian-ball", 50, seed=9)
    b = generate("gaussian-ball", 50, seed=9)
    assert np.array_equal(a.z, b.z)


def test_bad_specs():
    with pytest.raises(InvalidSpec):
        generate("plasma-blob", 10)
    with pytest.raises(InvalidSpec):
        generate("gaussian-ball", 0)
    with pytest.raises(InvalidSpec):
        generate("two-stream", 10, momentum_scale=1.5)


def test_reference_ball():
    ens = reference_ball()
    assert len(ens) == 512
    assert ens.support_radius == 1.0
    assert ens.total_weight == pytest.approx(1.0, rel=1e-15)
