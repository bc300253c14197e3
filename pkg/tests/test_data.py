import numpy as np
import pytest

from nfcausal.data import (DatasetSchema, MeasurementPanel, Neighborhood,
                           RowSplit, TreatmentSample, load_dataset,
                           make_row_split, write_dataset)
from nfcausal.exceptions import (DataError, DomainError, IngestionError,
                                 SchemaError, SizeError)

TOY_SCHEMA = DatasetSchema(outcome="y", treatment="s",
                           measurements=["x1", "x2"], unit_id="id",
                           n_levels=2)


def write_toy_csv(path, rows, header="id,y,s,x1,x2"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return str(path)


class TestLoadDataset:
    def test_shapes_and_order(self, tmp_path):
        f = write_toy_csv(tmp_path / "toy.csv",
                          ["a,1.0,0,0.5,1.5", "b,2.0,1,0.25,2.5",
                           "c,3.0,0,0.75,3.5"])
        panel, sample = load_dataset(f, TOY_SCHEMA)
        assert panel.x.shape == (2, 3)
        assert sample.n_units == 3
        assert panel.unit_ids == ("a", "b", "c")
        # column t of the CSV becomes row t; unit order preserved
        assert panel.x[0, 1] == 0.25 and panel.x[1, 2] == 3.5
        assert sample.y.tolist() == [1.0, 2.0, 3.0]

    def test_nan_cell_is_located(self, tmp_path):
        f = write_toy_csv(tmp_path / "bad.csv",
                          ["a,1.0,0,0.5,1.5", "b,2.0,1,0.25,NaN",
                           "c,3.0,0,0.75,3.5"])
        with pytest.raises(IngestionError, match=r"row 2.*x2"):
            load_dataset(f, TOY_SCHEMA)

    def test_treatment_outside_declared_levels(self, tmp_path):
        f = write_toy_csv(tmp_path / "lvl.csv",
                          ["a,1.0,0,0.5,1.5", "b,2.0,1,0.25,2.5",
                           "c,3.0,2,0.75,3.5"])
        with pytest.raises(DomainError):
            load_dataset(f, TOY_SCHEMA)

    def test_missing_column(self, tmp_path):
        f = write_toy_csv(tmp_path / "mis.csv", ["a,1.0,0,0.5"],
                          header="id,y,s,x1")
        with pytest.raises(SchemaError):
            load_dataset(f, TOY_SCHEMA)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        n, t = 7, 4
        x = rng.standard_normal((t, n)) * np.pi
        y = rng.standard_normal(n) / 3.0
        s = rng.integers(0, 2, n)
        z = rng.standard_normal((n, 2))
        schema = DatasetSchema(outcome="y", treatment="s",
                               measurements=[f"x{k}" for k in range(t)],
                               controls=["z1", "z2"])
        panel = MeasurementPanel(x)
        sample = TreatmentSample(y, s, z=z)
        path = tmp_path / "rt.csv"
        write_dataset(panel, sample, path, schema)
        panel2, sample2 = load_dataset(str(path), schema)
        assert np.array_equal(panel.x, panel2.x)
        assert np.array_equal(sample.y, sample2.y)
        assert np.array_equal(sample.z, sample2.z)
        assert np.array_equal(sample.s, sample2.s)


class TestTypes:
    def test_panel_rejects_nonfinite(self):
        x = np.ones((3, 3))
        x[1, 2] = np.inf
        with pytest.raises(DataError):
            MeasurementPanel(x)

    def test_panel_rejects_mismatched_w(self):
        with pytest.raises(SizeError):
            MeasurementPanel(np.ones((3, 3)), w=[np.ones((2, 3))])

    def test_panel_too_small(self):
        with pytest.raises(SizeError):
            MeasurementPanel(np.ones((1, 5)))

    def test_sample_indicator_partition(self):
        sample = TreatmentSample([1.0, 2.0, 3.0], [0, 1, 1])
        total = sum(sample.indicators(j) for j in range(sample.n_levels))
        assert np.array_equal(total, np.ones(3))

    def test_sample_rejects_fractional_labels(self):
        with pytest.raises(DomainError):
            TreatmentSample([1.0, 2.0], [0.5, 1.0])

    def test_neighborhood_canonical_order(self):
        nb = Neighborhood(center=5, members=[7, 5, 2], radius=1.0)
        assert nb.members.tolist() == [2, 5, 7]
        assert nb.center_position == 1

    def test_neighborhood_requires_center(self):
        with pytest.raises(DataError):
            Neighborhood(center=9, members=[1, 2], radius=0.5)

    def test_rowsplit_disjoint(self):
        with pytest.raises(DataError):
            RowSplit([0, 1], [1, 2])

    def test_arrays_are_frozen(self):
        panel = MeasurementPanel(np.ones((2, 2)))
        with pytest.raises(ValueError):
            panel.x[0, 0] = 7.0


class TestMakeRowSplit:
    def test_contiguous_halves_t4(self):
        split = make_row_split(4, "contiguous_halves")
        assert split.t_dagger.tolist() == [0, 1]
        assert split.t_ddagger.tolist() == [2, 3]

    def test_contiguous_halves_t250(self):
        split = make_row_split(250, "contiguous_halves")
        assert split.t_dagger.size == 125 and split.t_ddagger.size == 125
        assert split.t_dagger.tolist() == list(range(125))

    def test_random_reproducible(self):
        a = make_row_split(7, "random", seed=1)
        b = make_row_split(7, "random", seed=1)
        assert np.array_equal(a.t_dagger, b.t_dagger)
        assert np.array_equal(a.t_ddagger, b.t_ddagger)

    @pytest.mark.parametrize("t_total,scheme", [(9, "random"), (11, "thirds"),
                                                (8, "thirds"), (5, "contiguous_halves")])
    def test_partition_disjoint_exhaustive(self, t_total, scheme):
        split = make_row_split(t_total, scheme, seed=3)
        parts = [split.t_dagger, split.t_ddagger]
        if split.t_3 is not None:
            parts.append(split.t_3)
        merged = np.sort(np.concatenate(parts))
        assert merged.tolist() == list(range(t_total))
        sizes = [p.size for p in parts]
        assert max(sizes) - min(sizes) <= 1

    def test_too_small(self):
        with pytest.raises(SizeError):
            make_row_split(3, "contiguous_halves")
        with pytest.raises(SizeError):
            make_row_split(5, "thirds", seed=0)

    def test_random_requires_seed(self):
        with pytest.raises(DataError):
            make_row_split(8, "random")
