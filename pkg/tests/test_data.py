import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptmda.data import (
    BatchStream,
    CSVFormatError,
    Domain,
    SyntheticSpec,
    dump_csv_domain,
    gen_synthetic,
    load_csv_domain,
    make_moons,
    rng_stream,
    rotate,
    sample_batch,
)


class TestSynthetic:
    def test_zero_rotation_is_base_sample(self):
        spec = SyntheticSpec(seed=3, n_per_domain=60)
        doms = gen_synthetic(spec)
        X, y = make_moons(60, spec.noise_std, rng_stream(3, "data", "rot0"))
        assert doms[0].X.tobytes() == X.tobytes()
        np.testing.assert_array_equal(doms[0].y, y)

    @given(st.floats(-360, 360), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_rotation_inverse(self, theta, seed):
        X = np.random.default_rng(seed).normal(size=(20, 2))
        np.testing.assert_allclose(rotate(rotate(X, theta), -theta), X, rtol=0, atol=1e-12)

    def test_rotation_direction(self):
        np.testing.assert_allclose(rotate(np.array([[1.0, 0.0]]), 90.0), [[0.0, 1.0]], atol=1e-15)

    def test_deterministic(self):
        a, b = gen_synthetic(SyntheticSpec(seed=7)), gen_synthetic(SyntheticSpec(seed=7))
        for da, db in zip(a, b):
            assert da.X.tobytes() == db.X.tobytes() and da.y.tobytes() == db.y.tobytes()

    def test_roles_and_shared_label_space(self):
        doms = gen_synthetic(SyntheticSpec())
        assert [d.role for d in doms] == ["source"] * 3 + ["target"]
        assert [d.name for d in doms] == ["rot0", "rot30", "rot60", "rot90"]
        spaces = {tuple(np.unique(d.y)) for d in doms}
        assert spaces == {(0, 1)}

    @pytest.mark.parametrize("family,params", [
        ("rotated-moons", (0.0, 45.0)),
        ("rotated-moons", (0.0, 10.0, 20.0)),
        ("shifted-gaussians", (((0.0, 0.0), 1.0), ((2.0, 0.0), 1.5), ((0.0, 3.0), 0.5))),
    ])
    @pytest.mark.parametrize("n", [99, 100, 501])
    def test_class_balance(self, family, params, n):
        for d in gen_synthetic(SyntheticSpec(family=family, params=params, n_per_domain=n)):
            counts = np.bincount(d.y)
            assert counts.max() - counts.min() <= 1
            assert len(d) == n

    def test_adding_a_domain_leaves_others_unchanged(self):
        a = gen_synthetic(SyntheticSpec(params=(0.0, 90.0)))
        b = gen_synthetic(SyntheticSpec(params=(0.0, 45.0, 90.0)))
        assert a[0].X.tobytes() == b[0].X.tobytes()
        assert a[1].X.tobytes() == b[2].X.tobytes()

    def test_invalid_family(self):
        with pytest.raises(ValueError):
            gen_synthetic(SyntheticSpec(family="spirals"))

    @pytest.mark.parametrize("params", [(0.0,), (0.0, 30.0, 30.0)])
    def test_invalid_params(self, params):
        with pytest.raises(ValueError):
            SyntheticSpec(params=params)


class TestCSV:
    def write(self, tmp_path, text):
        p = tmp_path / "d.csv"
        p.write_text(text)
        return p

    def test_three_rows(self, tmp_path):
        d = load_csv_domain(self.write(tmp_path, "a,b,label\n1,2,0\n3,4,1\n5,6,0\n"), name="d")
        assert d.X.shape == (3, 2)
        np.testing.assert_array_equal(d.y, [0, 1, 0])

    def test_unlabelled_target(self, tmp_path):
        d = load_csv_domain(self.write(tmp_path, "a,b\n1,2\n3,4\n"), role="target")
        assert d.y is None and d.role == "target"

    @pytest.mark.parametrize("body,line", [
        ("a,b,label\n1,2,0\n3,0\n", 3),
        ("a,b,label\n1,2,0\n1,x,1\n", 3),
        ("a,b,label\n1,2,0.5\n", 2),
        ("a,b,label\n1,2,-1\n", 2),
    ])
    def test_errors_carry_line_number(self, tmp_path, body, line):
        with pytest.raises(CSVFormatError, match=f":{line}:"):
            load_csv_domain(self.write(tmp_path, body))

    def test_label_outside_declared_classes(self, tmp_path):
        with pytest.raises(CSVFormatError, match=":3:"):
            load_csv_domain(self.write(tmp_path, "a,label\n1,0\n2,2\n"), n_classes=2)

    def test_non_contiguous_labels(self, tmp_path):
        with pytest.raises(CSVFormatError):
            load_csv_domain(self.write(tmp_path, "a,label\n1,0\n2,2\n"))

    def test_selected_columns(self, tmp_path):
        d = load_csv_domain(self.write(tmp_path, "a,b,c,label\n1,2,3,0\n4,5,6,0\n"), feature_columns=["c", "a"])
        np.testing.assert_array_equal(d.X, [[3, 1], [6, 4]])

    def test_round_trip_bit_exact(self, tmp_path):
        dom = gen_synthetic(SyntheticSpec(n_per_domain=40))[1]
        p = tmp_path / "r.csv"
        dump_csv_domain(dom, p)
        back = load_csv_domain(p, name=dom.name)
        assert back.X.tobytes() == dom.X.tobytes()
        np.testing.assert_array_equal(back.y, dom.y)


class TestBatches:
    def domain(self, n):
        return Domain("d", np.arange(2.0 * n).reshape(n, 2), np.arange(n) % 2, "source")

    def test_full_batch_is_permutation(self):
        d = self.domain(10)
        X, y = sample_batch(d, 10, BatchStream(10, 10, rng_stream(0, "b")))
        assert sorted(X[:, 0].tolist()) == sorted(d.X[:, 0].tolist())

    def test_small_domain_with_replacement(self):
        d = self.domain(3)
        X, _ = sample_batch(d, 8, BatchStream(3, 8, rng_stream(0, "b")))
        assert X.shape == (8, 2)
        assert set(X[:, 0].tolist()) <= set(d.X[:, 0].tolist())

    def test_no_repeat_within_pass(self):
        s = BatchStream(12, 4, rng_stream(1, "b"))
        seen = np.concatenate([s.next_indices() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_same_key_same_sequence(self):
        a, b = BatchStream(50, 7, rng_stream(5, "x", "y")), BatchStream(50, 7, rng_stream(5, "x", "y"))
        for _ in range(20):
            np.testing.assert_array_equal(a.next_indices(), b.next_indices())

    def test_streams_keyed_by_name(self):
        a = rng_stream(5, "stage1", "rot0").integers(0, 2**31, 4)
        b = rng_stream(5, "stage1", "rot30").integers(0, 2**31, 4)
        assert not np.array_equal(a, b)

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            BatchStream(0, 4, rng_stream(0)).next_indices()
