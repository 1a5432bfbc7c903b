import struct
import tracemalloc
from math import prod

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as nps

from lmfusion import serialize
from lmfusion.config import FusionConfig
from lmfusion.errors import DimensionMismatch, MissingAppendedOne, ShapeMismatch, SizeTooLarge
from lmfusion.lowrank import (
    FactorSet,
    cp_reconstruct,
    factor_std,
    init_factors,
    lmf_fuse,
    lmf_fuse_bimodal,
)
from lmfusion.tensor import ModalVector, append_one, outer_product, tensor_linear
from lmfusion.verify import explicit_path

unit = st.floats(-1, 1, allow_nan=False, allow_infinity=False)


@st.composite
def fusion_cases(draw, modalities=(2, 4), max_dim=8, max_rank=4, max_out=4):
    M = draw(st.integers(*modalities))
    dims = draw(st.lists(st.integers(1, max_dim), min_size=M, max_size=M))
    r = draw(st.integers(1, max_rank))
    d_h = draw(st.integers(1, max_out))
    factors = [draw(nps.arrays(np.float64, (r, d + 1, d_h), elements=unit)) for d in dims]
    bias = draw(nps.arrays(np.float64, d_h, elements=unit))
    inputs = [append_one(draw(nps.arrays(np.float64, d, elements=unit))) for d in dims]
    return FactorSet(factors, bias), inputs


def random_factorset(rng, dims, r, d_h, bias=True):
    factors = [rng.uniform(-1, 1, (r, d + 1, d_h)) for d in dims]
    return FactorSet(factors, rng.uniform(-1, 1, d_h) if bias else None)


class TestCpReconstruct:
    def test_rank1_ones(self):
        f = FactorSet([np.ones((1, 2, 1)), np.ones((1, 2, 1))])
        W = cp_reconstruct(f)
        assert W.weights.shape == (1, 2, 2)
        np.testing.assert_array_equal(W.weights[0], np.ones((2, 2)))

    def test_zero_factors(self):
        f = FactorSet([np.zeros((3, 4, 2)), np.zeros((3, 2, 2)), np.zeros((3, 3, 2))])
        np.testing.assert_array_equal(cp_reconstruct(f).weights, 0.0)

    def test_matches_sum_of_outer_products(self):
        rng = np.random.default_rng(0)
        f = random_factorset(rng, (2, 2, 3), r=2, d_h=2)  # widths 3/3/4
        W = cp_reconstruct(f)
        for k in range(2):
            expected = sum(outer_product([F[i, :, k] for F in f.factors]).data for i in range(2))
            np.testing.assert_allclose(W.weights[k], expected, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(W.bias, f.bias)

    def test_size_cap(self):
        f = FactorSet([np.zeros((1, 1000, 1))] * 3)
        with pytest.raises(SizeTooLarge):
            cp_reconstruct(f, max_size=10**8)


class TestLmfFuse:
    def test_zero_factors_return_bias(self):
        f = FactorSet([np.zeros((2, 3, 1)), np.zeros((2, 4, 1))], [0.7])
        out = lmf_fuse(f, [append_one(np.ones(2)), append_one(np.ones(3))])
        np.testing.assert_array_equal(out, [0.7])

    def test_rank1_picks_one_product(self):
        fa = np.zeros((1, 4, 1))
        fa[0, 0, 0] = 1.0
        fv = np.zeros((1, 3, 1))
        fv[0, 0, 0] = 1.0
        f = FactorSet([fa, fv], [0.25])
        out = lmf_fuse(f, [append_one(np.array([3.0, -2.0, 7.0])), append_one(np.array([5.0, 9.0]))])
        np.testing.assert_array_equal(out, [15.25])

    def test_matches_explicit_path(self):
        rng = np.random.default_rng(1)
        f = random_factorset(rng, (4, 5, 6), r=3, d_h=2)
        zs = [append_one(rng.uniform(-1, 1, d)) for d in (4, 5, 6)]
        np.testing.assert_allclose(lmf_fuse(f, zs), tensor_linear(cp_reconstruct(f), outer_product(zs)),
                                   rtol=0, atol=1e-9)

    def test_accepts_modal_vectors(self):
        rng = np.random.default_rng(2)
        f = random_factorset(rng, (2, 3), r=2, d_h=2)
        zs = [append_one(rng.uniform(-1, 1, d)) for d in (2, 3)]
        mv = [ModalVector(z, m + 1) for m, z in enumerate(zs)]
        np.testing.assert_array_equal(lmf_fuse(f, mv), lmf_fuse(f, zs))

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(3)
        f = random_factorset(rng, (2, 3, 4), r=3, d_h=2)
        zs = [append_one(rng.uniform(-1, 1, (5, d))) for d in (2, 3, 4)]
        out = lmf_fuse(f, zs)
        assert out.shape == (5, 2)
        for b in range(5):
            np.testing.assert_allclose(out[b], lmf_fuse(f, [z[b] for z in zs]), rtol=1e-14)

    def test_dimension_mismatch(self):
        f = FactorSet([np.zeros((1, 3, 1)), np.zeros((1, 3, 1))])
        with pytest.raises(DimensionMismatch):
            lmf_fuse(f, [append_one(np.ones(2)), append_one(np.ones(3))])
        with pytest.raises(DimensionMismatch):
            lmf_fuse(f, [append_one(np.ones(2))])

    def test_missing_appended_one(self):
        f = FactorSet([np.zeros((1, 3, 1)), np.zeros((1, 3, 1))])
        zs = [np.array([1.0, 2.0, 3.0]), append_one(np.ones(2))]
        with pytest.raises(MissingAppendedOne):
            lmf_fuse(f, zs)
        lmf_fuse(f, zs, strict=False)

    def test_factor_invariants(self):
        with pytest.raises(ShapeMismatch):
            FactorSet([np.zeros((1, 3, 1))])
        with pytest.raises(ShapeMismatch):
            FactorSet([np.zeros((1, 3, 1)), np.zeros((2, 3, 1))])
        with pytest.raises(ShapeMismatch):
            FactorSet([np.zeros((1, 3, 1)), np.zeros((1, 3, 2))])

    @given(fusion_cases())
    @settings(max_examples=200, deadline=None)
    def test_equivalence_property(self, case):
        f, zs = case
        np.testing.assert_allclose(lmf_fuse(f, zs), explicit_path(f, zs), rtol=0, atol=1e-9)

    @given(fusion_cases(), st.data(), unit)
    @settings(max_examples=100, deadline=None)
    def test_multilinear_in_each_modality(self, case, data, c):
        f, zs = case
        f = FactorSet(f.factors)  # zero bias
        m = data.draw(st.integers(0, len(zs) - 1))
        scaled = list(zs)
        scaled[m] = np.append(c * zs[m][:-1], 1.0)
        # the constant 1 contributes lower-order terms, so the map is affine in the
        # free coordinates: h(c z) - h(0) = c (h(z) - h(0))
        base = list(zs)
        base[m] = np.append(np.zeros(zs[m].size - 1), 1.0)
        h0 = lmf_fuse(f, base)
        np.testing.assert_allclose(lmf_fuse(f, scaled) - h0, c * (lmf_fuse(f, zs) - h0), atol=1e-12)

    def test_no_order_m_buffer(self):
        """Peak traced allocation stays far below one prod(d_m + 1) buffer."""
        rng = np.random.default_rng(4)
        dims = (40, 40, 40)
        f = random_factorset(rng, dims, r=4, d_h=2)
        zs = [append_one(rng.uniform(-1, 1, d)) for d in dims]
        full_bytes = prod(d + 1 for d in dims) * 8

        def peak(fn):
            tracemalloc.start()
            tracemalloc.reset_peak()
            fn()
            _, p = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            return p

        assert peak(lambda: explicit_path(f, zs)) >= full_bytes  # the counter sees numpy buffers
        assert peak(lambda: lmf_fuse(f, zs)) < full_bytes / 50

    def test_adding_a_modality(self):
        rng = np.random.default_rng(5)
        f = random_factorset(rng, (2, 3), r=2, d_h=3)
        g = f.with_modality(rng.uniform(-1, 1, (2, 5, 3)))
        assert g.n_modalities == 3 and g.rank == f.rank and g.output_dim == f.output_dim
        zs = [append_one(rng.uniform(-1, 1, d)) for d in (2, 3, 4)]
        np.testing.assert_allclose(lmf_fuse(g, zs), explicit_path(g, zs), atol=1e-12)


class TestBimodal:
    def test_zero_factors(self):
        f = FactorSet([np.zeros((3, 3, 2)), np.zeros((3, 2, 2))], [1.0, -2.0])
        out = lmf_fuse_bimodal(f, append_one(np.ones(2)), append_one(np.ones(1)))
        np.testing.assert_array_equal(out, [1.0, -2.0])

    @given(fusion_cases(modalities=(2, 2), max_rank=1))
    @settings(deadline=None)
    def test_rank1_equals_general_form(self, case):
        f, (za, zv) = case
        np.testing.assert_allclose(lmf_fuse_bimodal(f, za, zv), lmf_fuse(f, [za, zv]), rtol=0, atol=1e-12)

    def test_higher_rank_gap_is_measured(self):
        """At rank >= 2 the sum-then-product form keeps cross-rank terms; record the gap."""
        rng = np.random.default_rng(6)
        gaps = []
        for _ in range(20):
            f = random_factorset(rng, (3, 4), r=3, d_h=2)
            za, zv = append_one(rng.uniform(-1, 1, 3)), append_one(rng.uniform(-1, 1, 4))
            np.testing.assert_allclose(lmf_fuse(f, [za, zv]), explicit_path(f, [za, zv]), atol=1e-12)
            gaps.append(np.max(np.abs(lmf_fuse_bimodal(f, za, zv) - lmf_fuse(f, [za, zv]))))
        print(f"bimodal vs general form at rank 3: mean gap {np.mean(gaps):.3f}, max {np.max(gaps):.3f}")
        assert np.all(np.isfinite(gaps))

    def test_requires_two_modalities(self):
        f = FactorSet([np.zeros((1, 2, 1))] * 3)
        with pytest.raises(DimensionMismatch):
            lmf_fuse_bimodal(f, np.ones(2), np.ones(2))


class TestInitFactors:
    def test_deterministic(self):
        cfg = FusionConfig((3, 4), rank=2, output_dim=3, seed=11)
        a, b = init_factors(cfg), init_factors(cfg)
        for Fa, Fb in zip(a.factors, b.factors):
            assert Fa.tobytes() == Fb.tobytes()
        np.testing.assert_array_equal(a.bias, 0.0)

    def test_variance(self):
        cfg = FusionConfig((9, 19), rank=5, output_dim=200, seed=0)
        f = init_factors(cfg)
        for F, d in zip(f.factors, cfg.dims):
            assert F.size >= 10**4
            expected = 1.0 / (cfg.rank * (d + 1))
            assert abs(F.var() / expected - 1) < 0.10

    def test_variance_1e5_samples(self):
        cfg = FusionConfig((3, 3), rank=4, output_dim=6250, seed=1)  # 4*4*6250 = 1e5 per factor
        for F in init_factors(cfg).factors:
            assert F.size == 10**5
            assert abs(F.var() * 16 - 1) < 0.10

    def test_std_formula(self):
        assert factor_std(1, 1) == 1.0
        assert factor_std(4, 33) == pytest.approx(1 / np.sqrt(132))
        cfg = FusionConfig((1, 1), rank=1, output_dim=50000, seed=2)
        for F in init_factors(cfg).factors:
            assert abs(F.std() - factor_std(1, 2)) < 0.01

    def test_precision(self):
        f = init_factors(FusionConfig((2, 2), precision="f32"))
        assert f.dtype == np.float32


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        f = random_factorset(rng, (2, 5, 3), r=3, d_h=2)
        blocks = {"encoder.0.W1": rng.normal(size=(4, 2)), "head.b": rng.normal(size=1)}
        serialize.save(tmp_path / "m.lmf", f, blocks)
        g, b2 = serialize.load(tmp_path / "m.lmf")
        for Fa, Fb in zip(f.factors, g.factors):
            np.testing.assert_array_equal(Fa, Fb)
        np.testing.assert_array_equal(f.bias, g.bias)
        assert list(b2) == list(blocks)
        for k in blocks:
            np.testing.assert_array_equal(blocks[k], b2[k])

    def test_header_layout(self):
        f = FactorSet([np.arange(6.0).reshape(2, 3, 1), np.arange(4.0).reshape(2, 2, 1)], [9.0])
        raw = serialize.dumps(f)
        assert raw[:4] == b"LMFS"
        assert struct.unpack("<HBBIII", raw[4:20]) == (1, 0, 0, 2, 2, 1)
        assert struct.unpack("<2I", raw[20:28]) == (3, 2)
        body = np.frombuffer(raw[28:28 + 8 * 11], dtype="<f8")
        np.testing.assert_array_equal(body, list(range(6)) + list(range(4)) + [9.0])
        assert struct.unpack("<I", raw[-4:]) == (0,)
        assert len(raw) == 28 + 8 * 11 + 4

    def test_float32(self):
        f = init_factors(FusionConfig((2, 3), precision="f32"))
        g, _ = serialize.loads(serialize.dumps(f))
        assert g.dtype == np.float32
        np.testing.assert_array_equal(f.factors[1], g.factors[1])

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ])
    def test_rejects_bad_files(self, mutate):
        raw = serialize.dumps(FactorSet([np.ones((1, 2, 1))] * 2))
        with pytest.raises(serialize.FormatError):
            serialize.loads(mutate(raw))
