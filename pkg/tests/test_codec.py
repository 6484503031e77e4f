from __future__ import annotations

import struct

import numpy as np
import pytest

from conftest import TINY, binary_images, pattern_images, tiny_config, zero_weights
from convdraw_compression.codec import (
    HEADER_FORMAT,
    HEADER_SIZE,
    STREAM_MAGIC,
    Bitstream,
    QuantGrid,
    bin_masses,
    bin_pmf,
    calibrate_grids,
    choose_t_keep,
    compress,
    decompress,
    default_grids,
    encode_image,
    grids_from_extras,
    grids_to_extras,
    load_grids,
    prefix_payload_bits,
    quantize_latent,
    quantized_reconstruction,
    rate_report,
    stream_fingerprint,
)
from convdraw_compression.coder import FREQ_TOTAL
from convdraw_compression.draw import ConvDraw
from convdraw_compression.errors import ContractViolation, CorruptStreamError, ModelMismatchError


@pytest.fixture
def image(binary_batch):
    return binary_batch[:1]


class TestQuantization:
    def test_rounds_to_nearest_index_and_clamps(self):
        symbols, z_hat, clamped = quantize_latent(np.array([0.4, -1.6, 2.6, 100.0]), 1.0, -3, 3)
        assert symbols.tolist() == [0, -2, 3, 3]
        assert z_hat.tolist() == [0.0, -2.0, 3.0, 3.0]
        assert clamped == 1

    def test_scaled_grid(self):
        symbols, z_hat, clamped = quantize_latent(np.array([0.26, -0.74]), 0.5, -4, 4)
        assert symbols.tolist() == [1, -1]
        np.testing.assert_allclose(z_hat, [0.5, -0.5])
        assert clamped == 0

    def test_grid_rejects_bad_fields(self):
        with pytest.raises(ContractViolation):
            QuantGrid(delta=[0.0], k_min=[-1], k_max=[1])
        with pytest.raises(ContractViolation):
            QuantGrid(delta=[1.0], k_min=[2], k_max=[1])
        with pytest.raises(ContractViolation):
            QuantGrid(delta=[1.0, 1.0], k_min=[0], k_max=[1])
        with pytest.raises(ContractViolation):
            QuantGrid(delta=[1.0], k_min=[0], k_max=[FREQ_TOTAL])


class TestBinProbabilities:
    grid = QuantGrid(delta=[0.5], k_min=[-6], k_max=[6])

    def test_table_sums_to_total_and_is_symmetric(self):
        table = bin_pmf((0.0, 1.0), self.grid)
        assert table.total == FREQ_TOTAL
        assert table.offset == -6
        assert table.freqs.min() >= 1
        assert np.abs(table.freqs - table.freqs[::-1]).max() <= 1
        assert int(np.argmax(table.freqs)) == 6

    def test_edge_bins_absorb_tails(self):
        masses = bin_masses(np.array([0.0]), np.array([1.0]), 0.5, -2, 2)
        assert masses.sum() == pytest.approx(1.0)
        assert masses[0, 0] == pytest.approx(masses[0, -1])
        assert masses[0, 0] > masses[0, 1]

    def test_far_prior_keeps_every_symbol_codable(self):
        table = bin_pmf((50.0, 0.1), self.grid)
        assert table.total == FREQ_TOTAL
        assert table.freqs.min() == 1
        assert table.freqs[-1] == FREQ_TOTAL - (len(table) - 1)

    def test_single_symbol_alphabet(self):
        grid = QuantGrid(delta=[1.0], k_min=[0], k_max=[0])
        table = bin_pmf((3.0, 0.5), grid)
        assert table.freqs.tolist() == [FREQ_TOTAL]

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ContractViolation):
            bin_pmf((0.0, 0.0), self.grid)


class TestBitstream:
    def _stream(self, payload=b"\x01\x02\x03"):
        return Bitstream(
            model_hash=b"\x00" * 7 + b"\x01",
            height=4,
            width=4,
            channels=1,
            t_total=3,
            t_stored=2,
            temperature=0.5,
            payload=payload,
        )

    def test_header_layout(self):
        data = self._stream().to_bytes()
        assert HEADER_SIZE == 29
        assert len(data) == HEADER_SIZE + 3
        assert data.startswith(STREAM_MAGIC)
        assert Bitstream.from_bytes(data) == self._stream()

    def test_file_round_trip(self, tmp_path):
        path = self._stream().write(tmp_path / "img.cdrw")
        assert Bitstream.read(path) == self._stream()

    @pytest.mark.parametrize(
        "fields",
        [
            (b"XXXXX", 1, b"\x00" * 8, 4, 4, 1, 3, 2, 0.5, 0),
            (STREAM_MAGIC, 9, b"\x00" * 8, 4, 4, 1, 3, 2, 0.5, 0),
            (STREAM_MAGIC, 1, b"\x00" * 8, 4, 4, 1, 3, 2, 0.5, 5),
            (STREAM_MAGIC, 1, b"\x00" * 8, 4, 4, 1, 3, 4, 0.5, 0),
            (STREAM_MAGIC, 1, b"\x00" * 8, 4, 4, 1, 3, 2, 1.5, 0),
        ],
        ids=["magic", "version", "length", "stored-steps", "temperature"],
    )
    def test_corrupt_headers(self, fields):
        with pytest.raises(CorruptStreamError):
            Bitstream.from_bytes(struct.pack(HEADER_FORMAT, *fields))

    def test_short_stream(self):
        with pytest.raises(CorruptStreamError):
            Bitstream.from_bytes(self._stream().to_bytes()[:10])


class TestRoundTrip:
    def test_zero_steps_stores_nothing(self, tiny_model, image):
        stream = compress(image, tiny_model, 0)
        assert stream.payload == b""
        assert stream.t_stored == 0
        decoded = decompress(stream.to_bytes(), tiny_model)
        np.testing.assert_array_equal(decoded.data, tiny_model.sample(1, 0.0))

    @pytest.mark.parametrize("t_keep", [1, 2, 3])
    def test_decoder_matches_encoder_reconstruction(self, tiny_model, image, t_keep):
        grids = default_grids(tiny_model)
        stream = compress(image, tiny_model, t_keep, grids=grids)
        decoded = decompress(stream.to_bytes(), tiny_model, grids=grids)
        expected = quantized_reconstruction(image, tiny_model, t_keep, grids=grids)
        np.testing.assert_array_equal(decoded.data, expected)

    def test_two_layer_model_with_warm_tail(self, two_layer_model, image):
        grids = default_grids(two_layer_model)
        assert sorted(grids) == [1, 2]
        stream = compress(image, two_layer_model, 2, 0.3, grids=grids)
        assert stream.temperature == pytest.approx(0.3, abs=1e-7)
        decoded = decompress(Bitstream.from_bytes(stream.to_bytes()), two_layer_model, grids=grids, seed=11)
        expected = quantized_reconstruction(image, two_layer_model, 2, 0.3, grids=grids, seed=11)
        np.testing.assert_array_equal(decoded.data, expected)

    def test_calibrated_grids_survive_checkpoint_extras(self, tiny_model, tmp_path):
        calibration = binary_images(6, seed=9)
        grids = calibrate_grids(tiny_model, calibration, batch_size=4)
        restored = grids_from_extras(tiny_model, grids_to_extras(grids))
        np.testing.assert_array_equal(restored[1].k_min, grids[1].k_min)
        np.testing.assert_array_equal(restored[1].k_max, grids[1].k_max)
        assert np.all(grids[1].k_min <= 0) and np.all(grids[1].k_max >= 0)
        report = encode_image(calibration[:1], tiny_model, 3, grids=grids).report
        assert report.clamped_symbols == 0

    def test_missing_extras_fall_back_to_default(self, tiny_model):
        assert grids_from_extras(tiny_model, {}) is None
        fallback = load_grids(tiny_model, {})
        np.testing.assert_array_equal(fallback[1].k_min, default_grids(tiny_model)[1].k_min)

    def test_extras_for_other_latent_count(self, tiny_model):
        other = ConvDraw(tiny_config(latent_maps=3))
        with pytest.raises(ModelMismatchError):
            grids_from_extras(tiny_model, grids_to_extras(default_grids(other)))


class TestStreamChecks:
    def test_other_model_is_rejected(self, tiny_model, image):
        stream = compress(image, tiny_model, 2)
        other = ConvDraw(tiny_model.cfg, seed=99)
        with pytest.raises(ModelMismatchError):
            decompress(stream, other)

    def test_other_grids_are_rejected(self, tiny_model, image):
        grids = default_grids(tiny_model)
        wider = {layer: QuantGrid(grid.delta, grid.k_min, grid.k_max + 1) for layer, grid in grids.items()}
        stream = compress(image, tiny_model, 2, grids=wider)
        with pytest.raises(ModelMismatchError):
            decompress(stream, tiny_model)
        with pytest.raises(ModelMismatchError):
            decompress(stream, tiny_model, grids=grids)
        decoded = decompress(stream, tiny_model, grids=wider)
        np.testing.assert_array_equal(decoded.data, quantized_reconstruction(image, tiny_model, 2, grids=wider))

    def test_calibrated_stream_needs_calibrated_grids(self, tiny_model):
        calibrated = calibrate_grids(tiny_model, binary_images(16, seed=4))
        image = binary_images(1, seed=5)
        stream = compress(image, tiny_model, 3, grids=calibrated)
        assert stream.model_hash == stream_fingerprint(tiny_model, calibrated)
        if stream_fingerprint(tiny_model, default_grids(tiny_model)) != stream.model_hash:
            with pytest.raises(ModelMismatchError):
                decompress(stream, tiny_model)
        np.testing.assert_array_equal(
            decompress(stream, tiny_model, grids=calibrated).data,
            quantized_reconstruction(image, tiny_model, 3, grids=calibrated),
        )

    def test_geometry_mismatch(self, tiny_model, image):
        stream = compress(image, tiny_model, 1)
        stream.height = 8
        with pytest.raises(ModelMismatchError):
            decompress(stream, tiny_model)

    def test_trailing_bytes_are_rejected(self, tiny_model, image):
        stream = compress(image, tiny_model, 2)
        stream.payload += b"\x00"
        with pytest.raises(CorruptStreamError):
            decompress(stream.to_bytes(), tiny_model)

    def test_stored_steps_without_payload(self, tiny_model, image):
        stream = compress(image, tiny_model, 2)
        stream.payload = b""
        with pytest.raises(CorruptStreamError):
            decompress(stream, tiny_model)

    def test_argument_ranges(self, tiny_model, image):
        with pytest.raises(ContractViolation):
            compress(image, tiny_model, 4)
        with pytest.raises(ContractViolation):
            compress(image, tiny_model, 1, 1.5)
        with pytest.raises(ContractViolation):
            compress(binary_images(2), tiny_model, 1)

    def test_codec_needs_fixed_posterior_variance(self):
        model = ConvDraw(tiny_config(fixed_posterior_variance=False))
        with pytest.raises(ContractViolation):
            default_grids(model)


class TestRates:
    def test_zero_weight_model_has_no_kl(self, image):
        model = zero_weights(ConvDraw(tiny_config()))
        report = rate_report(image, model)
        assert report.total_kl_bits == 0.0
        assert report.clamped_symbols == 0
        assert len(report.steps) == 3

    def test_report_accounting(self, tiny_model, image):
        result = encode_image(image, tiny_model, 3)
        report = result.report
        assert report.bits_per_dim == pytest.approx(report.total_coded_bits / tiny_model.cfg.dims)
        assert report.payload_bytes == len(result.bitstream.payload)
        assert report.header_bytes == HEADER_SIZE
        assert sum(step.symbols for step in report.steps) == 3 * 2 * 2 * 2
        assert 8 * report.payload_bytes <= 1.05 * (report.total_ideal_bits + 32)
        assert report.total_kl_bits >= 0.0

    def test_prefix_sizes_match_full_encoding(self, tiny_model, image):
        result = encode_image(image, tiny_model, 3)
        sizes = prefix_payload_bits(result)
        assert sizes[0] == 0
        assert sizes == sorted(sizes)
        assert sizes[-1] == 8 * len(result.bitstream.payload)
        for t_keep in (1, 2):
            assert sizes[t_keep] == 8 * len(compress(image, tiny_model, t_keep).payload)

    def test_choose_t_keep(self, tiny_model, image):
        dims = tiny_model.cfg.dims
        sizes = prefix_payload_bits(encode_image(image, tiny_model, 3))
        assert choose_t_keep(image, tiny_model, 0.0) == 0
        assert choose_t_keep(image, tiny_model, 1e6) == 3
        chosen = choose_t_keep(image, tiny_model, sizes[2] / dims)
        assert chosen >= 2
        assert sizes[chosen] <= sizes[2]
        with pytest.raises(ContractViolation):
            choose_t_keep(image, tiny_model, -1.0)

    @pytest.mark.slow
    def test_trained_model_round_trip_and_rate(self, trained_tiny_model):
        model = trained_tiny_model
        grids = calibrate_grids(model, pattern_images(64, seed=3))
        full, empty = [], []
        for image in pattern_images(6, seed=55):
            image = image[None]
            result = encode_image(image, model, TINY.timesteps, grids=grids)
            report = result.report
            assert 8 * report.payload_bytes <= 1.05 * (report.total_ideal_bits + 32)
            decoded = decompress(result.bitstream.to_bytes(), model, grids=grids)
            np.testing.assert_array_equal(
                decoded.data, quantized_reconstruction(image, model, TINY.timesteps, grids=grids)
            )
            full.append(np.mean((decoded.data - image) ** 2))
            prior_only = decompress(compress(image, model, 0, grids=grids), model, grids=grids)
            empty.append(np.mean((prior_only.data - image) ** 2))
        assert np.mean(full) < np.mean(empty)
