import gzip
import re
import struct

import numpy as np
import pytest
from PIL import Image

from utilities.config_utilities import ConfigurationError
from utilities.file_utilities import (
    CHECKPOINT_MAGIC, DataError, FileFormatError, UnrecognizedFileError, checkpoint_path, load_model, load_zoo,
    read_flat_binary, read_graymap, read_idx, read_raw_tensor, save_model, save_zoo, write_flat_binary,
    write_graymap, write_raw_tensor,
)
from utilities.models import ARCHITECTURES, LabeledDataset, create_model

from tests.conftest import NUM_CLASSES, SMALL_SHAPE


class TestCheckpoints:

    @pytest.mark.parametrize('architecture', ARCHITECTURES)
    def test_round_trip(self, architecture, tmp_path, rng):
        model = create_model(architecture, SMALL_SHAPE, NUM_CLASSES, 'roundtrip', seed=4, input_shift=0.5,
                             input_scale=4.0)
        path = tmp_path / 'roundtrip.adea'
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.architecture_id == architecture
        assert loaded.model_name == 'roundtrip'
        assert (loaded.input_shift, loaded.input_scale) == (0.5, 4.0)
        for name, value in model.params.items():
            np.testing.assert_array_equal(loaded.params[name], value)
        x = rng.uniform(size=SMALL_SHAPE)
        np.testing.assert_array_equal(loaded.forward(x), model.forward(x))

    def test_loaded_model_is_frozen(self, tmp_path):
        path = tmp_path / 'linear.adea'
        save_model(create_model('Linear', SMALL_SHAPE, NUM_CLASSES), path)
        with pytest.raises(ValueError):
            load_model(path).params['W'][0, 0] = 1.0

    def test_zoo_round_trip(self, small_zoo, tmp_path):
        paths = save_zoo(small_zoo, tmp_path / 'zoo')
        assert [p.name for p in paths] == [f"{m.model_name}.adea" for m in small_zoo]
        loaded = load_zoo(tmp_path / 'zoo')
        assert sorted(loaded) == sorted(m.model_name for m in small_zoo)
        subset = load_zoo(tmp_path / 'zoo', names=['mlp', 'linear'])
        assert list(subset) == ['mlp', 'linear']

    def test_missing_checkpoint_is_named(self, small_zoo, tmp_path):
        save_zoo(small_zoo[:1], tmp_path)
        with pytest.raises(ConfigurationError, match=re.escape(str(checkpoint_path(tmp_path, "resnet")))):
            load_zoo(tmp_path, names=['resnet'])
        with pytest.raises(ConfigurationError):
            load_zoo(tmp_path / 'missing')

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.adea'
        path.write_bytes(b'NOPE' + bytes(40))
        with pytest.raises(UnrecognizedFileError) as info:
            load_model(path)
        assert info.value.offset == 0

    def test_truncated_checkpoint(self, tmp_path):
        path = tmp_path / 'mlp.adea'
        save_model(create_model('Mlp', SMALL_SHAPE, NUM_CLASSES), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FileFormatError):
            load_model(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / 'v9.adea'
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack('<I', 9) + bytes(32))
        with pytest.raises(FileFormatError) as info:
            load_model(path)
        assert info.value.offset == 4


class TestFlatBinary:

    def test_round_trip(self, small_data, tmp_path):
        path = tmp_path / 'data.adds'
        write_flat_binary(small_data, path)
        loaded = read_flat_binary(path)
        np.testing.assert_array_equal(loaded.images, small_data.images)
        np.testing.assert_array_equal(loaded.labels, small_data.labels)
        assert loaded.num_classes == small_data.num_classes
        assert loaded.name == 'data'

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / 'bad.adds'
        path.write_bytes(b'ADEA' + bytes(60))
        with pytest.raises(UnrecognizedFileError) as info:
            read_flat_binary(path)
        assert info.value.offset == 0

    def test_truncated_body(self, small_data, tmp_path):
        path = tmp_path / 'short.adds'
        write_flat_binary(small_data, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FileFormatError):
            read_flat_binary(path)

    def test_label_out_of_range(self, tmp_path):
        data = LabeledDataset(np.zeros((3,) + SMALL_SHAPE), np.array([0, 1, 2]), 3)
        path = tmp_path / 'labels.adds'
        write_flat_binary(data, path)
        raw = bytearray(path.read_bytes())
        # header: magic, version, count, rank, 3 dims, classes = 32 bytes, then uint32 labels
        raw[32 + 4:32 + 8] = struct.pack('<I', 7)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match='Label 7'):
            read_flat_binary(path)

    @pytest.mark.parametrize('value, text', [(7.5, '7.5'), (-3.0, '-3.0'), (np.nan, 'nan'), (np.inf, 'inf')])
    def test_pixel_outside_unit_range(self, value, text, tmp_path):
        data = LabeledDataset(np.full((3,) + SMALL_SHAPE, 0.5), np.array([0, 1, 2]), 3)
        path = tmp_path / 'pixels.adds'
        write_flat_binary(data, path)
        raw = bytearray(path.read_bytes())
        # 32-byte header, 3 uint32 labels, then float64 pixels; flip pixel 5 of record 1
        index = int(np.prod(SMALL_SHAPE)) + 5
        offset = 32 + 4 * 3 + 8 * index
        raw[offset:offset + 8] = struct.pack('<d', value)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match=re.escape(f'Pixel value {text} outside [0, 1] '
                                                      f'(record 1, byte offset {offset})')):
            read_flat_binary(path)

    def test_unit_range_boundaries_load(self, tmp_path):
        images = np.full((2,) + SMALL_SHAPE, 0.5)
        images[0, 0, 0, 0], images[1, -1, -1, -1] = 0.0, 1.0
        path = tmp_path / 'edges.adds'
        write_flat_binary(LabeledDataset(images, np.array([0, 1]), 2), path)
        np.testing.assert_array_equal(read_flat_binary(path).images, images)


def _write_idx(tmp_path, images, labels, compress=False):
    opener = gzip.open if compress else open
    suffix = '.gz' if compress else ''
    images_path = tmp_path / f'images-idx3-ubyte{suffix}'
    labels_path = tmp_path / f'labels-idx1-ubyte{suffix}'
    with opener(images_path, 'wb') as fid:
        fid.write(struct.pack('>IIII', 0x803, *images.shape))
        fid.write(images.astype(np.uint8).tobytes())
    with opener(labels_path, 'wb') as fid:
        fid.write(struct.pack('>II', 0x801, len(labels)))
        fid.write(labels.astype(np.uint8).tobytes())
    return images_path, labels_path


class TestIdx:

    @pytest.mark.parametrize('compress', [False, True])
    def test_reads_images_and_labels(self, compress, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(6, 5, 4))
        labels = np.array([0, 1, 2, 1, 0, 2])
        loaded = read_idx(*_write_idx(tmp_path, pixels, labels, compress))
        assert loaded.images.shape == (6, 1, 5, 4)
        np.testing.assert_allclose(loaded.images[:, 0], pixels / 255.0)
        np.testing.assert_array_equal(loaded.labels, labels)
        assert loaded.num_classes == 3

    def test_wrong_magic(self, tmp_path):
        images_path, labels_path = _write_idx(tmp_path, np.zeros((2, 3, 3)), np.array([0, 1]))
        with pytest.raises(UnrecognizedFileError) as info:
            read_idx(labels_path, images_path)
        assert info.value.offset == 0

    def test_count_mismatch(self, tmp_path):
        images_path, _ = _write_idx(tmp_path, np.zeros((2, 3, 3)), np.array([0, 1]))
        other = tmp_path / 'other'
        other.mkdir()
        _, labels_path = _write_idx(other, np.zeros((3, 3, 3)), np.array([0, 1, 1]))
        with pytest.raises(DataError):
            read_idx(images_path, labels_path)

    def test_label_outside_declared_classes(self, tmp_path):
        paths = _write_idx(tmp_path, np.zeros((2, 3, 3)), np.array([0, 5]))
        with pytest.raises(DataError):
            read_idx(*paths, num_classes=4)


class TestMapDumps:

    def test_raw_tensor_round_trip(self, tmp_path, rng):
        values = rng.normal(size=(5, 7))
        write_raw_tensor(values, tmp_path / 'map.adtr')
        np.testing.assert_array_equal(read_raw_tensor(tmp_path / 'map.adtr'), values)

    def test_graymap(self, tmp_path):
        values = np.array([[-1.0, 0.0, 1.0], [2.0, -3.0, 0.5]])
        path = tmp_path / 'map.pgm'
        write_graymap(values, path, low=-1.0, high=1.0)
        assert path.read_bytes()[:2] == b'P5'
        with Image.open(path) as image:
            assert image.mode == 'L'
        np.testing.assert_array_equal(read_graymap(path), [[0, 128, 255], [255, 0, 191]])

    def test_graymap_needs_two_dimensions(self, tmp_path):
        with pytest.raises(ValueError):
            write_graymap(np.zeros((2, 2, 2)), tmp_path / 'bad.pgm')
