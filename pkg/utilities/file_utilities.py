"""Readers and writers for the binary containers used by the toolbox.

    ADEA   model checkpoint (one zoo model per file, named <model_name>.adea)
    ADDS   FlatBinary labelled image dataset
    ADTR   raw tensor dump (disparity maps, filters, cosine maps)
    IDX    external image/label files (MNIST-style, optionally gzipped)
    P5     portable graymap images of [0, 1] maps

All ADxx containers are little-endian. Every tensor is stored as a tensor record:
u32 rank, rank x u32 extents, prod(extents) x f64.

"""
import gzip
import os
import struct
import time
from pathlib import Path

import numpy as np
from PIL import Image

from utilities.models import ARCHITECTURES, LabeledDataset, create_model
from utilities.config_utilities import ConfigurationError

CHECKPOINT_MAGIC = b'ADEA'
DATASET_MAGIC = b'ADDS'
RAW_TENSOR_MAGIC = b'ADTR'
FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = '.adea'

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Non-trainable per-model constants stored alongside the parameters
BUFFER_NAMES = ('input_shift', 'input_scale')


def _read_exact(fid, num_bytes, what):
    offset = fid.tell()
    data = fid.read(num_bytes)
    if len(data) != num_bytes:
        raise FileFormatError(f"Unexpected end of file while reading {what}", offset)
    return data


def _read_uint32(fid, what):
    value, = struct.unpack('<I', _read_exact(fid, 4, what))
    return value


def check_magic_number(fid, expected):
    """Checks the 4-byte magic at the start of an ADxx container."""
    magic = fid.read(4)
    if magic != expected:
        raise UnrecognizedFileError(f"Unrecognized file type: expected magic {expected!r}, found {magic!r}", 0)


def read_version_number(fid, verbose=False):
    offset = fid.tell()
    version = _read_uint32(fid, 'format version')
    if version != FORMAT_VERSION:
        raise FileFormatError(f"Unsupported format version {version}", offset)
    if verbose:
        print(f"| Reading container version {version}")
    return version


def write_tensor_record(fid, tensor):
    tensor = np.ascontiguousarray(tensor, dtype='<f8')
    fid.write(struct.pack('<I', tensor.ndim))
    if tensor.ndim:
        fid.write(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
    fid.write(tensor.tobytes())


def read_tensor_record(fid, what='tensor'):
    """Reads one tensor record and returns it as a float64 array."""
    rank = _read_uint32(fid, f'{what} rank')
    extents = struct.unpack(f'<{rank}I', _read_exact(fid, 4 * rank, f'{what} extents')) if rank else ()
    count = int(np.prod(extents)) if rank else 1
    data = _read_exact(fid, 8 * count, f'{what} values')
    return np.frombuffer(data, dtype='<f8').astype(np.float64).reshape(extents)


def write_name(fid, name):
    encoded = name.encode('utf-8')
    fid.write(struct.pack('<I', len(encoded)))
    fid.write(encoded)


def read_name(fid):
    """Reads a length-prefixed UTF-8 string."""
    length = _read_uint32(fid, 'name length')
    offset = fid.tell()
    if length > os.fstat(fid.fileno()).st_size - offset:
        raise FileFormatError('Name length too long.', offset)
    try:
        return _read_exact(fid, length, 'name').decode('utf-8')
    except UnicodeDecodeError:
        raise FileFormatError('Name is not valid UTF-8.', offset)


# ---------------------------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------------------------

def save_model(model, path):
    """Writes one model to an ADEA checkpoint. The model name is taken from the file stem on load."""
    tensors = dict(model.params)
    tensors['input_shift'] = np.array(model.input_shift)
    tensors['input_scale'] = np.array(model.input_scale)
    with open(path, 'wb') as fid:
        fid.write(CHECKPOINT_MAGIC)
        fid.write(struct.pack('<I', FORMAT_VERSION))
        fid.write(struct.pack('<I', ARCHITECTURES.index(model.architecture_id)))
        fid.write(struct.pack('<3I', *model.input_shape))
        fid.write(struct.pack('<I', model.num_classes))
        fid.write(struct.pack('<I', len(tensors)))
        for name, value in tensors.items():
            write_name(fid, name)
            write_tensor_record(fid, value)


def load_model(path, verbose=False):
    """Reads an ADEA checkpoint and rebuilds the frozen model."""
    path = Path(path)
    with open(path, 'rb') as fid:
        check_magic_number(fid, CHECKPOINT_MAGIC)
        read_version_number(fid, verbose)
        offset = fid.tell()
        arch_index = _read_uint32(fid, 'architecture id')
        if arch_index >= len(ARCHITECTURES):
            raise FileFormatError(f"Unknown architecture index {arch_index}", offset)
        input_shape = struct.unpack('<3I', _read_exact(fid, 12, 'input shape'))
        num_classes = _read_uint32(fid, 'class count')
        num_tensors = _read_uint32(fid, 'parameter count')
        tensors = {}
        for _ in range(num_tensors):
            name = read_name(fid)
            tensors[name] = read_tensor_record(fid, name)

    model = create_model(ARCHITECTURES[arch_index], input_shape, num_classes, path.stem,
                         input_shift=float(tensors.pop('input_shift', 0.0)),
                         input_scale=float(tensors.pop('input_scale', 1.0)))
    for name, expected in model.params.items():
        if name not in tensors:
            raise FileFormatError(f"Checkpoint {path} is missing parameter '{name}'", 0)
        if tensors[name].shape != expected.shape:
            raise FileFormatError(f"Parameter '{name}' has shape {tensors[name].shape}, expected {expected.shape}", 0)
        model.params[name] = tensors[name]
    if verbose:
        print(f"| Loaded {model} from {path}")
    return model.freeze()


def checkpoint_path(directory, model_name):
    return Path(directory) / f"{model_name}{CHECKPOINT_SUFFIX}"


def save_zoo(models, directory, verbose=False):
    """Writes every model to <directory>/<model_name>.adea and returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for model in models:
        path = checkpoint_path(directory, model.model_name)
        save_model(model, path)
        paths.append(path)
        if verbose:
            print(f"| Saved {model.model_name} to {path}")
    return paths


def load_zoo(directory, names=None, verbose=False):
    """Loads the named checkpoints (all checkpoints in the directory when names is None).

    Returns:
        zoo: Dict mapping model name to model, in the requested order.
    """
    directory = Path(directory)
    if names is None:
        if not directory.is_dir():
            raise ConfigurationError(f"Zoo directory '{directory}' not found")
        names = sorted(p.stem for p in directory.glob(f'*{CHECKPOINT_SUFFIX}'))
    zoo = {}
    for name in names:
        path = checkpoint_path(directory, name)
        if not path.is_file():
            raise ConfigurationError(f"Model checkpoint not found: {path}")
        zoo[name] = load_model(path, verbose)
    return zoo


# ---------------------------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------------------------

def write_flat_binary(dataset, path):
    """Writes a LabeledDataset to an ADDS container."""
    with open(path, 'wb') as fid:
        fid.write(DATASET_MAGIC)
        fid.write(struct.pack('<I', FORMAT_VERSION))
        fid.write(struct.pack('<I', len(dataset)))
        fid.write(struct.pack('<I', 3))
        fid.write(struct.pack('<3I', *dataset.image_shape))
        fid.write(struct.pack('<I', dataset.num_classes))
        fid.write(np.ascontiguousarray(dataset.labels, dtype='<u4').tobytes())
        fid.write(np.ascontiguousarray(dataset.images, dtype='<f8').tobytes())


def read_flat_binary(path, verbose=False):
    """Reads an ADDS container into a LabeledDataset."""
    tic = time.time()
    with open(path, 'rb') as fid:
        check_magic_number(fid, DATASET_MAGIC)
        read_version_number(fid, verbose)
        count = _read_uint32(fid, 'image count')
        offset = fid.tell()
        rank = _read_uint32(fid, 'image rank')
        if rank != 3:
            raise FileFormatError(f"Images must have rank 3, header says {rank}", offset)
        shape = struct.unpack('<3I', _read_exact(fid, 12, 'image shape'))
        num_classes = _read_uint32(fid, 'class count')
        labels_offset = fid.tell()
        labels = np.frombuffer(_read_exact(fid, 4 * count, 'labels'), dtype='<u4').astype(np.int64)
        values = _read_exact(fid, 8 * count * int(np.prod(shape)), 'images')
    images = np.frombuffer(values, dtype='<f8').astype(np.float64).reshape((count,) + tuple(shape))
    _validate_labels(labels, num_classes, labels_offset, 4)
    _validate_pixels(images, labels_offset + 4 * count)
    if verbose:
        print(f"| Read {count} images of shape {shape} from {path} in {time.time() - tic:.2f} s")
    return LabeledDataset(images, labels, num_classes, Path(path).stem)


def _open_maybe_gzip(path):
    return gzip.open(path, 'rb') if str(path).endswith('.gz') else open(path, 'rb')


def read_idx(images_path, labels_path, num_classes=None, verbose=False):
    """Reads an IDX image file (magic 0x00000803) and label file (magic 0x00000801).

    Pixel bytes are scaled to [0, 1] and images become single-channel (N, 1, H, W).
    When num_classes is None it is inferred as max(label) + 1 (at least 2).
    """
    if verbose:
        print(f"reading data {images_path} {labels_path}")
    with _open_maybe_gzip(images_path) as fid:
        header = fid.read(16)
        if len(header) < 4 or struct.unpack('>I', header[:4])[0] != IDX_IMAGES_MAGIC:
            raise UnrecognizedFileError(f"{images_path}: not an IDX image file", 0)
        if len(header) < 16:
            raise FileFormatError(f"{images_path}: truncated IDX header", len(header))
        _, num_images, rows, cols = struct.unpack('>IIII', header)
        pixels = fid.read(num_images * rows * cols)
        if len(pixels) != num_images * rows * cols:
            raise FileFormatError(f"{images_path}: expected {num_images * rows * cols} pixel bytes", 16 + len(pixels))

    with _open_maybe_gzip(labels_path) as fid:
        header = fid.read(8)
        if len(header) < 4 or struct.unpack('>I', header[:4])[0] != IDX_LABELS_MAGIC:
            raise UnrecognizedFileError(f"{labels_path}: not an IDX label file", 0)
        if len(header) < 8:
            raise FileFormatError(f"{labels_path}: truncated IDX header", len(header))
        _, num_labels = struct.unpack('>II', header)
        if num_labels != num_images:
            raise DataError(f"{num_images} images but {num_labels} labels")
        label_bytes = fid.read(num_labels)
        if len(label_bytes) != num_labels:
            raise FileFormatError(f"{labels_path}: expected {num_labels} label bytes", 8 + len(label_bytes))

    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if len(labels) else 2, 2)
    _validate_labels(labels, num_classes, 8, 1)
    images = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(num_images, 1, rows, cols) / 255.0
    if verbose:
        print(f"{num_images} images loaded.")
    return LabeledDataset(images, labels, num_classes, Path(images_path).name)


def _validate_labels(labels, num_classes, base_offset, item_size):
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(f"Label {labels[bad[0]]} out of range for {num_classes} classes "
                        f"(record {bad[0]}, byte offset {base_offset + item_size * bad[0]})")


def _validate_pixels(images, base_offset):
    flat = images.reshape(-1)
    bad = np.flatnonzero(~np.isfinite(flat) | (flat < 0.0) | (flat > 1.0))
    if bad.size:
        per_image = flat.size // max(len(images), 1)
        raise DataError(f"Pixel value {flat[bad[0]]} outside [0, 1] "
                        f"(record {bad[0] // per_image}, byte offset {base_offset + 8 * bad[0]})")


# ---------------------------------------------------------------------------------------------
# Map dumps
# ---------------------------------------------------------------------------------------------

def write_raw_tensor(tensor, path):
    with open(path, 'wb') as fid:
        fid.write(RAW_TENSOR_MAGIC)
        fid.write(struct.pack('<I', FORMAT_VERSION))
        write_tensor_record(fid, tensor)


def read_raw_tensor(path):
    with open(path, 'rb') as fid:
        check_magic_number(fid, RAW_TENSOR_MAGIC)
        read_version_number(fid)
        return read_tensor_record(fid)


def write_graymap(values, path, low=0.0, high=1.0):
    """Saves a 2-D map as an 8-bit binary portable graymap (P5), mapping [low, high] to [0, 255]."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"graymap needs a 2-D map, got shape {values.shape}")
    scaled = np.clip((values - low) / (high - low), 0.0, 1.0)
    pixels = np.rint(scaled * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def read_graymap(path):
    """Reads a P5 graymap back as a uint8 array."""
    with Image.open(path) as image:
        return np.array(image.convert('L'))


class DataFormatError(Exception):
    """Base class for malformed or unrecognised binary input. `offset` is the byte position in the
    file where parsing failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnrecognizedFileError(DataFormatError):
    """Exception returned when a file does not start with the expected magic number (indicating
    this is not a file of the requested container type).
    """


class FileFormatError(DataFormatError):
    """Exception returned when a header or body is truncated, has an unsupported version, or
    declares inconsistent sizes.
    """


class DataError(Exception):
    """Exception returned when a well-formed file holds invalid data, such as a label outside
    [0, numClasses), a pixel outside [0, 1] or mismatched image and label counts.
    """
