import os
import json
import tempfile
from collections import OrderedDict
import numpy as np

from .errors import CheckpointError
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Binary named-tensor files (model checkpoints and dataset samples).

Layout (little-endian): magic 'SGSF', u32 version, u32 tensor count, then per
tensor u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype (0 = f32) and
the raw values; a second section with the same encoding holds the optimizer
state; the file ends with u32 length + UTF-8 JSON config snapshot.
"""

logger = sgsflogger(__name__, logfile)

MAGIC = b'SGSF'
VERSION = 1
DTYPE_F32 = 0

uint8 = np.dtype('<u1')
uint32 = np.dtype('<u4')
uint64 = np.dtype('<u8')
float32 = np.dtype('<f4')


def atomic_write(filename, payload):
    """Write bytes (or text) to a temporary file next to filename, then rename it into place
    """
    if isinstance(payload, str):
        payload = payload.encode('utf-8')
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    fd, tmpname = tempfile.mkstemp(prefix='.tmp_', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmpname, filename)
    except BaseException:
        if os.path.exists(tmpname):
            os.remove(tmpname)
        raise
    logger.debug("Wrote {0} bytes to {1}".format(len(payload), filename))


def dump_config(config):
    """Canonical JSON text of a config snapshot (stable key order and separators)"""
    return json.dumps(config, sort_keys=True, separators=(',', ':'))


class _Reader(object):
    """Cursor over a byte buffer raising CheckpointError on truncation"""

    def __init__(self, buffer, filename):
        self.buffer = buffer
        self.offset = 0
        self.filename = filename

    def take(self, nbytes):
        if self.offset + nbytes > len(self.buffer):
            logger.error("Truncated file {0} at byte {1}".format(self.filename, self.offset))
            raise CheckpointError("Truncated file {0}: needed {1} bytes at offset {2}"
                                  .format(self.filename, nbytes, self.offset))
        chunk = self.buffer[self.offset:self.offset + nbytes]
        self.offset += nbytes
        return chunk

    def values(self, dtype, count=1):
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def scalar(self, dtype):
        return int(self.values(dtype)[0])


class CheckpointFile(object):
    '''Class representing an SGSF tensor file'''

    def __init__(self, filename):
        """
        :param filename: path of the file
        :type filename: str
        """
        self.filename = filename

    @staticmethod
    def _encode_section(tensors):
        chunks = [np.array(len(tensors), uint32).tobytes()]
        for name, values in tensors.items():
            values = np.asarray(values)
            encoded = name.encode('utf-8')
            chunks.append(np.array(len(encoded), uint32).tobytes())
            chunks.append(encoded)
            chunks.append(np.array(values.ndim, uint32).tobytes())
            chunks.append(np.array(values.shape, uint64).tobytes())
            chunks.append(np.array(DTYPE_F32, uint8).tobytes())
            chunks.append(np.ascontiguousarray(values, dtype=float32).tobytes())
        return b''.join(chunks)

    def _decode_section(self, reader):
        tensors = OrderedDict()
        count = reader.scalar(uint32)
        for _ in range(count):
            name = reader.take(reader.scalar(uint32)).decode('utf-8')
            rank = reader.scalar(uint32)
            shape = tuple(int(d) for d in reader.values(uint64, rank))
            dtype = reader.scalar(uint8)
            if dtype != DTYPE_F32:
                logger.error("Unsupported dtype code {0} for tensor {1}".format(dtype, name))
                raise CheckpointError("Unsupported dtype code {0} for tensor {1}".format(dtype, name))
            numel = int(np.prod(shape, dtype=np.int64))
            tensors[name] = reader.values(float32, numel).astype(np.float32).reshape(shape)
        return tensors

    def encode(self, tensors, optimizer=None, config=None):
        """Serialise to bytes
        :param tensors: name -> array
        :type tensors: dict
        :param optimizer: name -> array (optimizer state)
        :type optimizer: dict
        :param config: JSON-serialisable snapshot
        :type config: dict
        :rtype: bytes
        """
        text = b'' if config is None else dump_config(config).encode('utf-8')
        return b''.join([MAGIC,
                         np.array(VERSION, uint32).tobytes(),
                         self._encode_section(tensors),
                         self._encode_section(optimizer or OrderedDict()),
                         np.array(len(text), uint32).tobytes(),
                         text])

    def decode(self, buffer):
        reader = _Reader(buffer, self.filename)
        magic = reader.take(4)
        if magic != MAGIC:
            logger.error("Bad magic {0!r} in {1}".format(magic, self.filename))
            raise CheckpointError("{0} is not an SGSF file (magic {1!r})".format(self.filename, magic))
        version = reader.scalar(uint32)
        if version != VERSION:
            logger.error("Unsupported version {0} in {1}".format(version, self.filename))
            raise CheckpointError("Unsupported format version {0} in {1} (expected {2})"
                                  .format(version, self.filename, VERSION))
        tensors = self._decode_section(reader)
        optimizer = self._decode_section(reader)
        length = reader.scalar(uint32)
        config = json.loads(reader.take(length).decode('utf-8')) if length else None
        if reader.offset != len(buffer):
            logger.warning("{0} trailing bytes ignored in {1}".format(len(buffer) - reader.offset, self.filename))
        return tensors, optimizer, config

    def save(self, tensors, optimizer=None, config=None):
        '''Write the named tensors atomically'''
        atomic_write(self.filename, self.encode(tensors, optimizer, config))
        logger.info("Saved {0} tensors to {1}".format(len(tensors), self.filename))

    def load(self):
        '''Read the file, returning (tensors, optimizer state, config)'''
        if not os.path.exists(self.filename):
            logger.error("File {0} does not exist".format(self.filename))
            raise FileNotFoundError('File {0} does not exist'.format(self.filename))
        with open(self.filename, 'rb') as f:
            buffer = f.read()
        tensors, optimizer, config = self.decode(buffer)
        logger.info("Loaded {0} tensors from {1}".format(len(tensors), self.filename))
        return tensors, optimizer, config
