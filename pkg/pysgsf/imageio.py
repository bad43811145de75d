import io
import os
import json
import numpy as np
from PIL import Image

from .checkpoint import atomic_write
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""PNG images and run-length-encoded mask files"""

logger = sgsflogger(__name__, logfile)


def read_png(filename):
    """Read an 8-bit image as float32 RGB in [0, 1]
    :param filename: name of the image file
    :type filename: str
    :return: array of shape [3, H, W]
    :rtype: numpy.ndarray
    """
    if not os.path.exists(filename):
        logger.error("File {0} does not exist".format(filename))
        raise FileNotFoundError('File {0} does not exist'.format(filename))
    with Image.open(filename) as im:
        rgb = np.asarray(im.convert('RGB'), dtype=np.float32)
    logger.info("Read image {0} of size {1}x{2}".format(filename, rgb.shape[0], rgb.shape[1]))
    return np.ascontiguousarray(np.transpose(rgb / 255.0, (2, 0, 1)), dtype=np.float32)


def write_png(filename, img):
    """Write a [3, H, W] image in [0, 1] as 8-bit RGB PNG
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        logger.error("write_png expects [3, H, W], got {0}".format(img.shape))
        raise ValueError("write_png expects an image of shape [3, H, W], got {0}".format(img.shape))
    quantised = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(np.transpose(quantised, (1, 2, 0)), mode='RGB').save(buffer, format='PNG')
    atomic_write(filename, buffer.getvalue())
    logger.info("Wrote image {0}".format(filename))


def encode_rle(mask):
    """Run lengths of a binary mask in row-major order, starting with the count of 0s
    :rtype: list
    """
    pixels = np.asarray(mask).reshape(-1).astype(bool).astype(np.int8)
    pixels = np.concatenate([[0], pixels, [1 - pixels[-1] if pixels.size else 1]])
    changes = np.flatnonzero(pixels[1:] != pixels[:-1]) + 1
    return np.diff(np.concatenate([[1], changes])).tolist()


def decode_rle(runs, height, width):
    """Binary mask of shape [H, W] from alternating 0/1 run lengths"""
    runs = np.asarray(runs, dtype=np.int64)
    if np.any(runs < 0) or runs.sum() != height * width:
        logger.error("RLE runs sum to {0}, expected {1}".format(runs.sum(), height * width))
        raise ValueError("Invalid RLE: runs sum to {0}, expected H*W = {1}".format(runs.sum(), height * width))
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(height, width)


def write_masks(filename, masks):
    """Write masks.json: a list of {height, width, rle}"""
    records = []
    for mask in masks:
        mask = np.asarray(mask)
        records.append({'height': int(mask.shape[0]), 'width': int(mask.shape[1]), 'rle': encode_rle(mask)})
    atomic_write(filename, json.dumps(records))
    logger.info("Wrote {0} masks to {1}".format(len(records), filename))


def read_masks(filename):
    """Read masks.json into a list of uint8 arrays"""
    if not os.path.exists(filename):
        logger.error("File {0} does not exist".format(filename))
        raise FileNotFoundError('File {0} does not exist'.format(filename))
    with open(filename, 'r') as f:
        records = json.load(f)
    masks = [decode_rle(r['rle'], int(r['height']), int(r['width'])) for r in records]
    logger.info("Read {0} masks from {1}".format(len(masks), filename))
    return masks
