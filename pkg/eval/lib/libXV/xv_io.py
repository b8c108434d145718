"""XAI validation: on-disk formats

VLAB container: header (magic "VLAB", version u32, dims 3 x u32,
spacing 3 x f64, dtype tag u8) followed by a little-endian payload in
row-major order.
"""

import os
import struct

import numpy as np
from PIL import Image

from libXV.xv_utils import XVError, DimensionError
from libXV.xv_ndjson import writeJSON, readJSON
from libXV.xv_volume import Volume, RegionMask, Atlas, Region

VLAB_MAGIC = b'VLAB'
VLAB_VERSION = 1
_HEADER = struct.Struct('<4sI3I3dB')

class DTYPE_TAG:
  F64 = 0
  U8 = 1
  I32 = 2

  tag2dtype = {
    F64: np.dtype('<f8'),
    U8: np.dtype('u1'),
    I32: np.dtype('<i4'),
  }

#####
# VLAB
#####

def _writeVLAB(path, arr, spacingMm, tag):
  dims = arr.shape
  with open(path, 'wb') as out:
    out.write(_HEADER.pack(VLAB_MAGIC, VLAB_VERSION, *dims, *spacingMm, tag))
    out.write(np.ascontiguousarray(arr, dtype=DTYPE_TAG.tag2dtype[tag]).tobytes())

def _readVLAB(path):
  """Returns arr, spacingMm, tag"""
  with open(path, 'rb') as inStream:
    header = inStream.read(_HEADER.size)
    if len(header) != _HEADER.size:
      raise XVError('Truncated VLAB header in {}'.format(path))
    magic, version, nx, ny, nz, sx, sy, sz, tag = _HEADER.unpack(header)
    if magic != VLAB_MAGIC:
      raise XVError('Not a VLAB file: {}'.format(path))
    if version != VLAB_VERSION:
      raise XVError('Unsupported VLAB version {} in {}'.format(version, path))
    if tag not in DTYPE_TAG.tag2dtype:
      raise XVError('Unknown dtype tag {} in {}'.format(tag, path))
    dtype = DTYPE_TAG.tag2dtype[tag]
    payload = inStream.read()
  n = nx * ny * nz
  if len(payload) != n * dtype.itemsize:
    raise XVError('Payload size mismatch in {}: {} bytes for {} voxels'.format(path, len(payload), n))
  arr = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz))
  return arr, (sx, sy, sz), tag

def writeVolume(path, v):
  _writeVLAB(path, v.data, v.spacingMm, DTYPE_TAG.F64)

def readVolume(path):
  arr, spacing, tag = _readVLAB(path)
  if tag != DTYPE_TAG.F64:
    raise XVError('{} does not hold a Volume (tag {})'.format(path, tag))
  return Volume(arr.astype(np.float64), spacing)

def writeMask(path, m):
  _writeVLAB(path, m.membership.astype(np.uint8), m.spacingMm, DTYPE_TAG.U8)

def readMask(path):
  arr, spacing, tag = _readVLAB(path)
  if tag != DTYPE_TAG.U8:
    raise XVError('{} does not hold a RegionMask (tag {})'.format(path, tag))
  return RegionMask(arr != 0, spacing)

def writeAtlas(path, atlas):
  """Labels go to path (.vlab); the region table to the .json sibling"""
  _writeVLAB(path, atlas.labels, atlas.spacingMm, DTYPE_TAG.I32)
  writeJSON(_atlasTablePath(path), {'regions': atlas.regionTable()})

def readAtlas(path):
  arr, spacing, tag = _readVLAB(path)
  if tag != DTYPE_TAG.I32:
    raise XVError('{} does not hold atlas labels (tag {})'.format(path, tag))
  table = readJSON(_atlasTablePath(path))
  regions = [Region().initFromDict(obj) for obj in table['regions']]
  return Atlas(arr.astype(np.int32), regions, spacing)

def _atlasTablePath(path):
  root, _ = os.path.splitext(path)
  return root + '.json'

#####
# PGM slices (8-bit binary P5)
#####

def writeSlicePGM(path, v, z=None, lo=None, hi=None, marks=None):
  """Write axial slice z (default: middle) as an 8-bit binary PGM, grey scaled to [lo, hi].

  The image's top row is the largest y, as in a plot with origin='lower'.
  marks: (X, Y) boolean pixels drawn white
  """
  if z is None:
    z = v.dims[2] // 2
  sl = v.data[:, :, z].T # rows = y, columns = x
  lo = float(sl.min()) if lo is None else lo
  hi = float(sl.max()) if hi is None else hi
  scale = 255.0 / (hi - lo) if hi > lo else 0.0
  img = np.clip((sl - lo) * scale, 0, 255).astype(np.uint8)
  if marks is not None:
    if marks.shape != v.data.shape[:2]:
      raise DimensionError('marks of shape {} on a {} slice'.format(marks.shape, v.data.shape[:2]))
    img[marks.T] = 255
  Image.fromarray(np.ascontiguousarray(img[::-1])).save(path, format='PPM')
  return path
