#!/usr/bin/env python3

# Import our lib
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', '..', '..')), 'eval', 'lib'))
import libXV

import math

import numpy as np

import unittest

def _atlas():
  labels = np.zeros((6, 4, 1), dtype=np.int32)
  labels[0:2, 0:2] = 1
  labels[4:6, 0:2] = 2
  labels[2:4, 2:4] = 3
  regions = [
    libXV.Region().initFromRaw(1, 'caudate_left', 'left', 1),
    libXV.Region().initFromRaw(2, 'caudate_right', 'right', 1),
    libXV.Region().initFromRaw(3, 'brainstem', 'none', 2),
  ]
  return libXV.Atlas(labels, regions, (1.0, 1.0, 1.0))

#####
# Types
#####

class VolumeTest(unittest.TestCase):
  def test_2dGetsUnitDepth(self):
    v = libXV.Volume(np.ones((3, 4)))
    self.assertEqual(v.dims, (3, 4, 1))
    self.assertEqual(v.nVoxels, 12)

  def test_rejectsNonFinite(self):
    data = np.zeros((2, 2, 2))
    data[0, 0, 0] = np.nan
    with self.assertRaises(ValueError):
      libXV.Volume(data)

  def test_rejectsBadSpacing(self):
    with self.assertRaises(libXV.DimensionError):
      libXV.Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

  def test_maskOps(self):
    a = libXV.RegionMask(np.array([[1, 0], [0, 0]]))
    b = libXV.RegionMask(np.array([[0, 0], [0, 1]]))
    self.assertEqual(a.union(b).nSet, 2)
    self.assertEqual(a.invert().nSet, 3)

class AtlasTest(unittest.TestCase):
  def test_regionMask(self):
    atlas = _atlas()
    self.assertEqual(atlas.regionIds(), [1, 2, 3])
    self.assertEqual(atlas.regionMask(1).nSet, 4)
    self.assertEqual(atlas.unionMask([1, 3]).nSet, 8)
    with self.assertRaises(libXV.ConfigError):
      atlas.regionMask(9)

  def test_mergedKey(self):
    atlas = _atlas()
    self.assertEqual(atlas.mergedKey(1), 1)
    self.assertEqual(atlas.mergedKey(2), 1)
    self.assertEqual(atlas.mergedKey(3), 3)
    self.assertEqual(atlas.mergedName(2), 'caudate')
    self.assertEqual(atlas.mergedName(3), 'brainstem')

  def test_unknownLabel(self):
    labels = np.zeros((2, 2, 1), dtype=np.int32)
    labels[0, 0] = 7
    with self.assertRaises(libXV.ConfigError):
      libXV.Atlas(labels, [libXV.Region().initFromRaw(1, 'a', 'none', 1)])

  def test_duplicateRegion(self):
    r = libXV.Region().initFromRaw(1, 'a', 'none', 1)
    with self.assertRaises(libXV.ConfigError):
      libXV.Atlas(np.zeros((2, 2, 1)), [r, r])

#####
# Operations
#####

class SmoothTest(unittest.TestCase):
  def test_zeroFwhmIsIdentity(self):
    v = libXV.Volume(np.random.default_rng(0).standard_normal((5, 5, 5)))
    np.testing.assert_array_equal(libXV.gaussianSmooth(v, 0).data, v.data)

  def test_massPreserved(self):
    data = np.zeros((9, 9, 9))
    data[0, 0, 0] = 1.0
    data[4, 4, 4] = 2.0
    out = libXV.gaussianSmooth(libXV.Volume(data, (2.0, 2.0, 2.0)), 6.0)
    self.assertAlmostEqual(out.data.sum(), 3.0, places=10)
    self.assertTrue(np.all(out.data >= 0))

  def test_constantInteriorStaysConstant(self):
    v = libXV.Volume(np.ones((31, 31, 1)))
    out = libXV.gaussianSmooth(v, 2.0)
    self.assertAlmostEqual(out.data[15, 15, 0], 1.0, places=10)

  def test_symmetricKernel(self):
    data = np.zeros((11, 11, 11))
    data[5, 5, 5] = 1.0
    out = libXV.gaussianSmooth(libXV.Volume(data), 3.0).data
    self.assertAlmostEqual(out[4, 5, 5], out[6, 5, 5], places=14)
    self.assertAlmostEqual(out[5, 4, 5], out[5, 5, 6], places=14)
    self.assertEqual(np.unravel_index(np.argmax(out), out.shape), (5, 5, 5))

  def test_fwhmMatchesSigma(self):
    k = libXV.gaussianKernel1D(2.0)
    c = len(k) // 2
    # exp(-x^2 / 2 sigma^2) at x = sigma
    self.assertAlmostEqual(k[c + 2] / k[c], math.exp(-0.5), places=12)
    self.assertAlmostEqual(k.sum(), 1.0, places=12)

  def test_negativeFwhm(self):
    with self.assertRaises(libXV.ConfigError):
      libXV.gaussianSmooth(libXV.Volume(np.zeros((2, 2, 2))), -1)

class PercentileTest(unittest.TestCase):
  def test_sortOracle(self):
    rng = np.random.default_rng(1)
    for n in (1, 7, 100, 333):
      vals = rng.standard_normal(n)
      s = np.sort(vals)
      for p in (0, 1, 50, 80, 95, 99, 100):
        rank = max(1, math.ceil(round(p * n / 100.0, 9)))
        self.assertEqual(libXV.percentile(vals, p), s[rank - 1])

  def test_oneToHundred(self):
    vals = np.arange(1, 101, dtype=np.float64)
    self.assertEqual(libXV.percentile(vals, 99), 99.0)
    self.assertEqual(libXV.percentile(vals, 0), 1.0)
    self.assertEqual(libXV.percentile(vals, 100), 100.0)

  def test_mask(self):
    v = libXV.Volume(np.arange(8, dtype=np.float64).reshape(2, 2, 2))
    m = libXV.RegionMask(v.data < 4)
    self.assertEqual(libXV.percentile(v, 100, m), 3.0)

  def test_emptyDomain(self):
    v = libXV.Volume(np.ones((2, 2, 2)))
    with self.assertRaises(libXV.DegenerateError):
      libXV.percentile(v, 50, libXV.RegionMask.empty((2, 2, 2)))

  def test_outOfRange(self):
    with self.assertRaises(libXV.ConfigError):
      libXV.percentile([1, 2], 101)

class DilateTest(unittest.TestCase):
  def test_offsetOracle(self):
    spacing = (2.0, 1.0, 1.5)
    m = np.zeros((9, 11, 9), dtype=bool)
    m[4, 5, 4] = True
    m[1, 2, 7] = True
    mask = libXV.RegionMask(m, spacing)
    for radius in (0.0, 1.0, 2.0, 3.5):
      oracle = np.zeros_like(m)
      for (i, j, k) in zip(*np.nonzero(m)):
        for (a, b, c) in libXV.ballOffsets(radius, spacing):
          x, y, z = i + a, j + b, k + c
          if 0 <= x < m.shape[0] and 0 <= y < m.shape[1] and 0 <= z < m.shape[2]:
            oracle[x, y, z] = True
      np.testing.assert_array_equal(libXV.dilate(mask, radius).membership, oracle)

  def test_emptyMask(self):
    m = libXV.RegionMask.empty((3, 3, 3))
    self.assertEqual(libXV.dilate(m, 5.0).nSet, 0)

  def test_negativeRadius(self):
    with self.assertRaises(libXV.ConfigError):
      libXV.dilate(libXV.RegionMask.empty((3, 3, 3)), -1.0)

class MaskZeroTest(unittest.TestCase):
  def test_maskZero(self):
    v = libXV.Volume(np.ones((2, 2, 2)))
    m = libXV.RegionMask(np.eye(2, dtype=bool)[:, :, None].repeat(2, axis=2))
    out = libXV.maskZero(v, m)
    self.assertEqual(out.data.sum(), 4.0)
    self.assertEqual(v.data.sum(), 8.0)

  def test_dimsMismatch(self):
    with self.assertRaises(libXV.DimensionError):
      libXV.maskZero(libXV.Volume(np.ones((2, 2, 2))), libXV.RegionMask.empty((3, 2, 2)))

class UpsampleTest(unittest.TestCase):
  def test_alignCorners(self):
    v = libXV.Volume(np.array([[0.0, 1.0], [2.0, 3.0]]))
    out = libXV.upsample(v, (3, 3, 1)).data[:, :, 0]
    expected = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    np.testing.assert_allclose(out, expected, atol=1e-12)

  def test_singleVoxelBroadcasts(self):
    v = libXV.Volume(np.full((1, 1, 1), 4.0))
    out = libXV.upsample(v, (3, 2, 2))
    np.testing.assert_array_equal(out.data, np.full((3, 2, 2), 4.0))

  def test_linearFieldExact(self):
    x = np.arange(4, dtype=np.float64)
    data = x[:, None, None] + 2 * x[None, :, None] + 3 * x[None, None, :]
    out = libXV.upsample(libXV.Volume(data), (7, 7, 7)).data
    t = np.arange(7) * 3 / 6
    expected = t[:, None, None] + 2 * t[None, :, None] + 3 * t[None, None, :]
    np.testing.assert_allclose(out, expected, atol=1e-10)

  def test_smallerTarget(self):
    with self.assertRaises(libXV.DimensionError):
      libXV.upsample(libXV.Volume(np.zeros((4, 4, 4))), (2, 4, 4))

#####
# Main
#####

if __name__ == '__main__':
  unittest.main()
