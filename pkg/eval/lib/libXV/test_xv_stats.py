#!/usr/bin/env python3

# Import our lib
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', '..', '..')), 'eval', 'lib'))
import libXV

import itertools

import numpy as np

import unittest

def _volumes(Y, dims):
  return [libXV.Volume(row.reshape(dims)) for row in Y]

def _olsT(x, confounds, y):
  """t of x's coefficient from a direct least-squares fit"""
  X = np.column_stack([np.ones(len(x)), x] + ([confounds] if confounds is not None else []))
  beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
  resid = y - X @ beta
  dof = len(y) - X.shape[1]
  cov = (resid @ resid / dof) * np.linalg.inv(X.T @ X)
  return beta[1] / np.sqrt(cov[1, 1])

class DesignTest(unittest.TestCase):
  def test_tooFewSubjects(self):
    with self.assertRaises(libXV.DegenerateError):
      libXV.Design().initFromRaw([1, 2], None)

  def test_confoundRows(self):
    with self.assertRaises(libXV.DimensionError):
      libXV.Design().initFromRaw([1, 2, 3, 4], np.zeros((3, 1)))

  def test_nonFinite(self):
    with self.assertRaises(libXV.ConfigError):
      libXV.Design().initFromRaw([1, 2, np.nan, 4])

class PermutedOLSTest(unittest.TestCase):
  def test_pearsonT(self):
    rng = np.random.default_rng(0)
    n, dims = 12, (2, 3, 1)
    x = rng.standard_normal(n)
    Y = rng.standard_normal((n, 6)) + 0.5 * x[:, None]
    stat = libXV.permutedOLS(libXV.Design().initFromRaw(x), _volumes(Y, dims), 10, 0)
    for v in range(6):
      r = np.corrcoef(x, Y[:, v])[0, 1]
      t = r * np.sqrt(n - 2) / np.sqrt(1 - r * r)
      self.assertLess(abs(stat.tValues.data.ravel()[v] - t), 1e-10)

  def test_confoundT(self):
    rng = np.random.default_rng(1)
    n = 15
    x = rng.standard_normal(n)
    c = rng.standard_normal((n, 2))
    Y = rng.standard_normal((n, 4)) + x[:, None] + c[:, :1]
    stat = libXV.permutedOLS(libXV.Design().initFromRaw(x, c), _volumes(Y, (4, 1, 1)), 5, 0)
    for v in range(4):
      self.assertAlmostEqual(stat.tValues.data.ravel()[v], _olsT(x, c, Y[:, v]), places=9)

  def test_exhaustiveOracle(self):
    rng = np.random.default_rng(2)
    n = 5
    x = np.array([0.1, 1.3, -0.7, 2.2, 0.4])
    Y = rng.standard_normal((n, 3)) + x[:, None]
    perms = np.array(list(itertools.permutations(range(n)))[:24])
    stat = libXV.permutedOLS(libXV.Design().initFromRaw(x), _volumes(Y, (3, 1, 1)), 24, 0, permutations=perms)

    tObs = np.array([_olsT(x, None, Y[:, v]) for v in range(3)])
    maxNull = np.array([max(abs(_olsT(x[p], None, Y[:, v])) for v in range(3)) for p in perms])
    for v in range(3):
      expected = (1 + np.sum(maxNull >= abs(tObs[v]) * (1 - 1e-10))) / 25.0
      self.assertAlmostEqual(stat.fweP.data.ravel()[v], expected, places=12)

  def test_identityPermutationsGivePOne(self):
    x = np.arange(6, dtype=np.float64)
    Y = np.column_stack([x + np.array([0.1, -0.1, 0.05, 0.0, -0.05, 0.1]), np.ones(6)])
    perms = np.tile(np.arange(6), (4, 1))
    stat = libXV.permutedOLS(libXV.Design().initFromRaw(x), _volumes(Y, (2, 1, 1)), 4, 0, permutations=perms)
    # every null max equals the observed |t|
    self.assertAlmostEqual(stat.fweP.data.ravel()[0], 1.0)
    # zero-variance voxel
    self.assertEqual(stat.tValues.data.ravel()[1], 0.0)

  def test_deterministic(self):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10)
    vols = _volumes(rng.standard_normal((10, 8)), (2, 2, 2))
    a = libXV.permutedOLS(libXV.Design().initFromRaw(x), vols, 30, 7)
    b = libXV.permutedOLS(libXV.Design().initFromRaw(x), vols, 30, 7)
    np.testing.assert_array_equal(a.fweP.data, b.fweP.data)

  def test_constantContrastAfterConfounds(self):
    x = np.arange(6, dtype=np.float64)
    with self.assertRaises(libXV.DegenerateError):
      libXV.permutedOLS(libXV.Design().initFromRaw(x, 2 * x), _volumes(np.ones((6, 2)), (2, 1, 1)), 3, 0)

  def test_strongSignalIsSignificant(self):
    rng = np.random.default_rng(4)
    n = 40
    x = rng.standard_normal(n)
    Y = 0.1 * rng.standard_normal((n, 10))
    Y[:, 3] += x
    stat = libXV.permutedOLS(libXV.Design().initFromRaw(x), _volumes(Y, (10, 1, 1)), 99, 0)
    sig = stat.significant(0.05).ravel()
    self.assertTrue(sig[3])
    self.assertEqual(stat.summary(0.05)['n_perm'], 99)
    self.assertAlmostEqual(stat.fweP.data.ravel()[3], 0.01)

class EffectSizeTest(unittest.TestCase):
  def test_cohensD(self):
    a = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    b = np.array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]])
    sig = libXV.StatMap(None, libXV.Volume(np.zeros((2, 1, 1))), 1, 0)
    d = libXV.effectSizeMap(_volumes(a, (2, 1, 1)), _volumes(b, (2, 1, 1)), sig, 0.05)
    # pooled sd 1, mean difference 1
    self.assertAlmostEqual(d.data.ravel()[0], 1.0)
    self.assertEqual(d.data.ravel()[1], 0.0)

  def test_insignificantZeroed(self):
    a = np.array([[1.0], [2.0], [3.0]])
    b = np.array([[0.0], [1.0], [2.0]])
    sig = libXV.StatMap(None, libXV.Volume(np.ones((1, 1, 1))), 1, 0)
    d = libXV.effectSizeMap(_volumes(a, (1, 1, 1)), _volumes(b, (1, 1, 1)), sig, 0.05)
    self.assertEqual(d.data.ravel()[0], 0.0)

  def test_groupTooSmall(self):
    sig = libXV.StatMap(None, libXV.Volume(np.zeros((1, 1, 1))), 1, 0)
    with self.assertRaises(libXV.DegenerateError):
      libXV.effectSizeMap(_volumes(np.ones((1, 1)), (1, 1, 1)), _volumes(np.ones((3, 1)), (1, 1, 1)), sig, 0.05)

#####
# Main
#####

if __name__ == '__main__':
  unittest.main()
