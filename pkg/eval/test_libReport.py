#!/usr/bin/env python3

# Import our libs
import os
import sys
ROOT = os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))
sys.path.append(os.path.join(ROOT, 'eval', 'lib'))
sys.path.append(os.path.join(ROOT, 'eval'))
import libXV
import libStages
import libReport

import math
import tempfile

import numpy as np
import pandas as pd
import scipy.stats as stats
from PIL import Image

import unittest

SMOKE = os.path.join(ROOT, 'eval', 'configs', 'smoke.toml')

def _agg(rows):
  """Aggregate frame from (task, method, rma_mean, rma_sem, n) tuples"""
  out = []
  for task, method, mean, sem, n in rows:
    out.append({'task': task, 'method': method, 'n': n, 'n_degenerate': 0,
                'rma_mean': mean, 'rma_sd': sem * math.sqrt(n), 'rma_sem': sem,
                'tpr_hit_mean': 1.0, 'fpr_flag_mean': 0.0})
  return pd.DataFrame(out)

#####
# Tables
#####

class MinMaxTest(unittest.TestCase):
  def test_handComputed(self):
    m = pd.DataFrame([[0.2, 0.6], [0.5, 0.5]], index=['A', 'B'], columns=['t1', 't2'])
    scaled, flat = libReport.minMaxRows(m)
    np.testing.assert_allclose(scaled.values, [[0.0, 1.0], [0.0, 0.0]])
    self.assertEqual(list(flat), [False, True])

  def test_threeColumns(self):
    m = pd.DataFrame([[1.0, 3.0, 2.0], [-4.0, 0.0, -2.0]], columns=['a', 'b', 'c'])
    scaled, flat = libReport.minMaxRows(m)
    np.testing.assert_allclose(scaled.values, [[0.0, 1.0, 0.5], [0.0, 1.0, 0.5]])
    self.assertFalse(flat.any())

  def test_missingCellStaysMissing(self):
    m = pd.DataFrame([[1.0, np.nan, 3.0]], columns=['a', 'b', 'c'])
    scaled, _ = libReport.minMaxRows(m)
    self.assertEqual(scaled.iloc[0, 0], 0.0)
    self.assertTrue(np.isnan(scaled.iloc[0, 1]))
    self.assertEqual(scaled.iloc[0, 2], 1.0)

class GroupTest(unittest.TestCase):
  def setUp(self):
    self.agg = _agg([
      ('t1', 'A', 0.2, 0.01, 10), ('t2', 'A', 0.6, 0.01, 10), ('t3', 'A', 0.1, 0.01, 10),
      ('t1', 'B', 0.4, 0.01, 10), ('t2', 'B', 0.8, 0.01, 10), ('t3', 'B', 0.3, 0.01, 10),
    ])

  def test_singleTaskGroup(self):
    g = libReport.groupMeans(self.agg, {'one': ['t2']})
    self.assertEqual(list(g['method']), ['A', 'B'])
    self.assertEqual(list(g['rma_mean']), [0.6, 0.8])
    self.assertEqual(list(g['n_tasks']), [1, 1])

  def test_twoTaskGroup(self):
    g = libReport.groupMeans(self.agg, {'pair': ['t1', 't2'], 'one': ['t3']})
    self.assertEqual(list(g['group']), ['one', 'one', 'pair', 'pair'])
    np.testing.assert_allclose(g['rma_mean'], [0.1, 0.3, 0.4, 0.6])

  def test_missingTask(self):
    with self.assertRaises(libXV.ConfigError):
      libReport.groupMeans(self.agg, {'bad': ['t1', 't9']})
    with self.assertRaises(libXV.ConfigError):
      libReport.groupMeans(self.agg, {'empty': []})

  def test_runGroups(self):
    picked = libReport.runGroups(self.agg, {'here': ['t1'], 'elsewhere': ['lesion_load']})
    self.assertEqual(picked, {'here': ['t1']})

class MethodComparisonTest(unittest.TestCase):
  def test_quadrature(self):
    agg = _agg([('t1', 'A', 0.2, 0.3, 5), ('t2', 'A', 0.4, 0.4, 7), ('t1', 'B', 0.5, 0.1, 5)])
    comp = libReport.methodComparison(agg)
    a = comp[comp['method'] == 'A'].iloc[0]
    self.assertAlmostEqual(a['rma_mean'], 0.3)
    self.assertAlmostEqual(a['rma_sem'], 0.25)
    self.assertEqual(a['n'], 12)
    self.assertEqual(a['n_tasks'], 2)

  def test_welch(self):
    comp = pd.DataFrame([
      {'method': 'A', 'n_tasks': 2, 'n': 20, 'rma_mean': 0.5, 'rma_sem': 0.05},
      {'method': 'B', 'n_tasks': 2, 'n': 30, 'rma_mean': 0.3, 'rma_sem': 0.04},
      {'method': 'C', 'n_tasks': 2, 'n': 25, 'rma_mean': 0.3, 'rma_sem': 0.02},
    ])
    tests = libReport.welchTests(comp)
    self.assertEqual(list(zip(tests['method_a'], tests['method_b'])), [('A', 'B'), ('A', 'C'), ('B', 'C')])
    row = tests.iloc[0]
    va, vb = 0.05 ** 2, 0.04 ** 2
    t = 0.2 / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / 19 + vb ** 2 / 29)
    self.assertAlmostEqual(row['mean_diff'], 0.2)
    self.assertAlmostEqual(row['t'], t, places=10)
    self.assertAlmostEqual(row['p'], 2 * stats.t.sf(abs(t), df), places=10)
    self.assertAlmostEqual(tests.iloc[2]['t'], 0.0)
    self.assertAlmostEqual(tests.iloc[2]['p'], 1.0)

class ThresholdTest(unittest.TestCase):
  def test_bestCutoff(self):
    rows = []
    for sid, vals in (('s1', [0.2, 0.5, 0.5]), ('s2', [0.4, 0.7, 0.7])):
      for cutoff, v in zip([0.0, 90.0, 99.0], vals):
        rows.append({'task': 't', 'method': 'A', 'seed': 0, 'subject_id': sid, 'cutoff': cutoff, 'rma': v, 'degenerate_flag': False})
    rows.append({'task': 't', 'method': 'A', 'seed': 0, 'subject_id': 's3', 'cutoff': 0.0, 'rma': 1.0, 'degenerate_flag': True})
    out = libReport.thresholdSensitivity(pd.DataFrame(rows), 99.0)
    self.assertEqual(len(out), 1)
    row = out.iloc[0]
    # 90 and 99 tie: the smaller cutoff wins
    self.assertEqual(row['best_cutoff'], 90.0)
    self.assertAlmostEqual(row['best_rma'], 0.6)
    self.assertAlmostEqual(row['default_rma'], 0.6)

class MetricTableTest(unittest.TestCase):
  def test_pivot(self):
    agg = _agg([('t2', 'B', 0.4, 0.1, 3), ('t1', 'B', 0.3, 0.1, 3), ('t1', 'A', 0.1, 0.1, 3), ('t2', 'A', 0.2, 0.1, 3)])
    m = libReport.metricTable(agg)
    self.assertEqual(list(m.index), ['A', 'B'])
    self.assertEqual(list(m.columns), ['t1', 't2'])
    np.testing.assert_allclose(m.values, [[0.1, 0.2], [0.3, 0.4]])
    with self.assertRaises(libXV.ConfigError):
      libReport.metricTable(agg, 'overlap_mean')

#####
# Renders
#####

class RenderTest(unittest.TestCase):
  def test_outlineOverlay(self):
    vol = libXV.Volume(np.zeros((10, 8, 1)))
    m = np.zeros((10, 8, 1), dtype=bool)
    m[3:7, 2:6, 0] = True
    with tempfile.TemporaryDirectory() as tmp:
      png, pgm = libReport.renderSlice(vol, libXV.RegionMask(m), os.path.join(tmp, 'r', 'slice'))
      self.assertGreater(os.path.getsize(png), 0)
      with open(pgm, 'rb') as inStream:
        self.assertTrue(inStream.read(2) == b'P5')
      img = np.array(Image.open(pgm))
      self.assertEqual(img.shape, (8, 10))
      # rows run top-down, y runs bottom-up
      self.assertEqual(img[7 - 2, 3], 255)
      self.assertEqual(img[7 - 5, 6], 255)
      self.assertEqual(img[7 - 3, 4], 0)
      self.assertEqual(img[0, 0], 0)
      self.assertEqual(int((img == 255).sum()), 12)

  def test_withoutMask(self):
    vol = libXV.Volume(np.arange(4 * 5 * 3, dtype=np.float64).reshape(4, 5, 3))
    with tempfile.TemporaryDirectory() as tmp:
      png, pgm = libReport.renderSlice(vol, None, os.path.join(tmp, 'plain'), title='plain')
      self.assertGreater(os.path.getsize(png), 0)
      img = np.array(Image.open(pgm))
      self.assertEqual(img.shape, (5, 4))
      self.assertEqual(int(img.max()), 255)
      # brightest voxel is (x=3, y=4): top row
      self.assertEqual(img[0, 3], 255)
      self.assertEqual(img[4, 0], 0)

  def test_emptyMaskKeepsPixels(self):
    vol = libXV.Volume(np.random.default_rng(3).standard_normal((6, 7, 2)))
    empty = libXV.RegionMask(np.zeros((6, 7, 2), dtype=bool))
    with tempfile.TemporaryDirectory() as tmp:
      _, plain = libReport.renderSlice(vol, None, os.path.join(tmp, 'plain'), z=1)
      _, masked = libReport.renderSlice(vol, empty, os.path.join(tmp, 'masked'), z=1)
      a = np.array(Image.open(plain))
      b = np.array(Image.open(masked))
    self.assertEqual(a.shape, (7, 6))
    np.testing.assert_array_equal(a, b)

  def test_sliceChoice(self):
    m = np.zeros((4, 4, 5), dtype=bool)
    m[1:3, 1:3, 3] = True
    m[1, 1, 1] = True
    self.assertEqual(libReport.bestSlice(libXV.RegionMask(m)), 3)

  def test_errors(self):
    vol = libXV.Volume(np.zeros((4, 4, 2)))
    with tempfile.TemporaryDirectory() as tmp:
      with self.assertRaises(libXV.DimensionError):
        libReport.renderSlice(vol, libXV.RegionMask(np.zeros((4, 4, 3), dtype=bool)), os.path.join(tmp, 'x'))
      with self.assertRaises(libXV.DimensionError):
        libReport.renderSlice(vol, None, os.path.join(tmp, 'x'), z=2)

#####
# Report over stored scores
#####

class ReportTest(unittest.TestCase):
  def test_tablesFromScores(self):
    cfg = libStages.readExperimentConfig(SMOKE)
    agg = _agg([
      ('localized_caudate_left', 'Gradient', 0.3, 0.05, 8),
      ('localized_caudate_left', 'SmoothGrad', 0.5, 0.04, 8),
      ('localized_caudate_right', 'Gradient', 0.5, 0.05, 8),
      ('localized_caudate_right', 'SmoothGrad', 0.5, 0.04, 8),
    ])
    sweep = pd.DataFrame([
      {'task': 'localized_caudate_left', 'method': 'Gradient', 'seed': 0, 'subject_id': 's1', 'cutoff': c, 'rma': r, 'degenerate_flag': False}
      for c, r in ((0.0, 0.1), (99.0, 0.3))])
    with tempfile.TemporaryDirectory() as tmp:
      rd = libStages.RunDir(tmp, cfg.runId).make()
      agg.to_csv(rd.scorePath('aggregate.csv'), index=False)
      sweep.to_csv(rd.scorePath('threshold_sweep.csv'), index=False)
      tables = libReport.report(cfg, rd, render=False)

      for name in ('rma_matrix', 'rma_matrix_scaled', 'rma_sd', 'tpr', 'fpr', 'group_means', 'method_summary', 'method_ttests', 'threshold_sensitivity'):
        self.assertTrue(os.path.exists(os.path.join(rd.report, name + '.csv')), name)
      self.assertTrue(os.path.exists(os.path.join(rd.report, 'rma_matrix_scaled.png')))

      scaled = pd.read_csv(os.path.join(rd.report, 'rma_matrix_scaled.csv'), index_col='method')
      self.assertEqual(list(scaled['constant_row']), [False, True])
      self.assertEqual(list(scaled['localized_caudate_left']), [0.0, 0.0])
      self.assertEqual(list(scaled['localized_caudate_right']), [1.0, 0.0])
      self.assertEqual(list(tables['group_means']['rma_mean']), [0.3, 0.5])
      self.assertEqual(tables['threshold_sensitivity'].iloc[0]['best_cutoff'], 99.0)

  def test_needsScores(self):
    cfg = libStages.readExperimentConfig(SMOKE)
    with tempfile.TemporaryDirectory() as tmp:
      with self.assertRaises(libXV.ConfigError):
        libReport.report(cfg, libStages.RunDir(tmp, cfg.runId).make(), render=False)

if __name__ == '__main__':
  unittest.main()
