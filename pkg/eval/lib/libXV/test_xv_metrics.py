#!/usr/bin/env python3

# Import our lib
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', '..', '..')), 'eval', 'lib'))
import libXV

import math
import tempfile

import numpy as np
import pandas as pd

import unittest

def _line(values):
  return libXV.Volume(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1))

def _lineMask(n, idx):
  m = np.zeros((n, 1, 1), dtype=bool)
  m[idx] = True
  return libXV.RegionMask(m)

def _caudateAtlas():
  labels = np.zeros((6, 4, 1), dtype=np.int32)
  labels[0:2, 0:2] = 1
  labels[4:6, 0:2] = 2
  labels[2:4, 2:4] = 3
  regions = [
    libXV.Region().initFromRaw(1, 'caudate_left', 'left', 1),
    libXV.Region().initFromRaw(2, 'caudate_right', 'right', 1),
    libXV.Region().initFromRaw(3, 'brainstem', 'none', 2),
  ]
  return libXV.Atlas(labels, regions)

def _noSmoothing(**kw):
  obj = {'fwhmMm': 0.0}
  obj.update(kw)
  return libXV.PostprocessConfig().initFromDict(obj)

#####
# Configs
#####

class ConfigTest(unittest.TestCase):
  def test_defaults(self):
    p = libXV.PostprocessConfig()
    self.assertEqual((p.rectify, p.fwhmMm, p.scalePercentile, p.cutoffPercentile), ('abs', 4.0, 99.0, 99.0))
    m = libXV.MetricsConfig()
    self.assertEqual((m.rmaDilationMm, m.fprDilationMm, m.topK), (2.0, 20.0, 3))

  def test_errors(self):
    for obj in ({'rectify': 'square'}, {'fwhmMm': -1}, {'scalePercentile': 101}, {'cutoffSweep': [50, 120]}, {'smooth': 1}):
      with self.assertRaises(libXV.ConfigError, msg=str(obj)):
        libXV.PostprocessConfig().initFromDict(obj)
    for obj in ({'topK': 0}, {'rmaDilationMm': -2}, {'fprDilation': 3}):
      with self.assertRaises(libXV.ConfigError, msg=str(obj)):
        libXV.MetricsConfig().initFromDict(obj)

#####
# Post-processing
#####

class PostprocessTest(unittest.TestCase):
  def test_rectify(self):
    v = _line([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(libXV.rectify(v, 'abs').flat(), [2, 0, 3])
    np.testing.assert_array_equal(libXV.rectify(v, 'positive_part').flat(), [0, 0, 3])

  def test_cutoff(self):
    v = _line(np.arange(1, 101) / 50.0)
    out = libXV.applyCutoff(v, 99)
    np.testing.assert_array_equal(out.flat()[:98], np.zeros(98))
    np.testing.assert_array_equal(out.flat()[98:], [1.0, 1.0])
    self.assertEqual(float(libXV.applyCutoff(v, 0).flat().min()), 0.02)

  def test_oneToHundred(self):
    p = libXV.postprocess(_line(np.arange(1, 101)), _noSmoothing())
    self.assertFalse(p.unscaled)
    self.assertAlmostEqual(p.scaled.flat()[98], 1.0)
    self.assertAlmostEqual(p.scaled.flat().max(), 100 / 99.0)
    np.testing.assert_array_equal(p.volume.flat()[98:], [1.0, 1.0])
    self.assertEqual(p.volume.flat()[:98].sum(), 0.0)

  def test_allZero(self):
    p = libXV.postprocess(libXV.Volume.zeros((5, 5, 5)), libXV.PostprocessConfig())
    self.assertTrue(p.unscaled)
    self.assertEqual(p.volume.data.sum(), 0.0)

  def test_scaleInvariant(self):
    rng = np.random.default_rng(0)
    v = libXV.Volume(rng.standard_normal((8, 8, 8)), (2.0, 2.0, 2.0))
    cfg = libXV.PostprocessConfig().initFromDict({'cutoffPercentile': 80})
    a = libXV.postprocess(v, cfg)
    b = libXV.postprocess(libXV.Volume(v.data * 37.0, v.spacingMm), cfg)
    np.testing.assert_allclose(a.volume.data, b.volume.data, atol=1e-12)
    self.assertLessEqual(a.volume.data.max(), 1.0)
    self.assertGreaterEqual(a.volume.data.min(), 0.0)

  def test_heatmapInput(self):
    h = libXV.XVAttr.Heatmap(_line([0.0, -4.0, 2.0]), {})
    p = libXV.postprocess(h, _noSmoothing(scalePercentile=100, cutoffPercentile=0))
    np.testing.assert_allclose(p.volume.flat(), [0.0, 1.0, 0.5])

#####
# Relevance mass
#####

class RmaTest(unittest.TestCase):
  def test_oracle(self):
    v = _line([1.0, 2.0, 3.0, 4.0, 0.0, 0.0])
    gt = _lineMask(6, [1, 2])
    self.assertEqual(libXV.rma(v, gt, 0.0), (0.5, False))
    self.assertEqual(libXV.rma(v, gt, 1.0), (1.0, False))
    self.assertEqual(libXV.rma(libXV.Volume(v.data * 9), gt, 0.0), (0.5, False))

  def test_noMass(self):
    score, degenerate = libXV.rma(_line([0.0] * 4), _lineMask(4, [0]), 2.0)
    self.assertTrue(math.isnan(score))
    self.assertTrue(degenerate)

  def test_dims(self):
    with self.assertRaises(libXV.DimensionError):
      libXV.rma(_line([1.0] * 4), _lineMask(5, [0]), 0.0)

  def test_sweep(self):
    v = _line(np.arange(1, 101))
    gt = _lineMask(100, slice(89, 100))
    sweep = libXV.rmaSweep(v, gt, _noSmoothing(), 0.0)
    self.assertEqual(sorted(sweep.keys()), [0.0, 80.0, 90.0, 95.0, 99.0])
    self.assertAlmostEqual(sweep[0.0][0], sum(range(90, 101)) / 5050.0)
    self.assertEqual(sweep[90.0][0], 1.0)
    self.assertEqual(sorted(libXV.rmaSweep(v, gt, _noSmoothing(), 0.0, [50]).keys()), [50])

#####
# Region ranking
#####

class RegionScoreTest(unittest.TestCase):
  def setUp(self):
    self.atlas = _caudateAtlas()
    data = np.zeros((6, 4, 1))
    data[0:2, 0:2] = 0.2
    data[4:6, 0:2] = 0.8
    data[2:4, 2:4] = 0.8
    self.scores = libXV.regionScores(libXV.Volume(data), self.atlas)

  def test_mergeAndTieBreak(self):
    self.assertEqual([r.regionId for r in self.scores], [1, 3])
    self.assertEqual(self.scores[0].name, 'caudate')
    self.assertEqual(self.scores[0].members, [1, 2])
    self.assertEqual(self.scores[0].score, 0.8)
    self.assertEqual([r.rank for r in self.scores], [1, 2])
    df = libXV.regionScoreFrame(self.scores)
    self.assertEqual(list(df.columns), ['region_id', 'name', 'score', 'rank'])
    self.assertEqual(list(df['name']), ['caudate', 'brainstem'])

  def test_tprHit(self):
    self.assertTrue(libXV.tprHit(self.scores, 2, topK=1))
    self.assertFalse(libXV.tprHit(self.scores, 3, topK=1))
    self.assertTrue(libXV.tprHit(self.scores, [1, 3], topK=2))
    self.assertFalse(libXV.tprHit(self.scores, [1, 3], topK=1))
    with self.assertRaises(libXV.ConfigError):
      libXV.tprHit(self.scores, 7)

  def test_overlap(self):
    self.assertEqual(libXV.overlapTopK(self.scores, [2]), 1.0)
    self.assertEqual(libXV.overlapTopK(self.scores, [3]), 0.0)
    self.assertEqual(libXV.overlapTopK(self.scores, [3], k=2), 0.5)
    with self.assertRaises(libXV.ConfigError):
      libXV.overlapTopK(self.scores, [3], k=3)
    with self.assertRaises(libXV.ConfigError):
      libXV.overlapTopK(self.scores, [])

  def test_overlapOfRandomMapsIsChance(self):
    n = 10
    labels = np.arange(1, n + 1).reshape(n, 1, 1)
    atlas = libXV.Atlas(labels, [libXV.Region().initFromRaw(i, 'r{}'.format(i), 'none', i) for i in range(1, n + 1)])
    rng = np.random.default_rng(1)
    vals = [libXV.overlapTopK(libXV.regionScores(libXV.Volume(rng.random((n, 1, 1))), atlas), [2, 5, 7])
            for _ in range(2000)]
    self.assertAlmostEqual(np.mean(vals), 0.3, delta=0.03)

#####
# False positives
#####

class FprTest(unittest.TestCase):
  def setUp(self):
    self.gt = _lineMask(10, [0])

  def test_oracle(self):
    v = np.zeros(10)
    v[0:3] = 1.0
    self.assertEqual(libXV.fprFlag(_line(v), self.gt, 2.0), (False, False))
    v[9] = 1.0
    self.assertEqual(libXV.fprFlag(_line(v), self.gt, 2.0), (False, False))
    v[9] = 1.5
    self.assertEqual(libXV.fprFlag(_line(v), self.gt, 2.0), (True, False))
    # a wider dilation swallows the outlier
    v[3:9] = 0.5
    self.assertEqual(libXV.fprFlag(_line(v), self.gt, 9.0), (False, False))

  def test_candidates(self):
    c = libXV.fprCandidates(_line(np.zeros(10)), self.gt, 2.0)
    np.testing.assert_array_equal(c.ravel(), [False] * 3 + [True] * 7)

  def test_degenerate(self):
    self.assertEqual(libXV.fprFlag(_line(np.zeros(10)), self.gt, 2.0), (False, True))
    with self.assertRaises(libXV.DegenerateError):
      libXV.fprFlag(_line(np.ones(10)), _lineMask(10, []), 2.0)

#####
# Subjects and aggregates
#####

class ScoreSubjectTest(unittest.TestCase):
  def test_row(self):
    atlas = _caudateAtlas()
    data = np.zeros((6, 4, 1))
    data[2:4, 2:4] = 1.0
    gt = atlas.regionMask(3)
    cfg = libXV.MetricsConfig().initFromDict({'rmaDilationMm': 0, 'fprDilationMm': 0, 'topK': 1, 'referenceSet': [3]})
    row = libXV.scoreSubject(libXV.postprocess(libXV.Volume(data), _noSmoothing()), gt, atlas, 3, cfg)
    self.assertEqual(row, {'rma': 1.0, 'tpr_hit': 1.0, 'fpr_flag': 0.0, 'overlap': 1.0, 'degenerate_flag': False})

  def test_degenerateRow(self):
    gt = _caudateAtlas().regionMask(3)
    row = libXV.scoreSubject(libXV.postprocess(libXV.Volume.zeros((6, 4, 1)), _noSmoothing()), gt)
    self.assertTrue(row['degenerate_flag'])
    self.assertTrue(math.isnan(row['rma']))
    self.assertTrue(math.isnan(row['tpr_hit']))

  def test_scoreHeatmaps(self):
    rng = np.random.default_rng(2)
    atlas = _caudateAtlas()
    maps = [libXV.Volume(rng.random((6, 4, 1))) for _ in range(5)]
    masks = [atlas.regionMask(1 + i % 3) for i in range(5)]
    pcfg = libXV.PostprocessConfig()
    mcfg = libXV.MetricsConfig()
    one = libXV.scoreHeatmaps(maps, masks, pcfg, mcfg, atlas, 1, nWorkers=1)
    two = libXV.scoreHeatmaps(maps, masks, pcfg, mcfg, atlas, 1, nWorkers=2)
    pd.testing.assert_frame_equal(pd.DataFrame(one), pd.DataFrame(two))
    self.assertEqual(len(one), 5)
    with self.assertRaises(libXV.DimensionError):
      libXV.scoreHeatmaps(maps, masks[:2], pcfg, mcfg)

class AggregateTest(unittest.TestCase):
  def _rows(self):
    rows = []
    for i, (r, deg) in enumerate([(0.2, False), (0.4, False), (0.9, False), (float('nan'), True)]):
      rows.append({'task': 'localized', 'method': 'Gradient', 'subject_id': 's{}'.format(3 - i), 'rma': r,
                   'tpr_hit': 1.0, 'fpr_flag': float(i % 2), 'overlap': float('nan'), 'degenerate_flag': deg,
                   'seed': 0, 'checkpoint_hash': 'abc'})
    rows.append(dict(rows[0], method='DeepLift', subject_id='s0', rma=0.5))
    return rows

  def test_sortedFrame(self):
    df = libXV.scoreFrame(self._rows())
    self.assertEqual(list(df.columns), libXV.SCORE_COLUMNS)
    self.assertEqual(list(df['method']), ['DeepLift'] + ['Gradient'] * 4)
    self.assertEqual(list(df['subject_id'])[1:], ['s0', 's1', 's2', 's3'])

  def test_aggregate(self):
    agg = libXV.EvalResult(self._rows()).aggregate()
    self.assertEqual(list(agg['method']), ['DeepLift', 'Gradient'])
    g = agg[agg['method'] == 'Gradient'].iloc[0]
    self.assertEqual((g['n'], g['n_degenerate']), (3, 1))
    vals = np.array([0.2, 0.4, 0.9])
    self.assertAlmostEqual(g['rma_mean'], vals.mean())
    self.assertAlmostEqual(g['rma_sd'], vals.std())
    self.assertAlmostEqual(g['rma_sem'], vals.std(ddof=1) / math.sqrt(3))
    self.assertAlmostEqual(g['fpr_flag_mean'], 1 / 3.0)
    self.assertTrue(math.isnan(g['overlap_mean']))
    d = agg[agg['method'] == 'DeepLift'].iloc[0]
    self.assertEqual(d['n'], 1)
    self.assertTrue(math.isnan(d['rma_sem']))

  def test_writeRead(self):
    with tempfile.TemporaryDirectory() as d:
      path = libXV.writeScores(os.path.join(d, 'scores.csv'), libXV.scoreFrame(self._rows()))
      back = libXV.readScores(path)
      with open(path) as inStream:
        first = inStream.readline().strip()
    self.assertEqual(first, ','.join(libXV.SCORE_COLUMNS))
    orig = libXV.scoreFrame(self._rows())
    self.assertEqual(list(back['subject_id']), list(orig['subject_id']))
    self.assertEqual(list(back['degenerate_flag']), list(orig['degenerate_flag']))
    np.testing.assert_array_equal(back['rma'].values, orig['rma'].values)

#####
# Main
#####

if __name__ == '__main__':
  unittest.main()
