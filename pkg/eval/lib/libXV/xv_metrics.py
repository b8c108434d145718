"""XAI validation: heatmap post-processing and ground-truth scores

postprocess() turns a raw attribution map into a bounded relevance map:
rectify, smooth, scale by a high percentile, cut off below a percentile,
cap at 1. Region ranking and the false-positive check read the scaled map
(before the cutoff); relevance mass accuracy reads the final map.

Degenerate maps (no relevance anywhere) are never scored silently: they
carry a flag and stay out of the aggregates.
"""

import numpy as np
import pandas as pd

import libXV.xv_parallel as parallel
from libXV.xv_utils import log, ConfigError, DimensionError, DegenerateError
from libXV.xv_volume import Volume, gaussianSmooth, percentile, dilate

RECTIFY = ('abs', 'positive_part')

SCORE_COLUMNS = ['task', 'method', 'subject_id', 'rma', 'tpr_hit', 'fpr_flag', 'overlap', 'degenerate_flag', 'seed', 'checkpoint_hash']
METRIC_COLUMNS = ['rma', 'tpr_hit', 'fpr_flag', 'overlap']

#####
# Configs
#####

class PostprocessConfig:
  def __init__(self):
    self.rectify = 'abs'
    self.fwhmMm = 4.0
    self.scalePercentile = 99.0
    self.cutoffPercentile = 99.0
    self.cutoffSweep = [0.0, 80.0, 90.0, 95.0, 99.0]

  def initFromDict(self, obj):
    unknown = set(obj.keys()) - set(self.toDict().keys())
    if unknown:
      raise ConfigError('postprocess: unknown keys {}'.format(sorted(unknown)))
    self.rectify = obj.get('rectify', self.rectify)
    self.fwhmMm = float(obj.get('fwhmMm', self.fwhmMm))
    self.scalePercentile = float(obj.get('scalePercentile', self.scalePercentile))
    self.cutoffPercentile = float(obj.get('cutoffPercentile', self.cutoffPercentile))
    self.cutoffSweep = [float(c) for c in obj.get('cutoffSweep', self.cutoffSweep)]
    self.validate()
    return self

  def toDict(self):
    return {
      'rectify': self.rectify,
      'fwhmMm': self.fwhmMm,
      'scalePercentile': self.scalePercentile,
      'cutoffPercentile': self.cutoffPercentile,
      'cutoffSweep': list(self.cutoffSweep),
    }

  def validate(self):
    if self.rectify not in RECTIFY:
      raise ConfigError('rectify must be one of {}, got {}'.format(RECTIFY, self.rectify))
    if not self.fwhmMm >= 0:
      raise ConfigError('fwhmMm must be >= 0')
    for p in [self.scalePercentile, self.cutoffPercentile] + self.cutoffSweep:
      if not (0 <= p <= 100):
        raise ConfigError('Percentiles must be in [0, 100], got {}'.format(p))
    return True

class MetricsConfig:
  """Dilations (mm), top-k for the hit rate, optional reference region set"""
  def __init__(self):
    self.rmaDilationMm = 2.0
    self.fprDilationMm = 20.0
    self.topK = 3
    self.referenceSet = None
    self.overlapK = None

  def initFromDict(self, obj):
    unknown = set(obj.keys()) - set(self.toDict().keys())
    if unknown:
      raise ConfigError('metrics: unknown keys {}'.format(sorted(unknown)))
    self.rmaDilationMm = float(obj.get('rmaDilationMm', self.rmaDilationMm))
    self.fprDilationMm = float(obj.get('fprDilationMm', self.fprDilationMm))
    self.topK = int(obj.get('topK', self.topK))
    self.referenceSet = obj.get('referenceSet', self.referenceSet)
    self.overlapK = obj.get('overlapK', self.overlapK)
    if self.rmaDilationMm < 0 or self.fprDilationMm < 0:
      raise ConfigError('Dilations must be >= 0')
    if self.topK < 1:
      raise ConfigError('topK must be >= 1')
    return self

  def toDict(self):
    return {
      'rmaDilationMm': self.rmaDilationMm,
      'fprDilationMm': self.fprDilationMm,
      'topK': self.topK,
      'referenceSet': self.referenceSet,
      'overlapK': self.overlapK,
    }

#####
# Post-processing
#####

class Processed:
  """volume: final map. scaled: before the cutoff. unscaled: the scale percentile was 0."""
  def __init__(self, volume, scaled, unscaled):
    self.volume = volume
    self.scaled = scaled
    self.unscaled = unscaled

def rectify(v, how):
  if how == 'abs':
    return Volume(np.abs(v.data), v.spacingMm)
  if how == 'positive_part':
    return Volume(np.maximum(v.data, 0.0), v.spacingMm)
  raise ConfigError('Unknown rectification {}'.format(how))

def applyCutoff(v, cutoffPercentile):
  """Zero values strictly below the percentile, cap the rest at 1"""
  c = percentile(v, cutoffPercentile)
  out = np.where(v.data < c, 0.0, v.data)
  return Volume(np.minimum(out, 1.0), v.spacingMm)

def postprocess(h, cfg):
  """Processed map of h (Heatmap or Volume)"""
  v = getattr(h, 'volume', h)
  v = gaussianSmooth(rectify(v, cfg.rectify), cfg.fwhmMm)
  s = percentile(v, cfg.scalePercentile)
  unscaled = not s > 0
  scaled = v if unscaled else Volume(v.data / s, v.spacingMm)
  return Processed(applyCutoff(scaled, cfg.cutoffPercentile), scaled, unscaled)

#####
# Scores
#####

def _checkGrid(v, m):
  if tuple(v.dims) != tuple(m.dims):
    raise DimensionError('heatmap dims {} vs mask {}'.format(v.dims, m.dims))

def rma(v, gt, dilationMm):
  """Share of relevance mass inside the dilated mask.

  Returns: score, degenerate (score is nan when the map has no mass)
  """
  _checkGrid(v, gt)
  total = float(v.data.sum())
  if not total > 0:
    return float('nan'), True
  inside = dilate(gt, dilationMm).membership
  return float(v.data[inside].sum()) / total, False

class RegionScoreRow:
  """regionId: merged key. members: atlas region ids folded into this row."""
  def __init__(self, regionId, name, score, members):
    self.regionId = regionId
    self.name = name
    self.score = score
    self.members = members
    self.rank = None

  def toDict(self):
    return {'region_id': self.regionId, 'name': self.name, 'score': self.score, 'rank': self.rank}

def regionScores(v, atlas, p=99.0):
  """Regions ranked by the p-th percentile of v inside them, bilateral pairs merged (max)"""
  _checkGrid(v, atlas)
  rows = {}
  for rid in atlas.regionIds():
    m = atlas.regionMask(rid)
    if m.nSet == 0:
      log('regionScores: region {} is empty, skipped'.format(rid))
      continue
    score = percentile(v, p, m)
    key = atlas.mergedKey(rid)
    if key in rows:
      rows[key].score = max(rows[key].score, score)
      rows[key].members.append(rid)
    else:
      rows[key] = RegionScoreRow(key, atlas.mergedName(rid), score, [rid])
  ranked = sorted(rows.values(), key=lambda r: (-r.score, r.regionId))
  for i, r in enumerate(ranked):
    r.rank = i + 1
  return ranked

def regionScoreFrame(scores):
  return pd.DataFrame([r.toDict() for r in scores], columns=['region_id', 'name', 'score', 'rank'])

def _rowFor(scores, regionId):
  for r in scores:
    if regionId in r.members:
      return r
  raise ConfigError('Region {} is not in the ranking'.format(regionId))

def tprHit(scores, target, topK=3):
  """Target region (or every region of a target list) ranked within topK"""
  targets = target if isinstance(target, (list, tuple, set)) else [target]
  return all(_rowFor(scores, t).rank <= topK for t in targets)

def fprCandidates(v, gt, dilationMm):
  """Voxels outside the dilated mask"""
  return ~dilate(gt, dilationMm).membership

def fprFlag(v, gt, dilationMm=20.0):
  """Any voxel outside the dilated mask above the 99th percentile inside it.

  Returns: flag, degenerate
  """
  _checkGrid(v, gt)
  d = dilate(gt, dilationMm)
  if d.nSet == 0:
    raise DegenerateError('Empty ground-truth mask')
  if not np.any(v.data != 0):
    return False, True
  threshold = percentile(v, 99, d)
  return bool(np.any(v.data[~d.membership] > threshold)), False

def overlapTopK(scores, referenceSet, k=None):
  """Share of the top-k regions that belong to the reference set (merged keys)"""
  ref = {_rowFor(scores, rid).regionId for rid in referenceSet}
  if not ref:
    raise ConfigError('Empty reference set')
  k = len(ref) if k is None else int(k)
  if not (1 <= k <= len(scores)):
    raise ConfigError('k = {} outside [1, {}]'.format(k, len(scores)))
  top = {r.regionId for r in scores[:k]}
  return len(top & ref) / k

#####
# Subjects and aggregates
#####

def scoreSubject(processed, gt, atlas=None, targets=None, cfg=None):
  """One score row (without provenance columns).

  targets: region id(s) for the hit rate, or None
  """
  cfg = cfg or MetricsConfig()
  r, rmaDegenerate = rma(processed.volume, gt, cfg.rmaDilationMm)
  fpr, fprDegenerate = fprFlag(processed.scaled, gt, cfg.fprDilationMm)
  tpr = float('nan')
  overlap = float('nan')
  if atlas is not None and (targets is not None or cfg.referenceSet):
    scores = regionScores(processed.scaled, atlas)
    if targets is not None:
      tpr = float(tprHit(scores, targets, cfg.topK))
    if cfg.referenceSet:
      overlap = overlapTopK(scores, cfg.referenceSet, cfg.overlapK)
  return {
    'rma': r,
    'tpr_hit': tpr,
    'fpr_flag': float(fpr),
    'overlap': overlap,
    'degenerate_flag': bool(rmaDegenerate or fprDegenerate),
  }

class _ScoreTask(parallel.ParallelTask):
  def __init__(self, heatmaps, masks, atlas, targets, pcfg, mcfg):
    self.heatmaps = heatmaps
    self.masks = masks
    self.atlas = atlas
    self.targets = targets
    self.pcfg = pcfg
    self.mcfg = mcfg

  def run(self):
    return [scoreSubject(postprocess(h, self.pcfg), m, self.atlas, self.targets, self.mcfg)
            for h, m in zip(self.heatmaps, self.masks)]

def scoreHeatmaps(heatmaps, masks, pcfg, mcfg, atlas=None, targets=None, nWorkers=1):
  """Score rows for parallel lists of heatmaps and ground-truth masks"""
  if len(heatmaps) != len(masks):
    raise DimensionError('{} heatmaps for {} masks'.format(len(heatmaps), len(masks)))
  chunks = np.array_split(np.arange(len(heatmaps)), max(1, min(nWorkers, len(heatmaps))))
  tasks = [_ScoreTask([heatmaps[i] for i in c], [masks[i] for i in c], atlas, targets, pcfg, mcfg) for c in chunks if len(c)]
  return [row for chunk in parallel.mapOrRaise(tasks, nWorkers, 'scoring') for row in chunk]

def rmaSweep(h, gt, pcfg, dilationMm, cutoffs=None):
  """rma at every cutoff percentile: {cutoff: (score, degenerate)}"""
  cutoffs = pcfg.cutoffSweep if cutoffs is None else cutoffs
  processed = postprocess(h, pcfg)
  return {c: rma(applyCutoff(processed.scaled, c), gt, dilationMm) for c in cutoffs}

class EvalResult:
  """Per-subject score rows plus their aggregates"""
  def __init__(self, rows):
    self.rows = scoreFrame(rows)

  def aggregate(self):
    return aggregateScores(self.rows)

def scoreFrame(rows):
  """Score rows in SCORE_COLUMNS order, sorted for byte-stable output"""
  df = pd.DataFrame(list(rows), columns=SCORE_COLUMNS)
  df['degenerate_flag'] = df['degenerate_flag'].astype(bool)
  return df.sort_values(['task', 'method', 'seed', 'subject_id']).reset_index(drop=True)

def aggregateScores(df):
  """Means and population sds per (task, method) over non-degenerate rows"""
  out = []
  for (task, method), g in df.groupby(['task', 'method'], sort=True):
    ok = g[~g['degenerate_flag'].astype(bool)]
    row = {'task': task, 'method': method, 'n': len(ok), 'n_degenerate': int(len(g) - len(ok))}
    for col in METRIC_COLUMNS:
      vals = ok[col].dropna().astype(float)
      row[col + '_mean'] = float(vals.mean()) if len(vals) else float('nan')
      row[col + '_sd'] = float(vals.std(ddof=0)) if len(vals) else float('nan')
      row[col + '_sem'] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float('nan')
    out.append(row)
  return pd.DataFrame(out)

def writeScores(path, df):
  scoreFrame(df.to_dict('records')).to_csv(path, index=False, float_format='%.17g')
  return path

def readScores(path):
  df = pd.read_csv(path, dtype={'subject_id': str, 'checkpoint_hash': str, 'task': str, 'method': str})
  df['degenerate_flag'] = df['degenerate_flag'].astype(bool)
  return df
