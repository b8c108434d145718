"""XAI validation: synthetic cohorts with known causal sources

Every subject image is rendered once from a template, shared global
factors and per-region local latents. Phenotypes (IDPs) are measured from
the rendered image and the realized region masks, never copied from the
latents, so zeroing a region destroys exactly the signal it carries.
"""

import math
import os

import numpy as np
import pandas as pd

import libXV.xv_parallel as parallel
from libXV.xv_utils import log, subRNG, makeDirs, ConfigError, DegenerateError
from libXV.xv_ndjson import toNDJSON, writeJSON, readJSON
from libXV.xv_volume import Volume, RegionMask, Atlas, Region, voxelCentersMm, LATERALITIES
from libXV import xv_io

SHAPES = ('sphere', 'box')

class IDP_KIND:
  MeanIntensity = 'mean_intensity'
  Volume = 'volume'
  LesionLoad = 'lesion_load'
  AgeLike = 'age_like'

  regional = [MeanIntensity, Volume]
  all = [MeanIntensity, Volume, LesionLoad, AgeLike]

# Stream ids for subRNG(seed, subjectIndex, stream)
_STREAM_BASE = 0
_STREAM_LESION = 1
_STREAM_AGE = 2

#####
# Spec
#####

class RegionBlueprint:
  """One region of the atlas blueprint"""
  def __init__(self):
    self.regionId = None
    self.name = None
    self.familyId = None
    self.laterality = 'none'
    self.shape = 'sphere'
    self.centerMm = None
    self.baseRadiusMm = None
    self.contrast = 0.0
    self.tau = 0.0
    self.rho = 0.0

  def initFromDict(self, obj):
    self.regionId = int(obj['regionId'])
    self.name = str(obj['name'])
    self.familyId = int(obj['familyId'])
    self.laterality = obj.get('laterality', 'none')
    self.shape = obj.get('shape', 'sphere')
    self.centerMm = tuple(float(c) for c in obj['centerMm'])
    self.baseRadiusMm = float(obj['baseRadiusMm'])
    self.contrast = float(obj.get('contrast', 0.0))
    self.tau = float(obj.get('tau', 0.0))
    self.rho = float(obj.get('rho', 0.0))
    if self.laterality not in LATERALITIES:
      raise ConfigError('Region {}: unknown laterality {}'.format(self.name, self.laterality))
    if self.shape not in SHAPES:
      raise ConfigError('Region {}: unknown shape {}'.format(self.name, self.shape))
    if len(self.centerMm) != 3:
      raise ConfigError('Region {}: centerMm needs 3 coordinates'.format(self.name))
    if self.baseRadiusMm <= 0:
      raise ConfigError('Region {}: baseRadiusMm must be > 0'.format(self.name))
    if self.tau < 0 or self.rho < 0:
      raise ConfigError('Region {}: tau and rho must be >= 0'.format(self.name))
    return self

  def toDict(self):
    return {
      'regionId': self.regionId,
      'name': self.name,
      'familyId': self.familyId,
      'laterality': self.laterality,
      'shape': self.shape,
      'centerMm': list(self.centerMm),
      'baseRadiusMm': self.baseRadiusMm,
      'contrast': self.contrast,
      'tau': self.tau,
      'rho': self.rho,
    }

  def circumRadius(self, radiusMm):
    return radiusMm * math.sqrt(3) if self.shape == 'box' else radiusMm

class FactorLoading:
  """How one global factor enters every image"""
  def __init__(self):
    self.intensityGain = 0.0
    self.spatialGradientAmplitude = 0.0
    self.globalRadiusScale = 0.0

  def initFromDict(self, obj):
    self.intensityGain = float(obj.get('intensityGain', 0.0))
    self.spatialGradientAmplitude = float(obj.get('spatialGradientAmplitude', 0.0))
    self.globalRadiusScale = float(obj.get('globalRadiusScale', 0.0))
    return self

  def toDict(self):
    return {
      'intensityGain': self.intensityGain,
      'spatialGradientAmplitude': self.spatialGradientAmplitude,
      'globalRadiusScale': self.globalRadiusScale,
    }

class CohortSpec:
  """Everything needed to render a cohort deterministically"""
  def __init__(self):
    self.nSubjects = None
    self.dims = None
    self.spacingMm = None
    self.regions = []
    self.loadings = []
    self.noiseSd = 0.0
    self.brainLevel = 1.0
    self.templateSlope = 0.0
    self.brainFraction = 0.45
    self.maxJitter = 0.25
    self.seed = 0

  def initFromDict(self, obj):
    known = {'nSubjects', 'dims', 'spacingMm', 'regions', 'loadings', 'noiseSd', 'brainLevel',
             'templateSlope', 'brainFraction', 'maxJitter', 'seed'}
    unknown = set(obj.keys()) - known
    if unknown:
      raise ConfigError('Unknown cohort keys: {}'.format(sorted(unknown)))
    self.nSubjects = int(obj['nSubjects'])
    self.dims = tuple(int(d) for d in obj['dims'])
    self.spacingMm = tuple(float(s) for s in obj.get('spacingMm', (1.0, 1.0, 1.0)))
    self.regions = [RegionBlueprint().initFromDict(r) for r in obj['regions']]
    self.loadings = [FactorLoading().initFromDict(l) for l in obj['loadings']]
    self.noiseSd = float(obj.get('noiseSd', 0.0))
    self.brainLevel = float(obj.get('brainLevel', 1.0))
    self.templateSlope = float(obj.get('templateSlope', 0.0))
    self.brainFraction = float(obj.get('brainFraction', 0.45))
    self.maxJitter = float(obj.get('maxJitter', 0.25))
    self.seed = int(obj.get('seed', 0))
    self.validate()
    return self

  def toDict(self):
    return {
      'nSubjects': self.nSubjects,
      'dims': list(self.dims),
      'spacingMm': list(self.spacingMm),
      'regions': [r.toDict() for r in self.regions],
      'loadings': [l.toDict() for l in self.loadings],
      'noiseSd': self.noiseSd,
      'brainLevel': self.brainLevel,
      'templateSlope': self.templateSlope,
      'brainFraction': self.brainFraction,
      'maxJitter': self.maxJitter,
      'seed': self.seed,
    }

  def toNDJSON(self):
    return toNDJSON(self.toDict())

  @property
  def nFactors(self):
    return len(self.loadings)

  def validate(self):
    """Returns True if everything looks OK, else raises ConfigError"""
    if self.nSubjects < 1:
      raise ConfigError('nSubjects must be >= 1')
    if len(self.dims) != 3 or min(self.dims) < 1:
      raise ConfigError('dims must be 3 positive ints, got {}'.format(self.dims))
    if len(self.spacingMm) != 3 or min(self.spacingMm) <= 0:
      raise ConfigError('spacingMm must be 3 positive floats')
    if self.nFactors < 1:
      raise ConfigError('Need at least one global factor')
    if self.noiseSd < 0:
      raise ConfigError('noiseSd must be >= 0')
    if not (0 <= self.maxJitter < 1):
      raise ConfigError('maxJitter must be in [0, 1)')
    if not self.regions:
      raise ConfigError('Need at least one region')

    ids = [r.regionId for r in self.regions]
    if len(set(ids)) != len(ids) or min(ids) <= 0:
      raise ConfigError('Region ids must be unique and positive: {}'.format(ids))
    names = [r.name for r in self.regions]
    if len(set(names)) != len(names):
      raise ConfigError('Region names must be unique')

    # Non-overlap at base radius + max jitter
    grow = 1 + self.maxJitter
    for i, a in enumerate(self.regions):
      for b in self.regions[i + 1:]:
        dist = math.dist(a.centerMm, b.centerMm)
        reach = a.circumRadius(a.baseRadiusMm * grow) + b.circumRadius(b.baseRadiusMm * grow)
        if dist < reach:
          raise ConfigError('Regions {} and {} may overlap ({:.2f}mm apart, need {:.2f}mm)'.format(a.name, b.name, dist, reach))
    return True

  def regionById(self, regionId):
    for r in self.regions:
      if r.regionId == regionId:
        return r
    raise ConfigError('Unknown region {}'.format(regionId))

class LesionParams:
  """Poisson count of hyperintense balls inside an eligible box"""
  def __init__(self):
    self.rate = 0.0
    self.radiusRangeMm = (1.0, 1.0)
    self.intensityBoost = 1.0
    self.zoneLoMm = None
    self.zoneHiMm = None

  def initFromDict(self, obj):
    self.rate = float(obj.get('rate', 0.0))
    self.radiusRangeMm = tuple(float(r) for r in obj.get('radiusRangeMm', (1.0, 1.0)))
    self.intensityBoost = float(obj.get('intensityBoost', 1.0))
    self.zoneLoMm = tuple(float(c) for c in obj['zoneLoMm'])
    self.zoneHiMm = tuple(float(c) for c in obj['zoneHiMm'])
    if self.rate < 0:
      raise ConfigError('Lesion rate must be >= 0')
    lo, hi = self.radiusRangeMm
    if not (0 <= lo <= hi):
      raise ConfigError('Invalid lesion radius range {}'.format(self.radiusRangeMm))
    return self

  def toDict(self):
    return {
      'rate': self.rate,
      'radiusRangeMm': list(self.radiusRangeMm),
      'intensityBoost': self.intensityBoost,
      'zoneLoMm': list(self.zoneLoMm),
      'zoneHiMm': list(self.zoneHiMm),
    }

  def eligibleVoxels(self, dims, spacingMm):
    """Indices (k x 3) of voxel centers inside the zone"""
    if len(self.zoneLoMm) != 3 or len(self.zoneHiMm) != 3:
      raise ConfigError('Lesion zone needs 3 coordinates per corner')
    extent = [(n - 1) * s for n, s in zip(dims, spacingMm)]
    for lo, hi, ext in zip(self.zoneLoMm, self.zoneHiMm, extent):
      if lo > hi or lo < 0 or hi > ext + 1e-9:
        raise ConfigError('Lesion zone {} - {} is not inside the volume (extent {})'.format(self.zoneLoMm, self.zoneHiMm, extent))
    X, Y, Z = voxelCentersMm(dims, spacingMm)
    inside = np.ones(dims, dtype=bool)
    for C, lo, hi in zip((X, Y, Z), self.zoneLoMm, self.zoneHiMm):
      inside &= (C >= lo - 1e-9) & (C <= hi + 1e-9)
    idx = np.argwhere(inside)
    if len(idx) == 0:
      raise ConfigError('Lesion zone contains no voxel centers')
    return idx

#####
# Default blueprint
#####

# (normalized center, laterality, family, base name, shape)
_DEFAULT_LAYOUT = [
  ((0.25, 0.30, 0.70), 'left', 1, 'caudate', 'sphere'),
  ((0.75, 0.30, 0.70), 'right', 1, 'caudate', 'sphere'),
  ((0.25, 0.70, 0.30), 'left', 2, 'hippocampus', 'sphere'),
  ((0.75, 0.70, 0.30), 'right', 2, 'hippocampus', 'sphere'),
  ((0.50, 0.50, 0.30), 'none', 3, 'brainstem', 'box'),
  ((0.50, 0.50, 0.70), 'none', 4, 'thalamus', 'sphere'),
  ((0.25, 0.70, 0.70), 'left', 5, 'putamen', 'sphere'),
  ((0.75, 0.70, 0.70), 'right', 5, 'putamen', 'sphere'),
  ((0.25, 0.30, 0.30), 'left', 6, 'pallidum', 'sphere'),
  ((0.75, 0.30, 0.30), 'right', 6, 'pallidum', 'sphere'),
]

# Single-slice images: all regions in one plane
_DEFAULT_LAYOUT_2D = [
  ((0.25, 0.30, 0.5), 'left', 1, 'caudate', 'sphere'),
  ((0.75, 0.30, 0.5), 'right', 1, 'caudate', 'sphere'),
  ((0.25, 0.75, 0.5), 'left', 2, 'hippocampus', 'sphere'),
  ((0.75, 0.75, 0.5), 'right', 2, 'hippocampus', 'sphere'),
  ((0.50, 0.55, 0.5), 'none', 3, 'brainstem', 'box'),
  ((0.50, 0.20, 0.5), 'none', 4, 'thalamus', 'sphere'),
]

_DEFAULT_CONTRASTS = [1.0, 1.0, -0.8, -0.8, 1.4, 0.7, -0.6, -0.6, 1.2, 1.2]

def defaultCohortDict(nSubjects=512, dims=(24, 24, 24), spacingMm=(2.0, 2.0, 2.0), nRegions=10, seed=0,
                      tau=0.35, rho=0.1, noiseSd=0.3):
  """The desk-scale cohort as a plain dict (feed to CohortSpec().initFromDict)"""
  layout = _DEFAULT_LAYOUT_2D if dims[2] == 1 else _DEFAULT_LAYOUT
  if not (1 <= nRegions <= len(layout)):
    raise ConfigError('nRegions must be in [1, {}] for dims {}'.format(len(layout), tuple(dims)))
  extentMm = [n * s for n, s in zip(dims, spacingMm)]
  inPlane = [e for n, e in zip(dims, extentMm) if n > 1]
  unit = min(inPlane)

  regions = []
  for i, (center, lat, fam, base, shape) in enumerate(layout[:nRegions]):
    centerMm = [c * (n - 1) * s if n > 1 else 0.0 for c, n, s in zip(center, dims, spacingMm)]
    name = base if lat == 'none' else '{}_{}'.format(base, lat)
    regions.append({
      'regionId': i + 1,
      'name': name,
      'familyId': fam,
      'laterality': lat,
      'shape': shape,
      'centerMm': centerMm,
      'baseRadiusMm': unit * (0.07 if shape == 'box' else 0.10),
      'contrast': _DEFAULT_CONTRASTS[i],
      'tau': tau,
      'rho': rho,
    })
  return {
    'nSubjects': nSubjects,
    'dims': list(dims),
    'spacingMm': list(spacingMm),
    'regions': regions,
    'loadings': [
      {'intensityGain': 1.0, 'spatialGradientAmplitude': 0.3, 'globalRadiusScale': 0.05},
      {'intensityGain': 0.3, 'spatialGradientAmplitude': 0.5, 'globalRadiusScale': 0.08},
    ],
    'noiseSd': noiseSd,
    'brainLevel': 1.0,
    'templateSlope': 0.2,
    'brainFraction': 0.45,
    'maxJitter': 0.25,
    'seed': seed,
  }

#####
# Subjects and phenotypes
#####

class Subject:
  """One rendered subject"""
  def __init__(self):
    self.subjectId = None
    self.index = None
    self.volume = None
    self.labels = None # realized (post-jitter) region labels
    self.factors = None
    self.latentIntensity = None # regionId -> standard normal draw
    self.latentRadius = None # regionId -> standard normal draw
    self.lesionMask = None

  def regionMask(self, regionId):
    return RegionMask(self.labels == regionId, self.volume.spacingMm)

  def unionMask(self, regionIds):
    return RegionMask(np.isin(self.labels, list(regionIds)), self.volume.spacingMm)

class IdpDescriptor:
  def __init__(self):
    self.name = None
    self.regionId = None
    self.familyId = None
    self.kind = None

  def initFromRaw(self, name, regionId, familyId, kind):
    if kind not in IDP_KIND.all:
      raise ConfigError('Unknown IDP kind {}'.format(kind))
    self.name = name
    self.regionId = regionId
    self.familyId = familyId
    self.kind = kind
    return self

  def initFromDict(self, obj):
    return self.initFromRaw(obj['name'], obj['regionId'], obj['familyId'], obj['kind'])

  def toDict(self):
    return {'name': self.name, 'regionId': self.regionId, 'familyId': self.familyId, 'kind': self.kind}

class PhenotypeTable:
  """subjects x IDPs, plus one descriptor per IDP column"""
  def __init__(self, subjectIds, values, descriptors):
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(subjectIds), len(descriptors)):
      raise ConfigError('values shape {} for {} subjects x {} IDPs'.format(values.shape, len(subjectIds), len(descriptors)))
    if not np.all(np.isfinite(values)):
      raise DegenerateError('Phenotype table has missing or non-finite values')
    self.subjectIds = list(subjectIds)
    self.values = values
    self.descriptors = list(descriptors)

  @property
  def names(self):
    return [d.name for d in self.descriptors]

  def descriptor(self, name):
    for d in self.descriptors:
      if d.name == name:
        return d
    raise ConfigError('Unknown IDP {}'.format(name))

  def column(self, name):
    self.descriptor(name)
    return self.values[:, self.names.index(name)].copy()

  def withColumn(self, descriptor, values):
    """New table with one more (or a replaced) column"""
    values = np.asarray(values, dtype=np.float64).ravel()
    keep = [i for i, d in enumerate(self.descriptors) if d.name != descriptor.name]
    descs = [self.descriptors[i] for i in keep] + [descriptor]
    mat = np.column_stack([self.values[:, keep], values])
    return PhenotypeTable(self.subjectIds, mat, descs)

  def toLongFrame(self):
    """subject_id, idp_name, value"""
    n, m = self.values.shape
    return pd.DataFrame({
      'subject_id': np.repeat(self.subjectIds, m),
      'idp_name': np.tile(self.names, n),
      'value': self.values.ravel(),
    })

  @staticmethod
  def fromLongFrame(df, descriptors):
    wide = df.pivot(index='subject_id', columns='idp_name', values='value')
    names = [d.name for d in descriptors]
    wide = wide.loc[sorted(wide.index), names]
    return PhenotypeTable(list(wide.index), wide.values, descriptors)

#####
# Rendering
#####

class _Template:
  """Smooth baseline: brain ellipsoid with a linear x gradient"""
  def __init__(self, spec):
    X, Y, Z = voxelCentersMm(spec.dims, spec.spacingMm)
    centre = [(n - 1) * s / 2.0 for n, s in zip(spec.dims, spec.spacingMm)]
    halves = [n * s / 2.0 for n, s in zip(spec.dims, spec.spacingMm)]
    r2 = np.zeros(spec.dims)
    for C, c, h, n in zip((X, Y, Z), centre, halves, spec.dims):
      if n > 1:
        r2 = r2 + ((C - c) / (spec.brainFraction * 2 * h)) ** 2
    self.brain = r2 <= 1.0
    self.xNorm = (X - centre[0]) / halves[0]
    self.coords = (X, Y, Z)
    self.baseline = np.where(self.brain, spec.brainLevel + spec.templateSlope * self.xNorm, 0.0)

def templateIntensity(spec):
  """Template image (no factors, no region contrasts), as a Volume"""
  return Volume(_Template(spec).baseline, spec.spacingMm)

def _regionVoxels(blueprint, radiusMm, coords):
  X, Y, Z = coords
  c = blueprint.centerMm
  if blueprint.shape == 'sphere':
    return (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= radiusMm ** 2 * (1 + 1e-12)
  return (np.abs(X - c[0]) <= radiusMm) & (np.abs(Y - c[1]) <= radiusMm) & (np.abs(Z - c[2]) <= radiusMm)

def _renderSubject(spec, template, index, lesionParams=None, eligible=None):
  rng = subRNG(spec.seed, index, _STREAM_BASE)
  G = spec.nFactors
  R = len(spec.regions)
  g = rng.standard_normal(G)
  zI = rng.standard_normal(R)
  zR = rng.standard_normal(R)
  noise = rng.standard_normal(spec.dims)

  gain = sum(l.intensityGain * gk for l, gk in zip(spec.loadings, g))
  gradAmp = sum(l.spatialGradientAmplitude * gk for l, gk in zip(spec.loadings, g))
  radiusScale = sum(l.globalRadiusScale * gk for l, gk in zip(spec.loadings, g))

  img = template.baseline + np.where(template.brain, gain + gradAmp * template.xNorm, 0.0)
  labels = np.zeros(spec.dims, dtype=np.int32)
  # radius scale clipped to [1 - maxJitter, 1 + maxJitter], the range validate() checked for overlap
  lo, hi = 1 - spec.maxJitter, 1 + spec.maxJitter
  for i, bp in enumerate(spec.regions):
    radius = bp.baseRadiusMm * float(np.clip(1 + radiusScale + bp.rho * zR[i], lo, hi))
    inside = _regionVoxels(bp, radius, template.coords)
    if np.any(labels[inside] != 0):
      raise DegenerateError('Subject {}: region {} overlaps another region after jitter'.format(index, bp.name))
    if not inside.any():
      raise DegenerateError('Subject {}: region {} has no voxels (radius {:.3f}mm)'.format(index, bp.name, radius))
    labels[inside] = bp.regionId
    img[inside] += bp.contrast + bp.tau * zI[i]

  lesionMask = None
  if lesionParams is not None:
    lesionMask = _drawLesions(spec, lesionParams, eligible, template.coords, subRNG(spec.seed, index, _STREAM_LESION))
    img[lesionMask] += lesionParams.intensityBoost

  img = img + spec.noiseSd * noise

  s = Subject()
  s.subjectId = subjectIdFor(index)
  s.index = index
  s.volume = Volume(img, spec.spacingMm)
  s.labels = labels
  s.factors = g
  s.latentIntensity = {bp.regionId: float(zI[i]) for i, bp in enumerate(spec.regions)}
  s.latentRadius = {bp.regionId: float(zR[i]) for i, bp in enumerate(spec.regions)}
  if lesionMask is not None:
    s.lesionMask = RegionMask(lesionMask, spec.spacingMm)
  return s

def _drawLesions(spec, params, eligible, coords, rng):
  X, Y, Z = coords
  mask = np.zeros(spec.dims, dtype=bool)
  k = rng.poisson(params.rate)
  lo, hi = params.radiusRangeMm
  for _ in range(k):
    i, j, l = eligible[rng.integers(len(eligible))]
    r = lo if hi == lo else rng.uniform(lo, hi)
    c = (X[i, j, l], Y[i, j, l], Z[i, j, l])
    mask |= (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= r ** 2 * (1 + 1e-12)
  return mask

def subjectIdFor(index):
  return 'sub{:05d}'.format(index)

class _RenderTask(parallel.ParallelTask):
  def __init__(self, spec, indices, lesionParams):
    self.spec = spec
    self.indices = indices
    self.lesionParams = lesionParams

  def run(self):
    template = _Template(self.spec)
    eligible = None
    if self.lesionParams is not None:
      eligible = self.lesionParams.eligibleVoxels(self.spec.dims, self.spec.spacingMm)
    return [_renderSubject(self.spec, template, i, self.lesionParams, eligible) for i in self.indices]

def _renderAll(spec, lesionParams, nWorkers):
  chunks = np.array_split(np.arange(spec.nSubjects), max(1, min(nWorkers, spec.nSubjects)))
  tasks = [_RenderTask(spec, [int(i) for i in c], lesionParams) for c in chunks if len(c)]
  results = parallel.mapOrRaise(tasks, nWorkers, 'render')
  return [s for chunk in results for s in chunk]

def baseAtlas(spec):
  """Atlas at base radii (the reference parcellation)"""
  template = _Template(spec)
  labels = np.zeros(spec.dims, dtype=np.int32)
  for bp in spec.regions:
    labels[_regionVoxels(bp, bp.baseRadiusMm, template.coords)] = bp.regionId
  regions = [Region().initFromRaw(bp.regionId, bp.name, bp.laterality, bp.familyId) for bp in spec.regions]
  return Atlas(labels, regions, spec.spacingMm)

def idpName(kind, regionName):
  return '{}_{}'.format(kind, regionName)

def measurePhenotypes(spec, subjects):
  """Regional IDPs measured from the rendered images and realized masks"""
  descriptors = []
  for bp in spec.regions:
    for kind in IDP_KIND.regional:
      descriptors.append(IdpDescriptor().initFromRaw(idpName(kind, bp.name), bp.regionId, bp.familyId, kind))

  voxelVolume = float(np.prod(spec.spacingMm))
  values = np.zeros((len(subjects), len(descriptors)))
  for i, s in enumerate(subjects):
    col = 0
    for bp in spec.regions:
      inside = s.labels == bp.regionId
      values[i, col] = s.volume.data[inside].mean()
      values[i, col + 1] = inside.sum() * voxelVolume
      col += 2
  return PhenotypeTable([s.subjectId for s in subjects], values, descriptors)

def generateCohort(spec, nWorkers=1):
  """Render the cohort.

  Returns: subjects, PhenotypeTable, Atlas
  """
  spec.validate()
  log('Rendering {} subjects at dims {} ({} regions, {} factors)'.format(spec.nSubjects, spec.dims, len(spec.regions), spec.nFactors))
  subjects = _renderAll(spec, None, nWorkers)
  return subjects, measurePhenotypes(spec, subjects), baseAtlas(spec)

def generateLesionTask(spec, lesionParams, nWorkers=1):
  """Render the cohort with Poisson lesions.

  Returns: subjects (each with lesionMask), lesion load per subject (mm^3),
    PhenotypeTable (with the lesion_load column), Atlas
  """
  spec.validate()
  lesionParams.eligibleVoxels(spec.dims, spec.spacingMm)
  log('Rendering {} subjects with lesions (rate {})'.format(spec.nSubjects, lesionParams.rate))
  subjects = _renderAll(spec, lesionParams, nWorkers)
  voxelVolume = float(np.prod(spec.spacingMm))
  load = np.array([s.lesionMask.nSet * voxelVolume for s in subjects])
  table = measurePhenotypes(spec, subjects)
  table = table.withColumn(IdpDescriptor().initFromRaw(IDP_KIND.LesionLoad, None, None, IDP_KIND.LesionLoad), load)
  return subjects, load, table, baseAtlas(spec)

def generateAgeTask(spec, subjects, regionIds, weights, noiseSd=0.05):
  """Scalar target driven by the intensity latents of a known region set.

  Returns: age-like values, the reference region set
  """
  regionIds = [int(r) for r in regionIds]
  known = {bp.regionId for bp in spec.regions}
  for rid in regionIds:
    if rid not in known:
      raise ConfigError('Unknown region {} in the aging set'.format(rid))
  if len(set(regionIds)) < 2 or len(set(regionIds)) != len(regionIds):
    raise ConfigError('The aging set needs at least two distinct regions, got {}'.format(regionIds))
  weights = np.asarray(weights, dtype=np.float64)
  if weights.shape != (len(regionIds),):
    raise ConfigError('{} weights for {} regions'.format(weights.size, len(regionIds)))

  y = np.zeros(len(subjects))
  for rid, w in zip(regionIds, weights):
    z = np.array([s.latentIntensity[rid] for s in subjects])
    sd = z.std()
    y += w * ((z - z.mean()) / sd if sd > 0 else np.zeros_like(z))
  rng = subRNG(spec.seed, 0, _STREAM_AGE)
  y += noiseSd * rng.standard_normal(len(subjects))
  return y, list(regionIds)

#####
# Persistence
#####

def writeCohort(outDir, spec, subjects, table, atlas, extra=None):
  """atlas.vlab, subjects/<id>.vlab, masks/<id>_<region>.vlab, phenotypes.csv, manifest.json"""
  makeDirs(os.path.join(outDir, 'subjects'))
  makeDirs(os.path.join(outDir, 'masks'))
  xv_io.writeAtlas(os.path.join(outDir, 'atlas.vlab'), atlas)
  for s in subjects:
    xv_io.writeVolume(os.path.join(outDir, 'subjects', s.subjectId + '.vlab'), s.volume)
    for bp in spec.regions:
      xv_io.writeMask(os.path.join(outDir, 'masks', '{}_{}.vlab'.format(s.subjectId, bp.regionId)), s.regionMask(bp.regionId))
    if s.lesionMask is not None:
      xv_io.writeMask(os.path.join(outDir, 'masks', '{}_lesion.vlab'.format(s.subjectId)), s.lesionMask)
  table.toLongFrame().to_csv(os.path.join(outDir, 'phenotypes.csv'), index=False, float_format='%.17g')
  manifest = {
    'spec': spec.toDict(),
    'seed': spec.seed,
    'idps': [d.toDict() for d in table.descriptors],
    'latents': {s.subjectId: {
      'factors': list(map(float, s.factors)),
      'intensity': {str(k): v for k, v in s.latentIntensity.items()},
      'radius': {str(k): v for k, v in s.latentRadius.items()},
    } for s in subjects},
  }
  if extra:
    manifest.update(extra)
  writeJSON(os.path.join(outDir, 'manifest.json'), manifest)
  log('Wrote cohort of {} subjects to {}'.format(len(subjects), outDir))

def readCohort(inDir):
  """Returns spec, subjects, PhenotypeTable, Atlas, manifest"""
  manifest = readJSON(os.path.join(inDir, 'manifest.json'))
  spec = CohortSpec().initFromDict(manifest['spec'])
  atlas = xv_io.readAtlas(os.path.join(inDir, 'atlas.vlab'))
  descriptors = [IdpDescriptor().initFromDict(d) for d in manifest['idps']]
  table = PhenotypeTable.fromLongFrame(pd.read_csv(os.path.join(inDir, 'phenotypes.csv')), descriptors)

  subjects = []
  for index, sid in enumerate(table.subjectIds):
    s = Subject()
    s.subjectId = sid
    s.index = index
    s.volume = xv_io.readVolume(os.path.join(inDir, 'subjects', sid + '.vlab'))
    labels = np.zeros(s.volume.dims, dtype=np.int32)
    for bp in spec.regions:
      m = xv_io.readMask(os.path.join(inDir, 'masks', '{}_{}.vlab'.format(sid, bp.regionId)))
      labels[m.membership] = bp.regionId
    s.labels = labels
    lat = manifest['latents'][sid]
    s.factors = np.array(lat['factors'])
    s.latentIntensity = {int(k): v for k, v in lat['intensity'].items()}
    s.latentRadius = {int(k): v for k, v in lat['radius'].items()}
    lesionPath = os.path.join(inDir, 'masks', '{}_lesion.vlab'.format(sid))
    if os.path.exists(lesionPath):
      s.lesionMask = xv_io.readMask(lesionPath)
    subjects.append(s)
  return spec, subjects, table, atlas, manifest
