"""XAI validation: volumetric primitives

Volumes, region masks and atlases, plus the operations every other module
shares: smoothing, percentiles, dilation, masking and interpolation.

Layout: data arrays have shape dims = (nx, ny, nz) in C (row-major) order,
so data.ravel() is the canonical flat layout. 2D images have nz = 1.
"""

import math

import numpy as np
import scipy.ndimage as ndimage

from libXV.xv_utils import ConfigError, DimensionError, DegenerateError

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
KERNEL_TRUNCATE_SIGMAS = 4.0

LATERALITIES = ('left', 'right', 'none')

#####
# Types
#####

def _checkDims(dims):
  dims = tuple(int(d) for d in dims)
  if len(dims) != 3 or min(dims) < 1:
    raise DimensionError('dims must be 3 positive ints, got {}'.format(dims))
  return dims

def _checkSpacing(spacingMm):
  spacingMm = tuple(float(s) for s in spacingMm)
  if len(spacingMm) != 3 or not all(np.isfinite(spacingMm)) or min(spacingMm) <= 0:
    raise DimensionError('spacing must be 3 positive finite floats, got {}'.format(spacingMm))
  return spacingMm

class Volume:
  """Dense scalar grid with physical spacing.

  Carries images, heatmaps and statistical maps.
  """
  def __init__(self, data, spacingMm=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
      data = data[:, :, None]
    self.dims = _checkDims(data.shape)
    self.spacingMm = _checkSpacing(spacingMm)
    if not np.all(np.isfinite(data)):
      raise ValueError('Volume values must be finite')
    self.data = data

  @staticmethod
  def zeros(dims, spacingMm=(1.0, 1.0, 1.0)):
    return Volume(np.zeros(_checkDims(dims)), spacingMm)

  @property
  def nVoxels(self):
    return int(np.prod(self.dims))

  @property
  def voxelVolumeMm3(self):
    return float(np.prod(self.spacingMm))

  def flat(self):
    return self.data.ravel()

  def copy(self):
    return Volume(self.data.copy(), self.spacingMm)

  def sameGrid(self, other):
    return tuple(self.dims) == tuple(other.dims)

  def __repr__(self):
    return 'Volume(dims={}, spacingMm={})'.format(self.dims, self.spacingMm)

class RegionMask:
  """Boolean voxel membership on a Volume grid"""
  def __init__(self, membership, spacingMm=(1.0, 1.0, 1.0)):
    membership = np.asarray(membership, dtype=bool)
    if membership.ndim == 2:
      membership = membership[:, :, None]
    self.dims = _checkDims(membership.shape)
    self.spacingMm = _checkSpacing(spacingMm)
    self.membership = membership

  @staticmethod
  def empty(dims, spacingMm=(1.0, 1.0, 1.0)):
    return RegionMask(np.zeros(_checkDims(dims), dtype=bool), spacingMm)

  @property
  def nSet(self):
    return int(self.membership.sum())

  def union(self, other):
    _requireSameDims(self, other)
    return RegionMask(self.membership | other.membership, self.spacingMm)

  def invert(self):
    return RegionMask(~self.membership, self.spacingMm)

  def __repr__(self):
    return 'RegionMask(dims={}, nSet={})'.format(self.dims, self.nSet)

class Region:
  """One atlas region: id, name, laterality (left|right|none), family"""
  def __init__(self):
    self.regionId = None
    self.name = None
    self.laterality = 'none'
    self.familyId = None

  def initFromRaw(self, regionId, name, laterality, familyId):
    if laterality not in LATERALITIES:
      raise ConfigError('Unknown laterality {} for region {}'.format(laterality, name))
    if int(regionId) <= 0:
      raise ConfigError('Region ids must be positive (0 is background), got {}'.format(regionId))
    self.regionId = int(regionId)
    self.name = str(name)
    self.laterality = laterality
    self.familyId = int(familyId)
    return self

  def initFromDict(self, obj):
    return self.initFromRaw(obj['regionId'], obj['name'], obj['laterality'], obj['familyId'])

  def toDict(self):
    return {
      'regionId': self.regionId,
      'name': self.name,
      'laterality': self.laterality,
      'familyId': self.familyId,
    }

class Atlas:
  """Labeled voxel regions. Label 0 is background."""
  def __init__(self, labels, regions, spacingMm=(1.0, 1.0, 1.0)):
    labels = np.asarray(labels, dtype=np.int32)
    if labels.ndim == 2:
      labels = labels[:, :, None]
    self.dims = _checkDims(labels.shape)
    self.spacingMm = _checkSpacing(spacingMm)
    self.labels = labels

    self.regions = {}
    for r in regions:
      if r.regionId in self.regions:
        raise ConfigError('Duplicate region id {}'.format(r.regionId))
      self.regions[r.regionId] = r

    unknown = set(int(l) for l in np.unique(labels)) - set(self.regions.keys()) - {0}
    if unknown:
      raise ConfigError('Labels {} are not in the region table'.format(sorted(unknown)))

  def regionIds(self):
    return sorted(self.regions.keys())

  def regionMask(self, regionId):
    if regionId not in self.regions:
      raise ConfigError('Unknown region {}'.format(regionId))
    return RegionMask(self.labels == regionId, self.spacingMm)

  def unionMask(self, regionIds):
    m = np.zeros(self.dims, dtype=bool)
    for rid in regionIds:
      m |= self.regionMask(rid).membership
    return RegionMask(m, self.spacingMm)

  def regionByName(self, name):
    for r in self.regions.values():
      if r.name == name:
        return r
    raise ConfigError('Unknown region name {}'.format(name))

  def mergedKey(self, regionId):
    """Key under which bilateral homologues are merged.

    Lateralized regions share the smallest id among the lateralized members
    of their family; midline regions keep their own id.
    """
    r = self.regions[regionId]
    if r.laterality == 'none':
      return r.regionId
    return min(o.regionId for o in self.regions.values()
               if o.familyId == r.familyId and o.laterality != 'none')

  def mergedName(self, regionId):
    r = self.regions[self.mergedKey(regionId)]
    if r.laterality == 'none':
      return r.name
    for suffix in ('_left', '_right', '_L', '_R'):
      if r.name.endswith(suffix):
        return r.name[:-len(suffix)]
    return r.name

  def regionTable(self):
    return [self.regions[rid].toDict() for rid in self.regionIds()]

def _requireSameDims(a, b):
  if tuple(a.dims) != tuple(b.dims):
    raise DimensionError('dims mismatch: {} vs {}'.format(a.dims, b.dims))

#####
# Operations
#####

def gaussianKernel1D(sigmaVox):
  """Gaussian weights truncated at 4 sigma, unit sum"""
  if sigmaVox <= 0:
    return np.ones(1)
  radius = int(math.ceil(KERNEL_TRUNCATE_SIGMAS * sigmaVox))
  x = np.arange(-radius, radius + 1, dtype=np.float64)
  k = np.exp(-0.5 * (x / sigmaVox) ** 2)
  return k / k.sum()

def gaussianSmooth(v, fwhmMm):
  """Separable Gaussian smoothing with FWHM in mm.

  Each input voxel spreads its mass over the in-bounds part of the kernel,
  renormalized, so the total mass is preserved at the boundary too.
  """
  if fwhmMm is None or not np.isfinite(fwhmMm):
    raise ConfigError('fwhmMm must be finite, got {}'.format(fwhmMm))
  if fwhmMm < 0:
    raise ConfigError('fwhmMm must be >= 0, got {}'.format(fwhmMm))
  if fwhmMm == 0:
    return v.copy()

  out = v.data.copy()
  for axis in range(3):
    n = v.dims[axis]
    if n == 1:
      continue
    sigmaVox = fwhmMm * FWHM_TO_SIGMA / v.spacingMm[axis]
    k = gaussianKernel1D(sigmaVox)
    if len(k) == 1:
      continue
    inBounds = ndimage.correlate1d(np.ones(n), k, mode='constant', cval=0.0)
    shape = [1, 1, 1]
    shape[axis] = n
    out = ndimage.correlate1d(out / inBounds.reshape(shape), k, axis=axis, mode='constant', cval=0.0)
  return Volume(out, v.spacingMm)

def percentile(values, p, mask=None):
  """Nearest-rank percentile.

  values: Volume, RegionMask-compatible ndarray, or any array of numbers
  mask: optional RegionMask restricting the domain
  """
  if not (0 <= p <= 100):
    raise ConfigError('p must be in [0, 100], got {}'.format(p))
  arr = values.data if isinstance(values, Volume) else np.asarray(values, dtype=np.float64)
  if mask is not None:
    m = mask.membership if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    if m.shape != arr.shape:
      raise DimensionError('mask dims {} vs values {}'.format(m.shape, arr.shape))
    arr = arr[m]
  arr = np.ravel(arr)
  n = arr.size
  if n == 0:
    raise DegenerateError('percentile over an empty domain')
  # round() guards against 99 * 100 / 100 landing a hair above an integer
  rank = math.ceil(round(p * n / 100.0, 9)) - 1
  rank = min(max(rank, 0), n - 1)
  return float(np.partition(arr, rank)[rank])

def dilate(m, radiusMm):
  """Voxels within radiusMm (Euclidean, physical) of the mask"""
  if radiusMm is None or not np.isfinite(radiusMm) or radiusMm < 0:
    raise ConfigError('radiusMm must be finite and >= 0, got {}'.format(radiusMm))
  if radiusMm == 0 or m.nSet == 0:
    return RegionMask(m.membership.copy(), m.spacingMm)
  dist = ndimage.distance_transform_edt(~m.membership, sampling=m.spacingMm)
  return RegionMask(dist <= radiusMm * (1 + 1e-12), m.spacingMm)

def maskZero(v, m):
  """Zero the voxels of v inside m"""
  _requireSameDims(v, m)
  out = v.data.copy()
  out[m.membership] = 0.0
  return Volume(out, v.spacingMm)

def upsample(v, targetDims):
  """(Tri|bi)linear interpolation with align-corners semantics"""
  targetDims = _checkDims(targetDims)
  if any(t < s for t, s in zip(targetDims, v.dims)):
    raise DimensionError('targetDims {} smaller than source {}'.format(targetDims, v.dims))
  if tuple(targetDims) == tuple(v.dims):
    return v.copy()

  axes = []
  for s, t in zip(v.dims, targetDims):
    if s == 1 or t == 1:
      axes.append(np.zeros(t))
    else:
      axes.append(np.arange(t) * (s - 1) / (t - 1))
  coords = np.meshgrid(*axes, indexing='ij')
  out = ndimage.map_coordinates(v.data, coords, order=1, mode='nearest')
  spacing = tuple(sp * s / t for sp, s, t in zip(v.spacingMm, v.dims, targetDims))
  return Volume(out, spacing)

#####
# Helpers shared by the cohort generator and tests
#####

def voxelCentersMm(dims, spacingMm):
  """Three arrays of voxel-center coordinates in mm (voxel i at i*spacing)"""
  axes = [np.arange(n) * sp for n, sp in zip(dims, spacingMm)]
  return np.meshgrid(*axes, indexing='ij')

def ballOffsets(radiusMm, spacingMm):
  """Integer offsets within radiusMm of the origin (brute-force enumeration)"""
  reach = [int(math.floor(radiusMm / sp)) for sp in spacingMm]
  offsets = []
  for i in range(-reach[0], reach[0] + 1):
    for j in range(-reach[1], reach[1] + 1):
      for k in range(-reach[2], reach[2] + 1):
        d2 = (i * spacingMm[0]) ** 2 + (j * spacingMm[1]) ** 2 + (k * spacingMm[2]) ** 2
        if d2 <= radiusMm ** 2 * (1 + 1e-12):
          offsets.append((i, j, k))
  return offsets
