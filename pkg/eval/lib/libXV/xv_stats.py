"""XAI validation: mass-univariate permutation statistics

Voxel-wise OLS t maps with max-|t| family-wise error correction, and
Cohen's d maps for group contrasts.
"""

import numpy as np
import pandas as pd

from libXV.xv_utils import logDebug, subRNG, ConfigError, DimensionError, DegenerateError
from libXV.xv_volume import Volume

# Relative slack when comparing permuted maxima against observed |t|
TIE_RTOL = 1e-10

class Design:
  """Regressor of interest plus confounds. The intercept is implicit."""
  def __init__(self):
    self.contrast = None
    self.confounds = None

  def initFromRaw(self, contrast, confounds=None):
    contrast = np.asarray(contrast, dtype=np.float64).ravel()
    n = contrast.size
    if confounds is None:
      confounds = np.zeros((n, 0))
    confounds = np.asarray(confounds, dtype=np.float64)
    if confounds.ndim == 1:
      confounds = confounds[:, None]
    if confounds.shape[0] != n:
      raise DimensionError('confounds have {} rows for {} subjects'.format(confounds.shape[0], n))
    if not (np.all(np.isfinite(contrast)) and np.all(np.isfinite(confounds))):
      raise ConfigError('Design columns must be finite')
    if n < 3 + confounds.shape[1]:
      raise DegenerateError('Need at least {} subjects, got {}'.format(3 + confounds.shape[1], n))
    self.contrast = contrast
    self.confounds = confounds
    return self

  @property
  def nSubjects(self):
    return self.contrast.size

  def nuisance(self):
    """[intercept, confounds]"""
    return np.column_stack([np.ones(self.nSubjects), self.confounds])

class StatMap:
  """t map and FWE-corrected p map"""
  def __init__(self, tValues, fweP, nPerm, seed):
    self.tValues = tValues
    self.fweP = fweP
    self.nPerm = nPerm
    self.seed = seed

  def significant(self, alpha):
    return self.fweP.data <= alpha

  def summary(self, alpha):
    return {
      'n_perm': self.nPerm,
      'seed': self.seed,
      'n_sig_voxels': int(self.significant(alpha).sum()),
      'alpha': alpha,
    }

def summaryFrame(statMaps, alpha):
  """Summary table (n_perm, seed, n_sig_voxels, alpha), one row per map"""
  return pd.DataFrame([s.summary(alpha) for s in statMaps], columns=['n_perm', 'seed', 'n_sig_voxels', 'alpha'])

def _stackSubjects(volumes):
  if len(volumes) == 0:
    raise DimensionError('No subject volumes')
  dims = volumes[0].dims
  for v in volumes:
    if tuple(v.dims) != tuple(dims):
      raise DimensionError('Subject volume dims {} vs {}'.format(v.dims, dims))
  return np.stack([v.data.ravel() for v in volumes]), dims, volumes[0].spacingMm

class _OLSContext:
  """Everything about the voxel data that does not depend on the regressor"""
  def __init__(self, Y, nuisance):
    self.nuisance = nuisance
    self.nuisancePinv = np.linalg.pinv(nuisance)
    self.Yres = Y - nuisance @ (self.nuisancePinv @ Y)
    self.syy = (self.Yres ** 2).sum(axis=0)
    self.zeroVar = self.syy <= 1e-20 * (Y ** 2).sum(axis=0)
    self.dof = Y.shape[0] - nuisance.shape[1] - 1

  def residualize(self, x):
    return x - self.nuisance @ (self.nuisancePinv @ x)

  def tStats(self, xRes):
    """t of the regressor coefficient per voxel (Frisch-Waugh-Lovell form)"""
    sxx = xRes @ xRes
    sxy = xRes @ self.Yres
    beta = sxy / sxx
    rss = np.maximum(self.syy - sxy ** 2 / sxx, 0.0)
    # perfect fits keep a finite, huge t
    rss = np.maximum(rss, np.finfo(np.float64).tiny)
    t = beta / np.sqrt(rss / self.dof / sxx)
    t[self.zeroVar] = 0.0
    return t

def permutationList(nSubjects, nPerm, seed):
  rng = subRNG(seed, 0)
  return np.stack([rng.permutation(nSubjects) for _ in range(nPerm)])

def permutedOLS(design, volumes, nPerm, seed, permutations=None, logEvery=50):
  """Voxel-wise OLS with max-|t| permutation FWE correction.

  Args:
    design (Design)
    volumes (Volume[]): one per subject, same dims
    nPerm (int): number of permutations
    seed (int): derives the permutation list unless one is given
    permutations (int[nPerm][n]): optional explicit permutation list

  Returns: StatMap
  """
  if nPerm < 1:
    raise ConfigError('nPerm must be >= 1, got {}'.format(nPerm))
  Y, dims, spacing = _stackSubjects(volumes)
  n = design.nSubjects
  if Y.shape[0] != n:
    raise DimensionError('{} volumes for {} subjects'.format(Y.shape[0], n))

  ctx = _OLSContext(Y, design.nuisance())
  xOrth = ctx.residualize(design.contrast)
  if xOrth @ xOrth <= 1e-12 * max(1.0, design.contrast @ design.contrast):
    raise DegenerateError('Contrast is constant after orthogonalization against the confounds')

  tObs = ctx.tStats(ctx.residualize(xOrth))

  if permutations is None:
    permutations = permutationList(n, nPerm, seed)
  permutations = np.asarray(permutations)
  if permutations.shape != (nPerm, n):
    raise DimensionError('permutations shape {} != ({}, {})'.format(permutations.shape, nPerm, n))

  maxNull = np.empty(nPerm)
  for i, perm in enumerate(permutations):
    maxNull[i] = np.abs(ctx.tStats(ctx.residualize(xOrth[perm]))).max()
    if logEvery and (i + 1) % logEvery == 0:
      logDebug('permutedOLS: {}/{} permutations'.format(i + 1, nPerm))

  absT = np.abs(tObs)
  nullSorted = np.sort(maxNull)
  nAtLeast = nPerm - np.searchsorted(nullSorted, absT * (1 - TIE_RTOL), side='left')
  fweP = (1.0 + nAtLeast) / (1.0 + nPerm)

  return StatMap(Volume(tObs.reshape(dims), spacing), Volume(fweP.reshape(dims), spacing), nPerm, seed)

def effectSizeMap(groupA, groupB, sig, alpha):
  """Cohen's d (A - B) per voxel, zeroed where the FWE p exceeds alpha"""
  if len(groupA) < 2 or len(groupB) < 2:
    raise DegenerateError('Cohen\'s d needs at least 2 subjects per group ({} and {})'.format(len(groupA), len(groupB)))
  A, dims, spacing = _stackSubjects(groupA)
  B, dimsB, _ = _stackSubjects(groupB)
  if tuple(dims) != tuple(dimsB) or tuple(dims) != tuple(sig.fweP.dims):
    raise DimensionError('Group dims {} / {} / stat map {}'.format(dims, dimsB, sig.fweP.dims))

  nA, nB = A.shape[0], B.shape[0]
  pooled = np.sqrt(((nA - 1) * A.var(axis=0, ddof=1) + (nB - 1) * B.var(axis=0, ddof=1)) / (nA + nB - 2))
  diff = A.mean(axis=0) - B.mean(axis=0)
  d = np.zeros_like(diff)
  ok = pooled > 0
  d[ok] = diff[ok] / pooled[ok]
  d[sig.fweP.data.ravel() > alpha] = 0.0
  return Volume(d.reshape(dims), spacing)
