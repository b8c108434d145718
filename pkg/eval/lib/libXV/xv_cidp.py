"""XAI validation: corrected IDPs (cIDPs)

Raw IDPs carry global variance (overall intensity, head size, ...) that
shows up everywhere in the image. A cIDP is the residual of an IDP after
regressing out the leading principal components of all IDPs that do not
belong to the target region's family, which leaves variance that
(hopefully) lives inside the target region. The localization score checks
that claim against a voxel-wise permutation map.
"""

import os

import numpy as np
import pandas as pd

import libXV.xv_parallel as parallel
from libXV.xv_utils import log, makeDirs, ConfigError, DimensionError, DegenerateError
from libXV.xv_volume import dilate, maskZero
from libXV import xv_stats

# selectK keeps the smallest k scoring at least this fraction of the best
SELECT_K_FRACTION = 0.95

#####
# Types
#####

class CorrectionSet:
  """IDP columns that may be used to correct a target"""
  def __init__(self, matrix, descriptors, excludedFamily):
    self.matrix = matrix
    self.descriptors = descriptors
    self.excludedFamily = excludedFamily

  @property
  def names(self):
    return [d.name for d in self.descriptors]

class PCAModel:
  """Correlation-matrix PCA of a CorrectionSet.

  components: rows are unit-norm directions in standardized IDP space.
  scores: PC scores of the fitting subjects (None when read from disk).
  """
  def __init__(self, names, means, sds, components, eigenvalues, scores=None):
    self.names = list(names)
    self.means = means
    self.sds = sds
    self.components = components
    self.eigenvalues = eigenvalues
    self.scores = scores

  @property
  def nComponents(self):
    return self.components.shape[0]

  def project(self, matrix, k=None):
    """PC scores of matrix (n x m, columns in self.names order)"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(self.names):
      raise DimensionError('Expected n x {} matrix, got {}'.format(len(self.names), matrix.shape))
    k = self.nComponents if k is None else k
    return ((matrix - self.means) / self.sds) @ self.components[:k].T

class CIDP:
  """Residualized target.

  target: IdpDescriptor, IDP name or None
  localization: score at kUsed, filled in once a sweep has measured it
  """
  def __init__(self, values, target, kUsed, localization=None):
    self.values = values
    self.target = target
    self.kUsed = kUsed
    self.localization = localization

  @property
  def idpName(self):
    if self.target is None:
      return 'target'
    return getattr(self.target, 'name', self.target)

  @property
  def name(self):
    return cidpName(self.idpName, self.kUsed)

class LocalizationResult:
  """Share of significant voxels inside the (dilated) target mask.

  degenerate: no voxel was significant; score is 1 by convention.
  """
  def __init__(self, score, nSig, nSigInside, degenerate):
    self.score = score
    self.nSig = nSig
    self.nSigInside = nSigInside
    self.degenerate = degenerate

  def __float__(self):
    return float(self.score)

  def toDict(self):
    return {
      'localization': self.score,
      'n_sig': self.nSig,
      'n_sig_inside': self.nSigInside,
      'degenerate_flag': self.degenerate,
    }

def cidpName(idpName, k):
  return '{}_cidp_k{}'.format(idpName, k)

#####
# Operations
#####

def buildCorrectionSet(table, target):
  """All regional IDPs outside the target's family.

  target: IdpDescriptor or IDP name
  """
  if isinstance(target, str):
    target = table.descriptor(target)
  keep = [i for i, d in enumerate(table.descriptors)
          if d.familyId is not None and d.name != target.name
          and (target.familyId is None or d.familyId != target.familyId)]
  if len(keep) < 2:
    raise DegenerateError('Correction set for {} has {} column(s), need >= 2'.format(target.name, len(keep)))
  return CorrectionSet(table.values[:, keep].copy(), [table.descriptors[i] for i in keep], target.familyId)

def fitPCA(correctionSet):
  X = np.asarray(correctionSet.matrix, dtype=np.float64)
  n, m = X.shape
  if n < 2:
    raise DegenerateError('PCA needs at least 2 subjects')
  if n <= m:
    log('fitPCA: only {} subjects for {} columns'.format(n, m))
  means = X.mean(axis=0)
  sds = X.std(axis=0, ddof=1)
  const = np.flatnonzero(sds <= 1e-12 * np.maximum(1.0, np.abs(means)))
  if len(const):
    raise DegenerateError('Constant correction columns: {}'.format([correctionSet.names[i] for i in const]))

  Z = (X - means) / sds
  _, s, Vt = np.linalg.svd(Z, full_matrices=False)
  for i in range(Vt.shape[0]):
    j = np.argmax(np.abs(Vt[i]))
    if Vt[i, j] < 0:
      Vt[i] = -Vt[i]
  eigen = s ** 2 / (n - 1)
  return PCAModel(correctionSet.names, means, sds, Vt, eigen, scores=Z @ Vt.T)

def residualize(targetValues, model, k, matrix=None, target=None):
  """CIDP holding the residual of the standardized target after OLS on [1, first k PC scores].

  matrix: correction matrix to project when the model carries no scores
  target: descriptor or name recorded on the CIDP
  """
  if not (0 <= k <= model.nComponents):
    raise ConfigError('k = {} outside [0, {}]'.format(k, model.nComponents))
  y = np.asarray(targetValues, dtype=np.float64).ravel()
  sd = y.std(ddof=1)
  if not sd > 0:
    raise DegenerateError('Target is constant')
  y = (y - y.mean()) / sd

  if matrix is not None:
    scores = model.project(matrix, k)
  elif model.scores is not None:
    scores = model.scores[:, :k]
  else:
    raise ConfigError('PCA model has no scores; pass the correction matrix')
  if scores.shape[0] != y.size:
    raise DimensionError('{} target values for {} PC score rows'.format(y.size, scores.shape[0]))

  design = np.column_stack([np.ones(y.size), scores])
  beta, *_ = np.linalg.lstsq(design, y, rcond=None)
  return CIDP(y - design @ beta, target, int(k))

def localizationScore(stat, mask, alpha, dilationMm):
  """LocalizationResult for the significant voxels of stat"""
  if tuple(stat.fweP.dims) != tuple(mask.dims):
    raise DimensionError('stat map dims {} vs mask {}'.format(stat.fweP.dims, mask.dims))
  sig = stat.significant(alpha)
  nSig = int(sig.sum())
  if nSig == 0:
    return LocalizationResult(1.0, 0, 0, True)
  inside = dilate(mask, dilationMm).membership
  nInside = int((sig & inside).sum())
  return LocalizationResult(nInside / nSig, nSig, nInside, False)

class _SweepTask(parallel.ParallelTask):
  def __init__(self, targetValues, model, volumes, mask, k, nPerm, alpha, dilationMm, seed):
    self.targetValues = targetValues
    self.model = model
    self.volumes = volumes
    self.mask = mask
    self.k = k
    self.nPerm = nPerm
    self.alpha = alpha
    self.dilationMm = dilationMm
    self.seed = seed

  def run(self):
    cidp = residualize(self.targetValues, self.model, self.k)
    stat = xv_stats.permutedOLS(xv_stats.Design().initFromRaw(cidp.values), self.volumes, self.nPerm, self.seed)
    loc = localizationScore(stat, self.mask, self.alpha, self.dilationMm)
    row = {'k': self.k}
    row.update(loc.toDict())
    return row

def sweepK(targetValues, model, volumes, mask, grid, nPerm, alpha, dilationMm, seed=0, nWorkers=1):
  """Localization score for every k in grid (DataFrame sorted by k)"""
  grid = sorted(set(int(k) for k in grid))
  if not grid:
    raise ConfigError('Empty k grid')
  if grid[0] < 0 or grid[-1] > model.nComponents:
    raise ConfigError('k grid {} outside [0, {}]'.format(grid, model.nComponents))
  tasks = [_SweepTask(targetValues, model, volumes, mask, k, nPerm, alpha, dilationMm, seed) for k in grid]
  rows = parallel.mapOrRaise(tasks, nWorkers, 'k sweep')
  for r in rows:
    log('  k = {}: localization {:.3f} ({} significant voxels)'.format(r['k'], r['localization'], r['n_sig']))
  return pd.DataFrame(rows).sort_values('k').reset_index(drop=True)

def chooseK(sweep):
  """Smallest k whose score is within SELECT_K_FRACTION of the best"""
  best = sweep['localization'].max()
  ok = sweep[sweep['localization'] >= SELECT_K_FRACTION * best - 1e-12]
  return int(ok['k'].min())

def selectK(targetValues, model, volumes, mask, grid, nPerm, alpha, dilationMm, seed=0, nWorkers=1):
  return chooseK(sweepK(targetValues, model, volumes, mask, grid, nPerm, alpha, dilationMm, seed, nWorkers))

def maskingExperiment(volumes, targetValues, mask, dilationMm, netSpec, trainCfg):
  """Held-out R^2 of the same model trained on full and on region-zeroed images.

  Returns: {'r2Full', 'r2Masked'}
  """
  from libXV import xv_train

  if len(volumes) != len(targetValues):
    raise DimensionError('{} volumes for {} targets'.format(len(volumes), len(targetValues)))
  zeroed = dilate(mask, dilationMm)
  masked = [maskZero(v, zeroed) for v in volumes]

  out = {}
  for key, vols in (('r2Full', volumes), ('r2Masked', masked)):
    dataset = xv_train.Dataset(vols, targetValues)
    model, _ = xv_train.train(xv_train.initModel(netSpec, trainCfg.seed), dataset, trainCfg)
    perf = xv_train.evaluatePerformance(model, dataset, dataset.split(trainCfg)['test'])
    out[key] = perf['r2']
    log('maskingExperiment: {} = {:.3f}'.format(key, out[key]))
  return out

#####
# Persistence
#####

def writePCAModel(outDir, model):
  """pca_means.csv, pca_sds.csv, pca_components.csv, pca_eigenvalues.csv"""
  makeDirs(outDir)
  pd.DataFrame({'idp_name': model.names, 'mean': model.means}).to_csv(os.path.join(outDir, 'pca_means.csv'), index=False, float_format='%.17g')
  pd.DataFrame({'idp_name': model.names, 'sd': model.sds}).to_csv(os.path.join(outDir, 'pca_sds.csv'), index=False, float_format='%.17g')
  comps = pd.DataFrame(model.components, columns=model.names)
  comps.insert(0, 'component', np.arange(1, model.nComponents + 1))
  comps.to_csv(os.path.join(outDir, 'pca_components.csv'), index=False, float_format='%.17g')
  pd.DataFrame({'component': np.arange(1, len(model.eigenvalues) + 1), 'eigenvalue': model.eigenvalues}).to_csv(
    os.path.join(outDir, 'pca_eigenvalues.csv'), index=False, float_format='%.17g')

def readPCAModel(inDir):
  means = pd.read_csv(os.path.join(inDir, 'pca_means.csv'))
  sds = pd.read_csv(os.path.join(inDir, 'pca_sds.csv'))
  comps = pd.read_csv(os.path.join(inDir, 'pca_components.csv'))
  eig = pd.read_csv(os.path.join(inDir, 'pca_eigenvalues.csv'))
  names = list(means['idp_name'])
  return PCAModel(names, means['mean'].values, sds['sd'].values, comps[names].values, eig['eigenvalue'].values)
