"""XAI validation: experiment stages

ExperimentConfig (a TOML file), the run directory layout, and the steps
the CLI chains: generate -> correct -> train -> explain -> evaluate.
Every step reads its inputs from the run directory and writes its outputs
there, so any suffix of the pipeline can be re-run from stored artifacts.
"""

# Import libXV
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..')), 'eval', 'lib'))
import libXV
from libXV import XVNet, XVTrain, XVAttr

# Other imports
import contextlib
import copy
import glob
try:
  import tomllib
except ImportError:  # Python < 3.11
  import tomli as tomllib

import numpy as np
import pandas as pd

VERSION = '0.1.0'

STAGES = ('localized', 'artificial_disease', 'lesion', 'plausibility')

PERFORMANCE_COLUMNS = ['task', 'seed', 'kind', 'n', 'mae', 'abs_err_sd', 'r2', 'accuracy', 'precision', 'recall', 'checkpoint_hash']
SWEEP_COLUMNS = ['task', 'method', 'seed', 'subject_id', 'cutoff', 'rma', 'degenerate_flag']

# Label of subjects dropped by the exclusion band
EXCLUDED = -1

###
# Config sections
###

class _Section:
  """A flat config table: DEFAULTS names every accepted key"""
  NAME = None
  DEFAULTS = {}

  def __init__(self):
    for k, v in self.DEFAULTS.items():
      setattr(self, k, copy.deepcopy(v))

  def initFromDict(self, obj):
    unknown = set(obj.keys()) - set(self.DEFAULTS.keys())
    if unknown:
      raise libXV.ConfigError('[{}]: unknown keys {}'.format(self.NAME, sorted(unknown)))
    for k, v in obj.items():
      setattr(self, k, copy.deepcopy(v))
    self.validate()
    return self

  def toDict(self):
    return {k: copy.deepcopy(getattr(self, k)) for k in self.DEFAULTS}

  def validate(self):
    return True

class StageConfig(_Section):
  NAME = 'stage'
  DEFAULTS = {
    'name': 'localized',
    'targets': None, # region ids for the localized stage (None: every region)
    'idpKind': libXV.IDP_KIND.MeanIntensity,
  }

  def validate(self):
    if self.name not in STAGES:
      raise libXV.ConfigError('Unknown stage {} (expected one of {})'.format(self.name, STAGES))
    if self.idpKind not in libXV.IDP_KIND.regional:
      raise libXV.ConfigError('[stage] idpKind must be one of {}'.format(libXV.IDP_KIND.regional))
    return True

class NetworkConfig(_Section):
  """[train.network]: the residual net, or an explicit layer list"""
  NAME = 'train.network'
  DEFAULTS = {
    'width': 8,
    'nBlocks': 3,
    'batchNorm': True,
    'layers': None,
  }

  def netSpec(self, dims, head):
    if self.layers:
      ndim = 2 if dims[2] == 1 else 3
      return XVNet.NetSpec().initFromDict({'ndim': ndim, 'inputDims': list(dims), 'layers': self.layers, 'head': head})
    return XVNet.tinyResNetSpec(tuple(dims), self.width, self.nBlocks, head, batchNorm=self.batchNorm)

class CorrectionConfig(_Section):
  NAME = 'correction'
  DEFAULTS = {
    'kGrid': [0, 1, 2, 3, 4, 5],
    'nPerm': 100,
    'alpha': 0.05,
    'dilationMm': 2.0,
    'masking': False,
    'maskingDilationMm': 2.0,
  }

  def validate(self):
    if not self.kGrid:
      raise libXV.ConfigError('[correction] kGrid is empty')
    if int(self.nPerm) < 1:
      raise libXV.ConfigError('[correction] nPerm must be >= 1')
    if not (0 < self.alpha < 1):
      raise libXV.ConfigError('[correction] alpha must be in (0, 1)')
    return True

class LesionConfig(_Section):
  """LesionParams; the zone defaults to the central 40% box"""
  NAME = 'lesion'
  DEFAULTS = {
    'rate': 2.0,
    'radiusRangeMm': [2.0, 4.0],
    'intensityBoost': 1.0,
    'zoneLoMm': None,
    'zoneHiMm': None,
  }

  def params(self, spec):
    d = self.toDict()
    extent = [(n - 1) * s for n, s in zip(spec.dims, spec.spacingMm)]
    if d['zoneLoMm'] is None:
      d['zoneLoMm'] = [0.3 * e for e in extent]
    if d['zoneHiMm'] is None:
      d['zoneHiMm'] = [0.7 * e for e in extent]
    return libXV.LesionParams().initFromDict(d)

class AgeConfig(_Section):
  NAME = 'age'
  DEFAULTS = {
    'regionIds': None, # default: the first three regions
    'weights': None, # default: all 1
    'noiseSd': 0.05,
  }

class DiseaseConfig(_Section):
  NAME = 'disease'
  DEFAULTS = {
    'regions': None, # two region ids; default: the first region and the first one of another family
    'hi': 0.6,
    'lo': 0.4,
  }

  def validate(self):
    if not (0 < self.lo <= self.hi < 1):
      raise libXV.ConfigError('[disease] needs 0 < lo <= hi < 1, got lo {} hi {}'.format(self.lo, self.hi))
    return True

class ContrastConfig(_Section):
  NAME = 'contrast'
  DEFAULTS = {
    'confounds': [], # IDP names
    'nPerm': 100,
    'alpha': 0.05,
    'quantile': 0.25,
  }

  def validate(self):
    if not (0 < self.quantile < 0.5):
      raise libXV.ConfigError('[contrast] quantile must be in (0, 0.5)')
    return True

class ReportConfig(_Section):
  NAME = 'report'
  DEFAULTS = {
    'groups': {}, # group name -> task names
    'renderSubjects': 1,
  }

class SeedsConfig(_Section):
  NAME = 'seeds'
  DEFAULTS = {
    'replicates': [0],
  }

  def validate(self):
    if not self.replicates:
      raise libXV.ConfigError('[seeds] replicates is empty')
    self.replicates = [int(s) for s in self.replicates]
    if len(set(self.replicates)) != len(self.replicates):
      raise libXV.ConfigError('[seeds] replicates repeat: {}'.format(self.replicates))
    return True

_COHORT_ARGS = {'nSubjects', 'dims', 'spacingMm', 'nRegions', 'seed', 'tau', 'rho', 'noiseSd'}

def cohortSpecFromDict(obj):
  """A full CohortSpec dict (with 'regions'), or arguments for defaultCohortDict"""
  if 'regions' in obj:
    return libXV.CohortSpec().initFromDict(obj)
  unknown = set(obj.keys()) - _COHORT_ARGS
  if unknown:
    raise libXV.ConfigError('[cohort]: unknown keys {}'.format(sorted(unknown)))
  args = dict(obj)
  for k in ('dims', 'spacingMm'):
    if k in args:
      args[k] = tuple(args[k])
  return libXV.CohortSpec().initFromDict(libXV.defaultCohortDict(**args))

###
# ExperimentConfig
###

class ExperimentConfig:
  """One experiment: cohort, stage, training, methods, scoring, seeds"""
  SECTIONS = ('runId', 'cohort', 'stage', 'train', 'methods', 'postprocess', 'metrics', 'seeds',
              'correction', 'lesion', 'age', 'disease', 'report', 'contrast')

  def __init__(self):
    self.runId = None
    self._autoRunId = True
    self.cohort = None
    self.stage = StageConfig()
    self.train = XVTrain.TrainConfig()
    self.network = NetworkConfig()
    self.methods = XVAttr.defaultMethods()
    self.postprocess = libXV.PostprocessConfig()
    self.metrics = libXV.MetricsConfig()
    self.seeds = SeedsConfig()
    self.correction = CorrectionConfig()
    self.lesion = LesionConfig()
    self.age = AgeConfig()
    self.disease = DiseaseConfig()
    self.report = ReportConfig()
    self.contrast = ContrastConfig()

  def initFromDict(self, obj):
    unknown = set(obj.keys()) - set(ExperimentConfig.SECTIONS)
    if unknown:
      raise libXV.ConfigError('Unknown config sections {}'.format(sorted(unknown)))
    if 'cohort' not in obj:
      raise libXV.ConfigError('[cohort] is required')
    self.cohort = cohortSpecFromDict(obj['cohort'])
    self.stage = StageConfig().initFromDict(obj.get('stage', {}))

    trainObj = dict(obj.get('train', {}))
    self.network = NetworkConfig().initFromDict(trainObj.pop('network', {}))
    self.train = XVTrain.TrainConfig().initFromDict(trainObj)

    if 'methods' in obj:
      if not isinstance(obj['methods'], list) or not obj['methods']:
        raise libXV.ConfigError('[[methods]] must be a non-empty list of tables')
      self.methods = [XVAttr.Method().initFromDict(m) for m in obj['methods']]
    labels = [m.label for m in self.methods]
    if len(set(labels)) != len(labels):
      raise libXV.ConfigError('Method labels repeat: {}'.format(labels))

    self.postprocess = libXV.PostprocessConfig().initFromDict(obj.get('postprocess', {}))
    self.metrics = libXV.MetricsConfig().initFromDict(obj.get('metrics', {}))
    self.seeds = SeedsConfig().initFromDict(obj.get('seeds', {}))
    self.correction = CorrectionConfig().initFromDict(obj.get('correction', {}))
    self.lesion = LesionConfig().initFromDict(obj.get('lesion', {}))
    self.age = AgeConfig().initFromDict(obj.get('age', {}))
    self.disease = DiseaseConfig().initFromDict(obj.get('disease', {}))
    self.report = ReportConfig().initFromDict(obj.get('report', {}))
    self.contrast = ContrastConfig().initFromDict(obj.get('contrast', {}))
    self._resolveDefaults()
    self.validate()

    self._autoRunId = 'runId' not in obj
    self.runId = str(obj['runId']) if 'runId' in obj else 'run-' + self.runKey()[:10]
    return self

  def _resolveDefaults(self):
    regions = self.cohort.regions
    if self.stage.targets is None:
      self.stage.targets = [bp.regionId for bp in regions]
    if self.age.regionIds is None:
      self.age.regionIds = [bp.regionId for bp in regions[:3]]
    if self.age.weights is None:
      self.age.weights = [1.0] * len(self.age.regionIds)
    if self.disease.regions is None:
      first = regions[0]
      other = [bp for bp in regions if bp.familyId != first.familyId]
      if not other:
        raise libXV.ConfigError('[disease] needs two regions from different families')
      self.disease.regions = [first.regionId, other[0].regionId]

  def validate(self):
    known = {bp.regionId for bp in self.cohort.regions}
    def check(ids, where):
      for r in ids or []:
        if r not in known:
          raise libXV.ConfigError('{} names unknown region {} (known: {})'.format(where, r, sorted(known)))
    check(self.stage.targets, '[stage] targets')
    check(self.age.regionIds, '[age] regionIds')
    check(self.disease.regions, '[disease] regions')
    check(self.metrics.referenceSet, '[metrics] referenceSet')
    if len(self.disease.regions) != 2 or self.disease.regions[0] == self.disease.regions[1]:
      raise libXV.ConfigError('[disease] regions must be two distinct ids, got {}'.format(self.disease.regions))
    if len(self.age.weights) != len(self.age.regionIds):
      raise libXV.ConfigError('[age] has {} weights for {} regions'.format(len(self.age.weights), len(self.age.regionIds)))
    if not self.stage.targets:
      raise libXV.ConfigError('[stage] targets is empty')
    return True

  def toDict(self):
    d = {
      'cohort': self.cohort.toDict(),
      'stage': self.stage.toDict(),
      'train': dict(self.train.toDict(), network=self.network.toDict()),
      'methods': [m.toDict() for m in self.methods],
      'postprocess': self.postprocess.toDict(),
      'metrics': self.metrics.toDict(),
      'seeds': self.seeds.toDict(),
      'correction': self.correction.toDict(),
      'lesion': self.lesion.toDict(),
      'age': self.age.toDict(),
      'disease': self.disease.toDict(),
      'report': self.report.toDict(),
      'contrast': self.contrast.toDict(),
    }
    if not self._autoRunId:
      d['runId'] = self.runId
    return d

  def toNDJSON(self):
    return libXV.toNDJSON(self.toDict())

  def hash(self):
    d = self.toDict()
    d.pop('runId', None)
    return libXV.hashDict(d)

  def runKey(self):
    """Digest naming the run directory; seeds and methods share one directory"""
    d = self.toDict()
    for k in ('runId', 'seeds', 'methods'):
      d.pop(k, None)
    return libXV.hashDict(d)

  def withOverrides(self, seed=None, stage=None, methods=None):
    """A copy with the CLI overrides applied"""
    d = self.toDict()
    if seed is not None:
      d['seeds'] = {'replicates': [int(seed)]}
    if stage is not None and stage != d['stage']['name']:
      d['stage']['name'] = stage
      if 'runId' in d:
        d['runId'] = '{}-{}'.format(d['runId'], stage)
    if methods:
      picked = [m for m in d['methods'] if m['label'] in methods or m['name'] in methods]
      if not picked:
        raise libXV.ConfigError('No configured method matches {}'.format(methods))
      d['methods'] = picked
    return ExperimentConfig().initFromDict(d)

  def trainConfig(self, seed, kind):
    d = self.train.toDict()
    d['seed'] = int(seed)
    d['loss'] = 'bce' if kind == 'classification' else 'mse'
    return XVTrain.TrainConfig().initFromDict(d)

def readExperimentConfig(path):
  """TOML config, or the config echoed in a manifest.json"""
  if path.endswith('.json'):
    obj = libXV.readJSON(path)
    return ExperimentConfig().initFromDict(obj['config'] if 'config' in obj else obj)
  try:
    with open(path, 'rb') as inStream:
      obj = tomllib.load(inStream)
  except tomllib.TOMLDecodeError as err:
    raise libXV.ConfigError('{}: {}'.format(path, err))
  return ExperimentConfig().initFromDict(obj)

###
# Run directory
###

class RunDir:
  """out/<run-id>/{manifest.json, cohort/, checkpoints/, heatmaps/, scores/, report/}"""
  def __init__(self, outRoot, runId):
    self.root = os.path.join(outRoot, runId)
    self.cohort = os.path.join(self.root, 'cohort')
    self.checkpoints = os.path.join(self.root, 'checkpoints')
    self.heatmaps = os.path.join(self.root, 'heatmaps')
    self.scores = os.path.join(self.root, 'scores')
    self.report = os.path.join(self.root, 'report')
    self.manifest = os.path.join(self.root, 'manifest.json')

  def make(self):
    for d in (self.cohort, self.checkpoints, self.heatmaps, self.scores, self.report):
      libXV.makeDirs(d)
    return self

  def checkpointPath(self, task, seed):
    return os.path.join(self.checkpoints, '{}_seed{}.xvck'.format(task, seed))

  def historyPath(self, task, seed):
    return os.path.join(self.checkpoints, '{}_seed{}_history.csv'.format(task, seed))

  def heatmapDir(self, task, seed, label):
    return os.path.join(self.heatmaps, task, 'seed{}'.format(seed), label)

  def heatmapPath(self, task, seed, label, subjectId):
    return os.path.join(self.heatmapDir(task, seed, label), subjectId + '.vlab')

  def scorePath(self, name):
    return os.path.join(self.scores, name)

###
# Cohort bundle and tasks
###

class CohortBundle:
  """The rendered cohort with lookup by subject id"""
  def __init__(self, spec, subjects, table, atlas):
    self.spec = spec
    self.subjects = subjects
    self.table = table
    self.atlas = atlas
    self._byId = {s.subjectId: s for s in subjects}

  @property
  def subjectIds(self):
    return [s.subjectId for s in self.subjects]

  def subject(self, subjectId):
    try:
      return self._byId[subjectId]
    except KeyError:
      raise libXV.ConfigError('Unknown subject {}'.format(subjectId))

  def volumes(self, subjectIds=None):
    if subjectIds is None:
      return [s.volume for s in self.subjects]
    return [self.subject(sid).volume for sid in subjectIds]

def loadCohort(rd):
  if not os.path.exists(os.path.join(rd.cohort, 'manifest.json')):
    raise libXV.ConfigError('No cohort in {} (run generate first)'.format(rd.cohort))
  spec, subjects, table, atlas, _ = libXV.readCohort(rd.cohort)
  return CohortBundle(spec, subjects, table, atlas)

class Task:
  """One prediction target plus where its evidence lives"""
  KINDS = ('regression', 'classification')

  def __init__(self):
    self.name = None
    self.kind = 'regression'
    self.subjectIds = []
    self.targets = None
    self.gtRegions = None # region ids whose union is the ground truth
    self.gtLesion = False # ground truth = per-subject lesion mask
    self.tprTargets = None
    self.referenceSet = None
    self.idp = None
    self.k = None

  def initFromRaw(self, name, kind, subjectIds, targets, gtRegions=None, gtLesion=False,
                  tprTargets=None, referenceSet=None, idp=None, k=None):
    if kind not in Task.KINDS:
      raise libXV.ConfigError('Unknown task kind {}'.format(kind))
    if not gtRegions and not gtLesion:
      raise libXV.ConfigError('Task {} has no ground truth'.format(name))
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if targets.size != len(subjectIds):
      raise libXV.DimensionError('Task {}: {} targets for {} subjects'.format(name, targets.size, len(subjectIds)))
    self.name = name
    self.kind = kind
    self.subjectIds = list(subjectIds)
    self.targets = targets
    self.gtRegions = [int(r) for r in gtRegions] if gtRegions else None
    self.gtLesion = bool(gtLesion)
    self.tprTargets = [int(r) for r in tprTargets] if tprTargets else None
    self.referenceSet = [int(r) for r in referenceSet] if referenceSet else None
    self.idp = idp
    self.k = k
    return self

  def toDict(self):
    return {
      'name': self.name, 'kind': self.kind, 'gtRegions': self.gtRegions, 'gtLesion': self.gtLesion,
      'tprTargets': self.tprTargets, 'referenceSet': self.referenceSet, 'idp': self.idp, 'k': self.k,
    }

  def groundTruth(self, subject):
    if self.gtLesion:
      if subject.lesionMask is None:
        raise libXV.ConfigError('Task {} needs lesion masks; the cohort has none'.format(self.name))
      return subject.lesionMask
    return subject.unionMask(self.gtRegions)

  def dataset(self, bundle):
    return XVTrain.Dataset(bundle.volumes(self.subjectIds), self.targets, self.subjectIds)

def writeTasks(rd, tasks):
  """cohort/tasks.json plus cohort/targets.csv (task, subject_id, target)"""
  libXV.writeJSON(os.path.join(rd.cohort, 'tasks.json'), [t.toDict() for t in tasks])
  frames = [pd.DataFrame({'task': t.name, 'subject_id': t.subjectIds, 'target': t.targets}) for t in tasks]
  pd.concat(frames, ignore_index=True).to_csv(os.path.join(rd.cohort, 'targets.csv'), index=False, float_format='%.17g')

def readTasks(rd):
  path = os.path.join(rd.cohort, 'tasks.json')
  if not os.path.exists(path):
    raise libXV.ConfigError('No tasks in {} (run correct first)'.format(rd.cohort))
  targets = pd.read_csv(os.path.join(rd.cohort, 'targets.csv'), dtype={'task': str, 'subject_id': str})
  tasks = []
  for d in libXV.readJSON(path):
    rows = targets[targets['task'] == d['name']]
    tasks.append(Task().initFromRaw(d['name'], d['kind'], list(rows['subject_id']), rows['target'].values,
                                    d['gtRegions'], d['gtLesion'], d['tprTargets'], d['referenceSet'], d['idp'], d['k']))
  return tasks

###
# Labels
###

def artificialDiseaseLabels(c1, c2, hi=0.6, lo=0.4, subjectIds=None):
  """Joint-percentile labels from two cIDPs.

  Subjects strictly inside (p_lo, p_hi) for either cIDP are excluded.
  Of the rest, label 1 iff c1 > p_hi(c1) and c2 <= p_lo(c2).

  Returns: labels (EXCLUDED for the dropped subjects), excluded subject ids
    (indices when subjectIds is None)
  """
  c1 = np.asarray(c1, dtype=np.float64).ravel()
  c2 = np.asarray(c2, dtype=np.float64).ravel()
  if c1.size != c2.size:
    raise libXV.DimensionError('{} values for cIDP 1, {} for cIDP 2'.format(c1.size, c2.size))
  if subjectIds is not None and len(subjectIds) != c1.size:
    raise libXV.DimensionError('{} subject ids for {} values'.format(len(subjectIds), c1.size))

  hi1, lo1 = libXV.percentile(c1, 100 * hi), libXV.percentile(c1, 100 * lo)
  hi2, lo2 = libXV.percentile(c2, 100 * hi), libXV.percentile(c2, 100 * lo)
  excluded = ((c1 > lo1) & (c1 < hi1)) | ((c2 > lo2) & (c2 < hi2))

  labels = ((c1 > hi1) & (c2 <= lo2)).astype(np.int64)
  labels[excluded] = EXCLUDED
  nPatients = int((labels == 1).sum())
  nControls = int((labels == 0).sum())
  if nPatients == 0 or nControls == 0:
    raise libXV.DegenerateError('Artificial disease has {} patients and {} controls after exclusion'.format(nPatients, nControls))
  libXV.log('Artificial disease: {} patients, {} controls, {} excluded'.format(nPatients, nControls, int(excluded.sum())))

  idx = np.flatnonzero(excluded)
  if subjectIds is None:
    return labels, idx
  return labels, [subjectIds[i] for i in idx]

###
# Steps
###

@contextlib.contextmanager
def stepContext(stage, step):
  """Prefix errors from this step with where they happened"""
  try:
    yield
  except libXV.XVError as err:
    raise type(err)('[{} / {}] {}'.format(stage, step, err)) from err

def generate(cfg, rd, nWorkers=1):
  """Render the cohort (with lesions for the lesion stage) into cohort/"""
  rd.make()
  spec = cfg.cohort
  if cfg.stage.name == 'lesion':
    subjects, _, table, atlas = libXV.generateLesionTask(spec, cfg.lesion.params(spec), nWorkers)
  else:
    subjects, table, atlas = libXV.generateCohort(spec, nWorkers)
  libXV.writeCohort(rd.cohort, spec, subjects, table, atlas, extra={'stage': cfg.stage.name, 'version': VERSION})
  return CohortBundle(spec, subjects, table, atlas)

def correctedIdp(cfg, rd, bundle, regionId, nWorkers=1):
  """cIDP of one region's IDP at the selected k.

  Returns: CIDP (localization from the sweep), sweep DataFrame
  """
  bp = bundle.spec.regionById(regionId)
  name = libXV.idpName(cfg.stage.idpKind, bp.name)
  y = bundle.table.column(name)
  model = libXV.fitPCA(libXV.buildCorrectionSet(bundle.table, name))
  grid = [k for k in cfg.correction.kGrid if k <= model.nComponents]
  if not grid:
    raise libXV.ConfigError('[correction] kGrid {} exceeds the {} available components'.format(cfg.correction.kGrid, model.nComponents))
  libXV.log('Correcting {} over k = {}'.format(name, grid))
  sweep = libXV.sweepK(y, model, bundle.volumes(), bundle.atlas.regionMask(regionId), grid,
                       cfg.correction.nPerm, cfg.correction.alpha, cfg.correction.dilationMm, cfg.cohort.seed, nWorkers)
  k = libXV.chooseK(sweep)
  libXV.writePCAModel(os.path.join(rd.cohort, 'pca', name), model)
  sweep.insert(0, 'idp', name)
  sweep['selected'] = sweep['k'] == k
  cidp = libXV.residualize(y, model, k, target=bundle.table.descriptor(name))
  cidp.localization = float(sweep.loc[sweep['selected'], 'localization'].iloc[0])
  libXV.log('{}: selected k = {} (localization {:.3f})'.format(name, k, cidp.localization))
  return cidp, sweep

def correct(cfg, rd, bundle, nWorkers=1):
  """Targets for the stage: cIDPs, disease labels, lesion load or the age-like score.

  Writes cohort/tasks.json, cohort/targets.csv and (when correcting)
  scores/k_sweep.csv, scores/masking.csv.
  """
  rd.make()
  stage = cfg.stage.name
  ids = bundle.subjectIds
  tasks = []
  sweeps = []
  masking = []

  if stage == 'localized':
    for rid in cfg.stage.targets:
      cidp, sweep = correctedIdp(cfg, rd, bundle, rid, nWorkers)
      values = cidp.values
      sweeps.append(sweep)
      task = Task().initFromRaw('localized_' + bundle.spec.regionById(rid).name, 'regression', ids, values,
                                gtRegions=[rid], tprTargets=[rid], idp=cidp.idpName, k=cidp.kUsed)
      tasks.append(task)
      if cfg.correction.masking:
        tcfg = cfg.trainConfig(cfg.seeds.replicates[0], 'regression')
        r2 = libXV.maskingExperiment(bundle.volumes(), values, bundle.atlas.regionMask(rid), cfg.correction.maskingDilationMm,
                                     cfg.network.netSpec(bundle.spec.dims, 'linear'), tcfg)
        masking.append({'task': task.name, 'seed': tcfg.seed, 'r2_full': r2['r2Full'], 'r2_masked': r2['r2Masked']})

  elif stage == 'artificial_disease':
    a, b = cfg.disease.regions
    c1, sweep1 = correctedIdp(cfg, rd, bundle, a, nWorkers)
    c2, sweep2 = correctedIdp(cfg, rd, bundle, b, nWorkers)
    sweeps += [sweep1, sweep2]
    labels, _ = artificialDiseaseLabels(c1.values, c2.values, cfg.disease.hi, cfg.disease.lo)
    keep = labels != EXCLUDED
    name = 'disease_{}_{}'.format(bundle.spec.regionById(a).name, bundle.spec.regionById(b).name)
    tasks.append(Task().initFromRaw(name, 'classification', [sid for sid, k in zip(ids, keep) if k], labels[keep],
                                    gtRegions=[a, b], tprTargets=[a, b], idp='{}+{}'.format(c1.idpName, c2.idpName), k=max(c1.kUsed, c2.kUsed)))

  elif stage == 'lesion':
    load = bundle.table.column(libXV.IDP_KIND.LesionLoad)
    tasks.append(Task().initFromRaw('lesion_load', 'regression', ids, load, gtLesion=True, idp=libXV.IDP_KIND.LesionLoad))

  elif stage == 'plausibility':
    y, ref = libXV.generateAgeTask(bundle.spec, bundle.subjects, cfg.age.regionIds, cfg.age.weights, cfg.age.noiseSd)
    tasks.append(Task().initFromRaw('age_like', 'regression', ids, y, gtRegions=ref, referenceSet=ref, idp=libXV.IDP_KIND.AgeLike))

  else:
    raise libXV.ConfigError('Unknown stage {}'.format(stage))

  writeTasks(rd, tasks)
  if sweeps:
    pd.concat(sweeps, ignore_index=True).to_csv(rd.scorePath('k_sweep.csv'), index=False, float_format='%.17g')
  if masking:
    pd.DataFrame(masking).to_csv(rd.scorePath('masking.csv'), index=False, float_format='%.17g')
  return tasks

class _TrainTask(libXV.parallel.ParallelTask):
  def __init__(self, cfg, rd, task, dataset, seed, spec):
    self.cfg = cfg
    self.rd = rd
    self.task = task
    self.dataset = dataset
    self.seed = seed
    self.spec = spec

  def run(self):
    return trainOne(self.cfg, self.rd, self.task, self.dataset, self.seed, self.spec)

def trainOne(cfg, rd, task, dataset, seed, spec):
  """Train, checkpoint and score one (task, seed). Returns the performance row."""
  tcfg = cfg.trainConfig(seed, task.kind)
  head = 'sigmoid' if task.kind == 'classification' else 'linear'
  model = XVTrain.initModel(cfg.network.netSpec(spec.dims, head), seed)
  libXV.log('Training {} (seed {}) on {} subjects'.format(task.name, seed, dataset.n))
  model, _ = XVTrain.train(model, dataset, tcfg, rd.historyPath(task.name, seed))
  XVTrain.writeCheckpoint(rd.checkpointPath(task.name, seed), model)
  perf = XVTrain.evaluatePerformance(model, dataset, dataset.split(tcfg)['test'])
  return dict(perf, task=task.name, seed=seed, kind=task.kind, checkpoint_hash=model.net.hash())

def trainAll(cfg, rd, bundle, tasks, nWorkers=1):
  """One model per (task, seed). Writes checkpoints/ and scores/performance.csv."""
  rd.make()
  jobs = [_TrainTask(cfg, rd, t, t.dataset(bundle), seed, bundle.spec) for t in tasks for seed in cfg.seeds.replicates]
  rows = libXV.parallel.mapOrRaise(jobs, nWorkers, 'training')
  perf = pd.DataFrame(rows, columns=PERFORMANCE_COLUMNS).sort_values(['task', 'seed']).reset_index(drop=True)
  perf.to_csv(rd.scorePath('performance.csv'), index=False, float_format='%.17g')
  return perf

def explainTask(cfg, rd, bundle, task, seed, nWorkers=1):
  """Heatmaps of every method for the test split of one (task, seed).

  Returns: {method label: [Heatmap]}
  """
  path = rd.checkpointPath(task.name, seed)
  if not os.path.exists(path):
    raise libXV.ConfigError('No checkpoint {} (run train first)'.format(path))
  model = XVTrain.readCheckpoint(path)
  tcfg = cfg.trainConfig(seed, task.kind)
  dataset = task.dataset(bundle)
  split = dataset.split(tcfg)
  volumes = bundle.volumes(task.subjectIds)
  testIds = [task.subjectIds[i] for i in split['test']]
  baseline = None
  if any(m.name == 'DeepLift' and m.params['baseline'] == XVAttr.Baseline.TRAINING_MEAN for m in cfg.methods):
    baseline = XVAttr.Baseline.trainingMean(volumes, split['train'])
  heatmaps = XVAttr.explainMany(model, [volumes[i] for i in split['test']], testIds, cfg.methods,
                                target=0, baseline=baseline, seed=seed, nWorkers=nWorkers)
  for label, hs in heatmaps.items():
    libXV.makeDirs(rd.heatmapDir(task.name, seed, label))
    for h in hs:
      XVAttr.writeHeatmap(rd.heatmapPath(task.name, seed, label, h.provenance['subjectId']), h)
  return heatmaps

def explainAll(cfg, rd, bundle, tasks, nWorkers=1):
  """Returns: {(task, seed, label): [Heatmap]}"""
  out = {}
  for task in tasks:
    for seed in cfg.seeds.replicates:
      for label, hs in explainTask(cfg, rd, bundle, task, seed, nWorkers).items():
        out[(task.name, seed, label)] = hs
  return out

def readHeatmaps(cfg, rd, tasks):
  """The stored counterpart of explainAll"""
  out = {}
  for task in tasks:
    for seed in cfg.seeds.replicates:
      for m in cfg.methods:
        paths = sorted(glob.glob(os.path.join(rd.heatmapDir(task.name, seed, m.label), '*.vlab')))
        if not paths:
          raise libXV.ConfigError('No heatmaps for {} / seed {} / {} (run explain first)'.format(task.name, seed, m.label))
        out[(task.name, seed, m.label)] = [XVAttr.readHeatmap(p) for p in paths]
  return out

def metricsFor(cfg, task):
  """Lesion masks are scored without dilation; plausibility tasks carry their reference set"""
  d = cfg.metrics.toDict()
  if task.gtLesion:
    d['rmaDilationMm'] = 0.0
  if task.referenceSet:
    d['referenceSet'] = list(task.referenceSet)
  return libXV.MetricsConfig().initFromDict(d)

def _emptyTruthRow():
  nan = float('nan')
  return {'rma': nan, 'tpr_hit': nan, 'fpr_flag': nan, 'overlap': nan, 'degenerate_flag': True}

def scoreTask(cfg, bundle, task, seed, label, heatmaps, nWorkers=1):
  """Score rows (with provenance) plus threshold-sweep rows for one heatmap list"""
  masks = [task.groundTruth(bundle.subject(h.provenance['subjectId'])) for h in heatmaps]
  mcfg = metricsFor(cfg, task)
  live = [i for i, m in enumerate(masks) if m.nSet > 0]
  if len(live) < len(masks):
    libXV.log('{} / {}: {} subjects have an empty ground truth, scored as degenerate'.format(task.name, label, len(masks) - len(live)))
  scored = libXV.scoreHeatmaps([heatmaps[i] for i in live], [masks[i] for i in live], cfg.postprocess, mcfg,
                               bundle.atlas, task.tprTargets, nWorkers)
  byIndex = dict(zip(live, scored))

  rows = []
  sweep = []
  for i, h in enumerate(heatmaps):
    sid = h.provenance['subjectId']
    row = dict(byIndex.get(i, _emptyTruthRow()))
    row.update({'task': task.name, 'method': label, 'subject_id': sid, 'seed': seed, 'checkpoint_hash': h.provenance['netHash']})
    rows.append(row)
    if i in byIndex:
      for cutoff, (score, degenerate) in libXV.rmaSweep(h, masks[i], cfg.postprocess, mcfg.rmaDilationMm).items():
        sweep.append({'task': task.name, 'method': label, 'seed': seed, 'subject_id': sid,
                      'cutoff': cutoff, 'rma': score, 'degenerate_flag': bool(degenerate)})
  return rows, sweep

def evaluate(cfg, rd, bundle, tasks, heatmaps=None, nWorkers=1):
  """Score every heatmap. Reads them from heatmaps/ when not given.

  Writes scores/scores.csv, scores/aggregate.csv, scores/threshold_sweep.csv.
  Returns: EvalResult
  """
  rd.make()
  if heatmaps is None:
    heatmaps = readHeatmaps(cfg, rd, tasks)
  byName = {t.name: t for t in tasks}
  rows = []
  sweep = []
  for (taskName, seed, label) in sorted(heatmaps.keys()):
    r, s = scoreTask(cfg, bundle, byName[taskName], seed, label, heatmaps[(taskName, seed, label)], nWorkers)
    rows += r
    sweep += s

  result = libXV.EvalResult(rows)
  libXV.writeScores(rd.scorePath('scores.csv'), result.rows)
  result.aggregate().to_csv(rd.scorePath('aggregate.csv'), index=False, float_format='%.17g')
  sweepDf = pd.DataFrame(sweep, columns=SWEEP_COLUMNS).sort_values(['task', 'method', 'seed', 'subject_id', 'cutoff']).reset_index(drop=True)
  sweepDf.to_csv(rd.scorePath('threshold_sweep.csv'), index=False, float_format='%.17g')

  if cfg.stage.name == 'lesion':
    for task in tasks:
      lesionMaps(cfg, rd, bundle, task, heatmaps)
  return result

###
# Lesion-stage extras
###

def _processedMaps(cfg, heatmaps):
  return [libXV.postprocess(h, cfg.postprocess).scaled for h in heatmaps]

def lesionMaps(cfg, rd, bundle, task, heatmaps):
  """Group contrast (top vs bottom load quantile) and high-load mean maps, first seed"""
  seed = cfg.seeds.replicates[0]
  loadById = dict(zip(bundle.subjectIds, bundle.table.column(libXV.IDP_KIND.LesionLoad)))
  for m in cfg.methods:
    hs = heatmaps[(task.name, seed, m.label)]
    ids = [h.provenance['subjectId'] for h in hs]
    load = np.array([loadById[sid] for sid in ids])
    maps = _processedMaps(cfg, hs)

    try:
      eff = groupContrast(cfg, bundle, ids, load, maps, seed)
      libXV.writeVolume(os.path.join(rd.report, 'contrast_{}.vlab'.format(m.label)), eff)
    except libXV.DegenerateError as err:
      libXV.log('Skipping the {} load contrast: {}'.format(m.label, err))

    meanMap, meanMask = highLoadMeans(bundle, ids, load, maps)
    libXV.writeVolume(os.path.join(rd.report, 'highload_{}.vlab'.format(m.label)), meanMap)
  libXV.writeMask(os.path.join(rd.report, 'highload_mask.vlab'), meanMask)

def groupContrast(cfg, bundle, ids, load, maps, seed):
  """Effect size of top-quantile vs bottom-quantile load explanations, FWE-masked"""
  q = 100 * cfg.contrast.quantile
  hiCut = libXV.percentile(load, 100 - q)
  loCut = libXV.percentile(load, q)
  high = load >= hiCut
  low = load <= loCut
  if hiCut <= loCut:
    raise libXV.DegenerateError('load quantiles coincide ({})'.format(hiCut))
  keep = high | low
  contrast = high[keep].astype(np.float64)
  confounds = None
  if cfg.contrast.confounds:
    index = {sid: i for i, sid in enumerate(bundle.subjectIds)}
    rows = [index[sid] for sid, k in zip(ids, keep) if k]
    confounds = np.column_stack([bundle.table.column(name)[rows] for name in cfg.contrast.confounds])
  design = libXV.Design().initFromRaw(contrast, confounds)
  stat = libXV.permutedOLS(design, [v for v, k in zip(maps, keep) if k], cfg.contrast.nPerm, seed)
  return libXV.effectSizeMap([v for v, h in zip(maps, high) if h], [v for v, l in zip(maps, low) if l], stat, cfg.contrast.alpha)

def highLoadMeans(bundle, ids, load, maps, p=99.0):
  """Mean map and mean lesion mask (binarized at 0.5) of subjects at or above the p-th load percentile"""
  cut = libXV.percentile(load, p)
  picked = [i for i in range(len(ids)) if load[i] >= cut]
  meanMap = np.mean([maps[i].data for i in picked], axis=0)
  meanMask = np.mean([bundle.subject(ids[i]).lesionMask.membership for i in picked], axis=0) >= 0.5
  spacing = maps[0].spacingMm
  return libXV.Volume(meanMap, spacing), libXV.RegionMask(meanMask, spacing)

###
# Manifest
###

class RunManifest:
  """Config echo, seeds, content hashes of every artifact, tool version"""
  def __init__(self):
    self.config = None
    self.seeds = []
    self.hashes = {}
    self.version = VERSION

  def initFromDict(self, obj):
    self.config = obj['config']
    self.seeds = list(obj['seeds'])
    self.hashes = dict(obj['hashes'])
    self.version = obj.get('version', VERSION)
    return self

  def toDict(self):
    return {'config': self.config, 'seeds': self.seeds, 'hashes': self.hashes, 'version': self.version}

  def toNDJSON(self):
    return libXV.toNDJSON(self.toDict())

def hashTree(root):
  """Digest over (relative path, file digest) of every file under root"""
  lines = []
  for dirpath, dirnames, filenames in os.walk(root):
    dirnames.sort()
    for f in sorted(filenames):
      p = os.path.join(dirpath, f)
      lines.append('{} {}'.format(os.path.relpath(p, root), libXV.hashFile(p)))
  return libXV.hashString('\n'.join(lines))

def buildManifest(cfg, rd):
  m = RunManifest()
  m.config = cfg.toDict()
  m.seeds = list(cfg.seeds.replicates)
  m.hashes = {
    'cohort': hashTree(rd.cohort),
    'checkpoints': {f: libXV.hashFile(os.path.join(rd.checkpoints, f)) for f in sorted(os.listdir(rd.checkpoints)) if f.endswith('.xvck')},
    'heatmaps': {},
    'scores': {f: libXV.hashFile(rd.scorePath(f)) for f in sorted(os.listdir(rd.scores))},
  }
  for taskDir in sorted(glob.glob(os.path.join(rd.heatmaps, '*', 'seed*'))):
    m.hashes['heatmaps'][os.path.relpath(taskDir, rd.heatmaps)] = hashTree(taskDir)
  return m

def writeManifest(rd, manifest):
  libXV.writeJSON(rd.manifest, manifest.toDict())
  return rd.manifest

def readManifest(path):
  return RunManifest().initFromDict(libXV.readJSON(path))

###
# Whole stages
###

def runStage(cfg, stage=None, outRoot='out', nWorkers=1, report=True):
  """generate -> correct -> train -> explain -> evaluate (-> report), then the manifest.

  Returns: RunDir, EvalResult
  """
  if stage is not None:
    if stage not in STAGES:
      raise libXV.ConfigError('Unknown stage {} (expected one of {})'.format(stage, STAGES))
    cfg = cfg.withOverrides(stage=stage)
  stage = cfg.stage.name
  rd = RunDir(outRoot, cfg.runId).make()
  libXV.log('Stage {} into {}'.format(stage, rd.root))

  with stepContext(stage, 'generate'):
    bundle = generate(cfg, rd, nWorkers)
  with stepContext(stage, 'correct'):
    tasks = correct(cfg, rd, bundle, nWorkers)
  with stepContext(stage, 'train'):
    trainAll(cfg, rd, bundle, tasks, nWorkers)
  with stepContext(stage, 'explain'):
    heatmaps = explainAll(cfg, rd, bundle, tasks, nWorkers)
  with stepContext(stage, 'evaluate'):
    result = evaluate(cfg, rd, bundle, tasks, heatmaps, nWorkers)
  if report:
    import libReport
    with stepContext(stage, 'report'):
      libReport.report(cfg, rd)

  writeManifest(rd, buildManifest(cfg, rd))
  libXV.log('Stage {} done: {} score rows'.format(stage, len(result.rows)))
  return rd, result
