"""XAI validation: attribution methods

Every method maps (network, input, target output) to a heatmap with the
input's dims. The network-level functions take a (1, C, X, Y, Z) network
input and return an (X, Y, Z) array (summed over input channels);
explain() wraps them for a trained Model and a Volume.

Explanations are computed on the standardized network input. Methods that
need canonical networks (LRP, DeepLift, ExcitationBackprop) run on the
BN-folded copy of the model.
"""

import os

import numpy as np

import libXV.xv_parallel as parallel
from libXV.xv_utils import log, subRNG, ConfigError, DimensionError
from libXV.xv_ndjson import toNDJSON, writeJSON, readJSON
from libXV.xv_volume import Volume, upsample
from libXV import xv_io
from libXV import xv_lrp
from libXV import xv_net

# name -> default params
METHOD_PARAMS = {
  'Gradient': {},
  'InputXGradient': {},
  'SmoothGrad': {'noiseLevel': 0.1, 'n': 20, 'seed': None},
  'GuidedBackprop': {},
  'ExcitationBackprop': {},
  'GradCAM': {'tap': 'last'},
  'GuidedGradCAM': {'tap': 'last'},
  'DeepLift': {'baseline': 'training_mean', 'baselinePath': None},
  'LRP': {'composite': 'EpsilonPlus', 'eps': xv_lrp.DEFAULT_EPS},
}
METHODS = list(METHOD_PARAMS.keys())

# subRNG stream for SmoothGrad noise
_STREAM_SMOOTHGRAD = 3

SMOOTHGRAD_BATCH = 10

#####
# Method
#####

class Method:
  """One attribution method plus its parameters"""
  def __init__(self):
    self.name = None
    self.params = {}
    self.label = None
    self.composite = None

  def initFromRaw(self, name, label=None, **params):
    return self.initFromDict(dict(params, name=name, label=label))

  def initFromDict(self, obj):
    obj = dict(obj)
    name = obj.pop('name', None)
    if name not in METHOD_PARAMS:
      raise ConfigError('Unknown method {}'.format(name))
    label = obj.pop('label', None)
    defaults = METHOD_PARAMS[name]
    unknown = set(obj.keys()) - set(defaults.keys())
    if unknown:
      raise ConfigError('Method {}: unknown parameters {}'.format(name, sorted(unknown)))
    self.name = name
    self.params = dict(defaults)
    self.params.update(obj)
    self.validate()
    self.label = label or self._defaultLabel()
    return self

  def _defaultLabel(self):
    if self.name in ('GradCAM', 'GuidedGradCAM') and self.params['tap'] != 'last':
      return '{}_{}'.format(self.name, self.params['tap'])
    if self.name == 'LRP':
      return 'LRP_' + self.composite.name
    return self.name

  def validate(self):
    p = self.params
    if self.name == 'SmoothGrad':
      if not p['noiseLevel'] >= 0:
        raise ConfigError('SmoothGrad noiseLevel must be >= 0, got {}'.format(p['noiseLevel']))
      if int(p['n']) < 1:
        raise ConfigError('SmoothGrad n must be >= 1, got {}'.format(p['n']))
      p['n'] = int(p['n'])
    elif self.name == 'DeepLift':
      if p['baseline'] not in Baseline.KINDS:
        raise ConfigError('Unknown DeepLift baseline {}'.format(p['baseline']))
      if p['baseline'] == Baseline.CUSTOM and not p['baselinePath']:
        raise ConfigError('A custom DeepLift baseline needs baselinePath')
    elif self.name == 'LRP':
      c = p['composite']
      if isinstance(c, str):
        self.composite = xv_lrp.presetComposite(c, p['eps'])
      elif isinstance(c, dict):
        self.composite = xv_lrp.compositeFromDict(c)
      else:
        raise ConfigError('LRP composite must be a preset name or a rule table, got {}'.format(c))
    return True

  def toDict(self):
    d = {'name': self.name, 'label': self.label}
    d.update(self.params)
    return d

  def toNDJSON(self):
    return toNDJSON(self.toDict())

def defaultMethods():
  """The full suite, one entry per LRP preset"""
  methods = [Method().initFromRaw(name) for name in METHODS if name != 'LRP']
  methods += [Method().initFromRaw('LRP', composite=c) for c in xv_lrp.PRESETS]
  return methods

#####
# Baseline
#####

class Baseline:
  """DeepLift reference input, as an image (before standardization)"""
  ZERO = 'zero'
  TRAINING_MEAN = 'training_mean'
  CUSTOM = 'custom'
  KINDS = (ZERO, TRAINING_MEAN, CUSTOM)

  def __init__(self, kind=ZERO, volume=None):
    if kind not in Baseline.KINDS:
      raise ConfigError('Unknown baseline {}'.format(kind))
    self.kind = kind
    self.volume = volume

  @staticmethod
  def trainingMean(volumes, idx=None):
    """Per-voxel mean over volumes (restricted to idx)"""
    if idx is not None:
      volumes = [volumes[i] for i in idx]
    if not volumes:
      raise ConfigError('Training mean over no images')
    data = np.mean([v.data for v in volumes], axis=0)
    return Baseline(Baseline.TRAINING_MEAN, Volume(data, volumes[0].spacingMm))

  @staticmethod
  def fromPath(path):
    return Baseline(Baseline.CUSTOM, xv_io.readVolume(path))

  def resolve(self, v):
    """Baseline image on v's grid"""
    if self.kind == Baseline.ZERO:
      return Volume.zeros(v.dims, v.spacingMm)
    if self.volume is None:
      raise ConfigError('Baseline {} has no image'.format(self.kind))
    if tuple(self.volume.dims) != tuple(v.dims):
      raise DimensionError('Baseline dims {} vs input {}'.format(self.volume.dims, v.dims))
    return self.volume

#####
# Heatmap
#####

class Heatmap:
  """Attribution map on the input grid with its provenance record"""
  def __init__(self, volume, provenance):
    self.volume = volume
    self.provenance = provenance

  @property
  def data(self):
    return self.volume.data

  @property
  def dims(self):
    return self.volume.dims

def writeHeatmap(path, h):
  """VLAB at path, provenance in the .json sibling"""
  xv_io.writeVolume(path, h.volume)
  writeJSON(_provenancePath(path), h.provenance)
  return path

def readHeatmap(path):
  return Heatmap(xv_io.readVolume(path), readJSON(_provenancePath(path)))

def _provenancePath(path):
  root, _ = os.path.splitext(path)
  return root + '.json'

#####
# Network-level methods
#####

def _oneHot(out, target):
  if out.ndim != 2 or not (0 <= target < out.shape[1]):
    raise DimensionError('Target {} is not an output of shape {}'.format(target, out.shape))
  d = np.zeros_like(out)
  d[:, target] = 1.0
  return d

def _channelSum(a):
  return a[0].sum(axis=0)

def _inputGrad(net, x, target, reluMode='plain'):
  out, cache = xv_net.forward(net, x, train=False)
  _, dx, _, _ = xv_net.backward(net, cache, _oneHot(out, target), reluMode=reluMode)
  return dx

def gradient(net, x, target=0):
  return _channelSum(_inputGrad(net, x, target))

def inputXGradient(net, x, target=0):
  return _channelSum(x * _inputGrad(net, x, target))

def smoothGrad(net, x, noiseLevel=0.1, n=20, seed=0, target=0):
  """Mean input gradient over n noisy copies, noise sd = noiseLevel * (max(x) - min(x))"""
  if n < 1:
    raise ConfigError('SmoothGrad n must be >= 1, got {}'.format(n))
  if noiseLevel < 0:
    raise ConfigError('SmoothGrad noiseLevel must be >= 0, got {}'.format(noiseLevel))
  sigma = noiseLevel * float(x.max() - x.min())
  if sigma == 0:
    return gradient(net, x, target)

  rng = subRNG(seed, _STREAM_SMOOTHGRAD)
  noise = rng.normal(0.0, sigma, size=(n,) + x.shape[1:])
  acc = np.zeros(x.shape[1:])
  # eval-mode samples are independent, so one batched backward gives per-sample gradients
  for i in range(0, n, SMOOTHGRAD_BATCH):
    batch = x + noise[i:i + SMOOTHGRAD_BATCH]
    acc += _inputGrad(net, batch, target).sum(axis=0)
  return (acc / n).sum(axis=0)

def guidedBackprop(net, x, target=0):
  return _channelSum(_inputGrad(net, x, target, reluMode='guided'))

def resolveTap(net, tap):
  taps = net.tapNames()
  if not taps:
    raise ConfigError('Network has no residual blocks to tap')
  if tap == 'last':
    return taps[-1]
  if tap not in taps:
    raise ConfigError('Unknown tap {} (have {})'.format(tap, taps))
  return tap

def gradCAM(net, x, tap='last', target=0):
  """ReLU of the gradient-weighted channel sum at tap, upsampled to the input dims"""
  tap = resolveTap(net, tap)
  out, cache = xv_net.forward(net, x, train=False)
  _, _, tapGrads, _ = xv_net.backward(net, cache, _oneHot(out, target))
  A = cache.taps[tap][0]
  alpha = tapGrads[tap][0].mean(axis=(1, 2, 3))
  cam = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
  return upsample(Volume(cam), x.shape[2:]).data

def guidedGradCAM(net, x, tap='last', target=0):
  return guidedBackprop(net, x, target) * gradCAM(net, x, tap, target)

def deepLiftRescale(net, x, baseline, target=0):
  """Rescale-rule multipliers times (x - baseline).

  Returns: heatmap, ledger, delta where delta = f(x) - f(baseline) and
    sum(heatmap) + ledger = delta. The ledger holds the output change left
    over where the Rescale rule fell back to the gradient.
  """
  if baseline.shape != x.shape:
    raise DimensionError('Baseline shape {} vs input {}'.format(baseline.shape, x.shape))
  out, cache = xv_net.forward(net, x, train=False)
  outRef, refCache = xv_net.forward(net, baseline, train=False)
  _, mult, _, ledger = xv_net.backward(net, cache, _oneHot(out, target), reluMode='rescale', refCache=refCache)
  delta = float(out[0, target] - outRef[0, target])
  return _channelSum((x - baseline) * mult), ledger, delta

def lrp(net, x, composite, target=0):
  R, _ = xv_lrp.lrp(net, x, composite, target)
  return _channelSum(R)

def excitationBackprop(net, x, target=0):
  """LRP with z+ at every layer"""
  return lrp(net, x, xv_lrp.uniformComposite(xv_lrp.ZPlus(), 'ExcitationBackprop'), target)

#####
# Model-level entry points
#####

def explain(model, volume, method, target=0, baseline=None, seed=0, subjectId=None, netHash=None):
  """Heatmap of method for one subject image.

  target: output index (the regression output, or the logit for classifiers)
  baseline: Baseline for DeepLift (zero when omitted and the method asks for zero)
  """
  x = model.normalizeVolume(volume)
  name = method.name
  p = method.params
  extra = {}
  if name in ('LRP', 'DeepLift', 'ExcitationBackprop'):
    net = model.foldedNet()
  else:
    net = model.net

  if name == 'Gradient':
    h = gradient(net, x, target)
  elif name == 'InputXGradient':
    h = inputXGradient(net, x, target)
  elif name == 'SmoothGrad':
    h = smoothGrad(net, x, p['noiseLevel'], p['n'], seed if p['seed'] is None else p['seed'], target)
  elif name == 'GuidedBackprop':
    h = guidedBackprop(net, x, target)
  elif name == 'ExcitationBackprop':
    h = excitationBackprop(net, x, target)
  elif name == 'GradCAM':
    h = gradCAM(net, x, p['tap'], target)
  elif name == 'GuidedGradCAM':
    h = guidedGradCAM(net, x, p['tap'], target)
  elif name == 'DeepLift':
    if p['baseline'] == Baseline.ZERO:
      baseline = Baseline(Baseline.ZERO)
    elif p['baseline'] == Baseline.CUSTOM:
      baseline = Baseline.fromPath(p['baselinePath'])
    elif baseline is None:
      raise ConfigError('DeepLift with a {} baseline needs the baseline image'.format(p['baseline']))
    ref = model.normalizeVolume(baseline.resolve(volume))
    h, ledger, delta = deepLiftRescale(net, x, ref, target)
    extra = {'ledger': ledger, 'delta': delta}
  elif name == 'LRP':
    h = lrp(net, x, method.composite, target)
  else:
    raise ConfigError('Unknown method {}'.format(name))

  provenance = {
    'method': method.label,
    'params': method.toDict(),
    'target': int(target),
    'netHash': netHash or model.net.hash(),
    'seed': seed,
    'subjectId': subjectId,
  }
  provenance.update(extra)
  return Heatmap(Volume(h, volume.spacingMm), provenance)

class _ExplainTask(parallel.ParallelTask):
  def __init__(self, model, volumes, subjectIds, methods, target, baseline, seed, netHash):
    self.model = model
    self.volumes = volumes
    self.subjectIds = subjectIds
    self.methods = methods
    self.target = target
    self.baseline = baseline
    self.seed = seed
    self.netHash = netHash

  def run(self):
    out = []
    for v, sid in zip(self.volumes, self.subjectIds):
      out.append([explain(self.model, v, m, self.target, self.baseline, self.seed, sid, self.netHash) for m in self.methods])
    return out

def explainMany(model, volumes, subjectIds, methods, target=0, baseline=None, seed=0, nWorkers=1):
  """Heatmaps for every (subject, method).

  Returns: {method label: [Heatmap per subject, in input order]}
  """
  labels = [m.label for m in methods]
  if len(set(labels)) != len(labels):
    raise ConfigError('Method labels must be unique, got {}'.format(labels))
  if len(volumes) != len(subjectIds):
    raise DimensionError('{} volumes for {} subject ids'.format(len(volumes), len(subjectIds)))
  netHash = model.net.hash()
  model.foldedNet()
  chunks = np.array_split(np.arange(len(volumes)), max(1, min(nWorkers, len(volumes))))
  tasks = [_ExplainTask(model, [volumes[i] for i in c], [subjectIds[i] for i in c], methods, target, baseline, seed, netHash)
           for c in chunks if len(c)]
  log('Explaining {} subjects with {} methods'.format(len(volumes), len(methods)))
  results = parallel.mapOrRaise(tasks, nWorkers, 'explanation')
  rows = [r for chunk in results for r in chunk]
  return {label: [r[j] for r in rows] for j, label in enumerate(labels)}
