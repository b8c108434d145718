"""XAI validation: training

Adam with a one-cycle learning rate, MSE (regression on z-scored targets)
or BCE on the logit (classification). Images are standardized with one
scalar mean/sd taken from the training split; the constants travel with
the checkpoint.

Checkpoint layout: magic "XVCK", u32 header length, UTF-8 JSON header,
then every state array (header order) as little-endian f64.
"""

import json
import math
import struct

import numpy as np
import pandas as pd

from libXV.xv_utils import log, logDebug, subRNG, ConfigError, DimensionError, DegenerateError, TrainingError, XVError
from libXV.xv_ndjson import toNDJSON
from libXV import xv_net

LOSSES = ('mse', 'bce')
TASKS = ('regression', 'classification')

CHECKPOINT_MAGIC = b'XVCK'

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

class TrainConfig:
  def __init__(self):
    self.steps = 1000
    self.batchSize = 8
    self.maxLr = 3e-3
    self.warmupFrac = 0.3
    self.initDiv = 25.0
    self.finalRatio = 1e-3
    self.loss = 'mse'
    self.weightDecay = 0.0
    self.seed = 0
    self.splits = {'train': 0.7, 'val': 0.15, 'test': 0.15}
    self.evalEvery = 100

  def initFromDict(self, obj):
    known = {'steps', 'batchSize', 'maxLr', 'warmupFrac', 'initDiv', 'finalRatio', 'loss',
             'weightDecay', 'seed', 'splits', 'evalEvery'}
    unknown = set(obj.keys()) - known
    if unknown:
      raise ConfigError('Unknown train keys: {}'.format(sorted(unknown)))
    self.steps = int(obj.get('steps', self.steps))
    self.batchSize = int(obj.get('batchSize', self.batchSize))
    self.maxLr = float(obj.get('maxLr', self.maxLr))
    self.warmupFrac = float(obj.get('warmupFrac', self.warmupFrac))
    self.initDiv = float(obj.get('initDiv', self.initDiv))
    self.finalRatio = float(obj.get('finalRatio', self.finalRatio))
    self.loss = obj.get('loss', self.loss)
    self.weightDecay = float(obj.get('weightDecay', self.weightDecay))
    self.seed = int(obj.get('seed', self.seed))
    self.splits = dict(obj.get('splits', self.splits))
    self.evalEvery = int(obj.get('evalEvery', self.evalEvery))
    self.validate()
    return self

  def toDict(self):
    return {
      'steps': self.steps,
      'batchSize': self.batchSize,
      'maxLr': self.maxLr,
      'warmupFrac': self.warmupFrac,
      'initDiv': self.initDiv,
      'finalRatio': self.finalRatio,
      'loss': self.loss,
      'weightDecay': self.weightDecay,
      'seed': self.seed,
      'splits': dict(self.splits),
      'evalEvery': self.evalEvery,
    }

  def toNDJSON(self):
    return toNDJSON(self.toDict())

  def validate(self):
    if self.steps < 0:
      raise ConfigError('steps must be >= 0')
    if self.batchSize < 1:
      raise ConfigError('batchSize must be >= 1')
    if self.maxLr <= 0 or self.initDiv <= 0 or self.finalRatio < 0:
      raise ConfigError('Need maxLr > 0, initDiv > 0, finalRatio >= 0')
    if not (0 <= self.warmupFrac <= 1):
      raise ConfigError('warmupFrac must be in [0, 1]')
    if self.loss not in LOSSES:
      raise ConfigError('Unknown loss {}'.format(self.loss))
    if self.weightDecay < 0:
      raise ConfigError('weightDecay must be >= 0')
    if set(self.splits.keys()) != {'train', 'val', 'test'}:
      raise ConfigError('splits needs exactly train, val and test')
    if min(self.splits.values()) < 0 or abs(sum(self.splits.values()) - 1.0) > 1e-9:
      raise ConfigError('split fractions must be >= 0 and sum to 1, got {}'.format(self.splits))
    if self.evalEvery < 1:
      raise ConfigError('evalEvery must be >= 1')
    return True

def oneCycleLr(cfg, step):
  """Learning rate at step (0-based).

  Linear from maxLr / initDiv up to maxLr at the end of warmup, then
  cosine down to maxLr * finalRatio at the last step.
  """
  last = max(cfg.steps - 1, 0)
  peak = int(round(cfg.warmupFrac * last))
  start = cfg.maxLr / cfg.initDiv
  final = cfg.maxLr * cfg.finalRatio
  if step <= peak:
    if peak == 0:
      return cfg.maxLr
    return start + (cfg.maxLr - start) * step / peak
  frac = min(1.0, (step - peak) / (last - peak))
  return final + (cfg.maxLr - final) * 0.5 * (1 + math.cos(math.pi * frac))

#####
# Data
#####

class Dataset:
  """Images (B, 1, X, Y, Z) plus one target per image"""
  def __init__(self, volumes, targets, subjectIds=None):
    if isinstance(volumes, np.ndarray):
      x = np.asarray(volumes, dtype=np.float64)
      if x.ndim == 4:
        x = x[:, None]
    else:
      x = np.stack([v.data for v in volumes])[:, None]
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape[0] != targets.size:
      raise DimensionError('{} images for {} targets'.format(x.shape[0], targets.size))
    self.x = x
    self.targets = targets
    self.subjectIds = list(subjectIds) if subjectIds is not None else [str(i) for i in range(targets.size)]

  @property
  def n(self):
    return self.targets.size

  def split(self, cfg):
    """Deterministic train/val/test indices (each sorted)"""
    order = subRNG(cfg.seed, 7).permutation(self.n)
    nTrain = int(round(cfg.splits['train'] * self.n))
    nVal = int(round(cfg.splits['val'] * self.n))
    nTrain = max(1, min(nTrain, self.n))
    nVal = min(nVal, self.n - nTrain)
    return {
      'train': np.sort(order[:nTrain]),
      'val': np.sort(order[nTrain:nTrain + nVal]),
      'test': np.sort(order[nTrain + nVal:]),
    }

class Model:
  """A network plus the normalization constants it was trained with"""
  def __init__(self, net, task):
    if task not in TASKS:
      raise ConfigError('Unknown task {}'.format(task))
    self.net = net
    self.task = task
    self.inputMean = 0.0
    self.inputSd = 1.0
    self.targetMean = 0.0
    self.targetSd = 1.0
    self.seed = None
    self.step = 0
    self._folded = None
    self._foldedVersion = None

  def foldedNet(self):
    """BN-folded copy of net, rebuilt when net changes"""
    if not self.net.hasBatchNorm():
      return self.net
    if self._folded is None or self._foldedVersion != self.net.version:
      self._folded = xv_net.foldBatchNorm(self.net)
      self._foldedVersion = self.net.version
    return self._folded

  def normalize(self, x):
    return (np.asarray(x, dtype=np.float64) - self.inputMean) / self.inputSd

  def normalizeVolume(self, v):
    """Volume -> (1, 1, X, Y, Z) network input"""
    return self.normalize(v.data)[None, None]

  def norms(self):
    return {'inputMean': self.inputMean, 'inputSd': self.inputSd,
            'targetMean': self.targetMean, 'targetSd': self.targetSd}

def initModel(netSpec, seed):
  task = 'classification' if netSpec.head == 'sigmoid' else 'regression'
  model = Model(xv_net.initNetwork(netSpec, seed), task)
  model.seed = seed
  return model

def _sigmoid(z):
  return 0.5 * (1 + np.tanh(0.5 * z))

def _lossAndGrad(out, t, loss):
  y = out[:, 0]
  B = y.size
  if loss == 'mse':
    r = y - t
    value = float(np.mean(r ** 2))
    d = 2 * r / B
  else:
    value = float(np.mean(np.logaddexp(0.0, y) - t * y))
    d = (_sigmoid(y) - t) / B
  dOut = np.zeros_like(out)
  dOut[:, 0] = d
  return value, dOut

class _Adam:
  def __init__(self, params):
    self.m = {k: np.zeros_like(v) for k, v in params.items()}
    self.v = {k: np.zeros_like(v) for k, v in params.items()}
    self.t = 0

  def step(self, params, grads, lr, weightDecay):
    self.t += 1
    c1 = 1 - ADAM_BETA1 ** self.t
    c2 = 1 - ADAM_BETA2 ** self.t
    for k, p in params.items():
      g = grads[k]
      if weightDecay:
        g = g + weightDecay * p
      self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
      self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * g * g
      p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + ADAM_EPS)

def train(model, dataset, cfg, historyPath=None):
  """Fit model.net in place.

  Returns: model, history DataFrame (step, lr, train_loss, val_metric)
  """
  cfg.validate()
  if (model.task == 'classification') != (cfg.loss == 'bce'):
    raise ConfigError('loss {} does not fit a {} model'.format(cfg.loss, model.task))
  splits = dataset.split(cfg)
  trainIdx = splits['train']

  xTrain = dataset.x[trainIdx]
  model.inputMean = float(xTrain.mean())
  sd = float(xTrain.std())
  model.inputSd = sd if sd > 0 else 1.0

  t = dataset.targets
  if model.task == 'regression':
    model.targetMean = float(t[trainIdx].mean())
    tsd = float(t[trainIdx].std(ddof=1)) if len(trainIdx) > 1 else 0.0
    model.targetSd = tsd if tsd > 0 else 1.0
    tn = (t - model.targetMean) / model.targetSd
  else:
    if not np.all((t == 0) | (t == 1)):
      raise ConfigError('Classification targets must be 0/1')
    tn = t

  net = model.net
  params = net.params()
  adam = _Adam(params)
  rng = subRNG(cfg.seed, 1)
  batchSize = min(cfg.batchSize, len(trainIdx))
  logEvery = max(1, cfg.steps // 10)
  rows = []
  lastLoss = float('nan')
  for step in range(cfg.steps):
    lr = oneCycleLr(cfg, step)
    idx = rng.choice(trainIdx, size=batchSize, replace=False)
    out, cache = xv_net.forward(net, model.normalize(dataset.x[idx]), train=True)
    lastLoss, dOut = _lossAndGrad(out, tn[idx], cfg.loss)
    if not np.isfinite(lastLoss):
      raise TrainingError('Loss is {} at step {} (lr {:.3g}, batch {})'.format(lastLoss, step, lr, list(idx)))
    grads, _, _, _ = xv_net.backward(net, cache, dOut)
    adam.step(params, grads, lr, cfg.weightDecay)
    net.touch()

    if (step + 1) % cfg.evalEvery == 0 or step == cfg.steps - 1:
      rows.append({'step': step + 1, 'lr': lr, 'train_loss': lastLoss, 'val_metric': _valMetric(model, dataset, splits['val'])})
    if (step + 1) % logEvery == 0:
      log('train: step {}/{} lr {:.2e} loss {:.4f}'.format(step + 1, cfg.steps, lr, lastLoss))
    else:
      logDebug('train: step {} loss {:.4f}'.format(step + 1, lastLoss))

  model.step = cfg.steps
  model.seed = cfg.seed
  history = pd.DataFrame(rows, columns=['step', 'lr', 'train_loss', 'val_metric'])
  if historyPath:
    history.to_csv(historyPath, index=False, float_format='%.17g')
  return model, history

def _valMetric(model, dataset, idx):
  if len(idx) == 0:
    return float('nan')
  perf = evaluatePerformance(model, dataset, idx)
  return perf['r2'] if model.task == 'regression' else perf['accuracy']

#####
# Inference and performance
#####

def predict(model, x):
  """Regression: targets on the original scale. Classification: P(label = 1)."""
  if not isinstance(x, np.ndarray):
    x = np.stack([v.data for v in x])
  raw = xv_net.predictRaw(model.net, model.normalize(x))[:, 0]
  if model.task == 'regression':
    return raw * model.targetSd + model.targetMean
  return _sigmoid(raw)

def predictLabels(model, x):
  return (predict(model, x) >= 0.5).astype(np.int64)

def r2Score(y, yHat):
  y = np.asarray(y, dtype=np.float64)
  ssTot = ((y - y.mean()) ** 2).sum()
  ssRes = ((y - yHat) ** 2).sum()
  if ssTot == 0:
    return 0.0 if ssRes == 0 else -np.inf
  return float(1 - ssRes / ssTot)

def evaluatePerformance(model, dataset, idx):
  """Regression: mae, abs_err_sd, r2. Classification: accuracy, precision, recall."""
  idx = np.asarray(idx)
  if len(idx) == 0:
    raise DegenerateError('No subjects to evaluate')
  y = dataset.targets[idx]
  if model.task == 'regression':
    yHat = predict(model, dataset.x[idx])
    err = np.abs(y - yHat)
    return {'n': len(idx), 'mae': float(err.mean()), 'abs_err_sd': float(err.std()), 'r2': r2Score(y, yHat)}
  lab = predictLabels(model, dataset.x[idx])
  tp = int(((lab == 1) & (y == 1)).sum())
  fp = int(((lab == 1) & (y == 0)).sum())
  fn = int(((lab == 0) & (y == 1)).sum())
  return {
    'n': len(idx),
    'accuracy': float((lab == y).mean()),
    'precision': tp / (tp + fp) if tp + fp else 0.0,
    'recall': tp / (tp + fn) if tp + fn else 0.0,
  }

#####
# Checkpoints
#####

def writeCheckpoint(path, model):
  net = model.net
  state = net.stateDict()
  names = list(state.keys())
  header = {
    'spec': net.spec.toDict(),
    'specHash': net.spec.hash(),
    'task': model.task,
    'seed': model.seed,
    'step': model.step,
    'norms': model.norms(),
    'params': [{'name': k, 'shape': list(state[k].shape)} for k in names],
  }
  blob = json.dumps(header, sort_keys=True).encode('utf-8')
  with open(path, 'wb') as out:
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack('<I', len(blob)))
    out.write(blob)
    for k in names:
      out.write(np.ascontiguousarray(state[k], dtype='<f8').tobytes())
  return path

def readCheckpoint(path):
  with open(path, 'rb') as inStream:
    if inStream.read(4) != CHECKPOINT_MAGIC:
      raise XVError('Not a checkpoint: {}'.format(path))
    (n,) = struct.unpack('<I', inStream.read(4))
    header = json.loads(inStream.read(n).decode('utf-8'))
    payload = inStream.read()

  spec = xv_net.NetSpec().initFromDict(header['spec'])
  if spec.hash() != header['specHash']:
    raise XVError('Spec hash mismatch in {}'.format(path))
  state = {}
  offset = 0
  for p in header['params']:
    count = int(np.prod(p['shape']))
    arr = np.frombuffer(payload, dtype='<f8', count=count, offset=offset).reshape(p['shape'])
    state[p['name']] = arr.astype(np.float64)
    offset += count * 8
  if offset != len(payload):
    raise XVError('Checkpoint payload has {} trailing bytes'.format(len(payload) - offset))

  model = Model(xv_net.Network(spec), header['task'])
  model.net.loadStateDict(state)
  for k, v in header['norms'].items():
    setattr(model, k, float(v))
  model.seed = header['seed']
  model.step = header['step']
  return model
