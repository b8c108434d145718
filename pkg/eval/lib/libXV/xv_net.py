"""XAI validation: a small residual CNN in numpy

Arrays are (batch, channels, x, y, z), float64 throughout. 2D networks
(ndim = 2) run on volumes with nz = 1 and use kernels of depth 1.

Layers know how to run forward, how to run backward (exact reverse mode),
and expose enough of their internals for rule-based relevance propagation.
"""

import copy

import numpy as np

from libXV.xv_utils import subRNG, hashDict, hashArrays, ConfigError, DimensionError, XVError
from libXV.xv_ndjson import toNDJSON

LAYER_TYPES = ('conv', 'bn', 'relu', 'resblock', 'gap', 'flatten', 'dense')
HEADS = ('linear', 'sigmoid')
RELU_MODES = ('plain', 'guided', 'rescale')

# DeepLift Rescale falls back to the gradient below this input difference
RESCALE_MIN_DELTA = 1e-9

#####
# Spec
#####

class NetSpec:
  """Layer list plus input geometry.

  Layer dicts:
    {'type': 'conv', 'outCh': 8, 'kernel': 3, 'stride': 1, 'bias': True}
    {'type': 'bn'}
    {'type': 'relu'}
    {'type': 'resblock', 'outCh': 16, 'stride': 2, 'kernel': 3, 'batchNorm': True}
    {'type': 'gap'}   (or {'type': 'flatten'})
    {'type': 'dense', 'out': 1, 'bias': True}
  """
  def __init__(self):
    self.ndim = 3
    self.inChannels = 1
    self.inputDims = None
    self.layers = []
    self.head = 'linear'
    self.bnEps = 1e-5
    self.bnMomentum = 0.1

  def initFromDict(self, obj):
    self.ndim = int(obj.get('ndim', 3))
    self.inChannels = int(obj.get('inChannels', 1))
    self.inputDims = tuple(int(d) for d in obj['inputDims'])
    self.layers = [dict(l) for l in obj['layers']]
    self.head = obj.get('head', 'linear')
    self.bnEps = float(obj.get('bnEps', 1e-5))
    self.bnMomentum = float(obj.get('bnMomentum', 0.1))
    self.validate()
    return self

  def toDict(self):
    return {
      'ndim': self.ndim,
      'inChannels': self.inChannels,
      'inputDims': list(self.inputDims),
      'layers': copy.deepcopy(self.layers),
      'head': self.head,
      'bnEps': self.bnEps,
      'bnMomentum': self.bnMomentum,
    }

  def toNDJSON(self):
    return toNDJSON(self.toDict())

  def hash(self):
    return hashDict(self.toDict())

  def kernel3(self, k):
    return (k, k, k) if self.ndim == 3 else (k, k, 1)

  def stride3(self, s):
    return (s, s, s) if self.ndim == 3 else (s, s, 1)

  def validate(self):
    """Chain channels and spatial dims through the layers. Raises ConfigError."""
    if self.ndim not in (2, 3):
      raise ConfigError('ndim must be 2 or 3')
    if len(self.inputDims) != 3 or min(self.inputDims) < 1:
      raise ConfigError('inputDims must be 3 positive ints')
    if self.ndim == 2 and self.inputDims[2] != 1:
      raise ConfigError('2D networks need inputDims with nz = 1, got {}'.format(self.inputDims))
    if self.head not in HEADS:
      raise ConfigError('Unknown head {}'.format(self.head))
    if not self.layers:
      raise ConfigError('Empty layer list')

    ch = self.inChannels
    dims = tuple(self.inputDims)
    flat = False
    prev = None
    for i, l in enumerate(self.layers):
      t = l.get('type')
      if t not in LAYER_TYPES:
        raise ConfigError('Layer {}: unknown type {}'.format(i, t))
      if flat and t not in ('dense', 'relu'):
        raise ConfigError('Layer {}: {} after global pooling'.format(i, t))
      if t == 'conv' or t == 'resblock':
        k = int(l.get('kernel', 3))
        s = int(l.get('stride', 1))
        if k < 1 or k % 2 == 0:
          raise ConfigError('Layer {}: kernel must be odd, got {}'.format(i, k))
        if s < 1:
          raise ConfigError('Layer {}: stride must be >= 1'.format(i))
        if int(l.get('outCh', 0)) < 1:
          raise ConfigError('Layer {}: outCh must be >= 1'.format(i))
        dims = convOutDims(dims, self.kernel3(k), self.stride3(s), padFor(self.kernel3(k)))
        if min(dims) < 1:
          raise ConfigError('Layer {}: spatial dims collapse to {}'.format(i, dims))
        ch = int(l['outCh'])
      elif t == 'bn':
        if prev is None:
          raise ConfigError('Layer {}: bn cannot be the first layer'.format(i))
      elif t == 'gap':
        flat = True
      elif t == 'flatten':
        flat = True
        ch = ch * int(np.prod(dims))
      elif t == 'dense':
        if not flat:
          raise ConfigError('Layer {}: dense needs a preceding gap or flatten'.format(i))
        if int(l.get('out', 0)) < 1:
          raise ConfigError('Layer {}: out must be >= 1'.format(i))
        ch = int(l['out'])
      prev = t
    return True

def tinyResNetSpec(inputDims, width=8, nBlocks=3, head='linear', inChannels=1, batchNorm=True):
  """Stem conv + nBlocks ResBlocks (widths w, 2w, 2w, ...; later blocks stride 2) + GAP + Dense"""
  inputDims = tuple(int(d) for d in inputDims)
  layers = [{'type': 'conv', 'outCh': width, 'kernel': 3, 'stride': 1, 'bias': not batchNorm}]
  if batchNorm:
    layers.append({'type': 'bn'})
  layers.append({'type': 'relu'})
  for b in range(nBlocks):
    layers.append({'type': 'resblock', 'outCh': width if b == 0 else 2 * width,
                   'stride': 1 if b == 0 else 2, 'kernel': 3, 'batchNorm': batchNorm})
  layers += [{'type': 'gap'}, {'type': 'dense', 'out': 1, 'bias': True}]
  return NetSpec().initFromDict({
    'ndim': 2 if inputDims[2] == 1 else 3,
    'inChannels': inChannels,
    'inputDims': list(inputDims),
    'layers': layers,
    'head': head,
  })

#####
# Convolution kernels
#####

def padFor(kernel):
  return tuple(k // 2 for k in kernel)

def convOutDims(inDims, kernel, stride, pad):
  return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(inDims, kernel, stride, pad))

def _pad(x, pad):
  if not any(pad):
    return x
  return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))

def _window(xp, offset, outDims, stride):
  """Strided view of xp seen by kernel tap `offset` (a view, writable)"""
  return xp[(slice(None), slice(None)) + tuple(slice(a, a + s * (o - 1) + 1, s) for a, o, s in zip(offset, outDims, stride))]

def _offsets(kernel):
  return np.ndindex(*kernel)

def convForward(x, W, stride, pad):
  """Cross-correlation without bias. x (B, Ci, ...), W (Co, Ci, kx, ky, kz)"""
  if x.shape[1] != W.shape[1]:
    raise DimensionError('conv expects {} input channels, got {}'.format(W.shape[1], x.shape[1]))
  outDims = convOutDims(x.shape[2:], W.shape[2:], stride, pad)
  xp = _pad(x, pad)
  acc = np.zeros((x.shape[0],) + outDims + (W.shape[0],))
  for off in _offsets(W.shape[2:]):
    acc += np.tensordot(_window(xp, off, outDims, stride), W[(slice(None), slice(None)) + off], axes=([1], [1]))
  return np.ascontiguousarray(np.moveaxis(acc, -1, 1))

def convAdjoint(g, W, stride, pad, inDims):
  """Transpose of convForward applied to g (B, Co, ...)"""
  B = g.shape[0]
  padded = tuple(n + 2 * p for n, p in zip(inDims, pad))
  dxp = np.zeros((B, W.shape[1]) + padded)
  outDims = g.shape[2:]
  gl = np.moveaxis(g, 1, -1)
  for off in _offsets(W.shape[2:]):
    contrib = np.tensordot(gl, W[(slice(None), slice(None)) + off], axes=([4], [0]))
    view = _window(dxp, off, outDims, stride)
    view += np.moveaxis(contrib, -1, 1)
  crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, inDims))
  return np.ascontiguousarray(dxp[crop])

def convWeightGrad(g, x, kernel, stride, pad):
  xp = _pad(x, pad)
  outDims = g.shape[2:]
  dW = np.zeros((g.shape[1], x.shape[1]) + tuple(kernel))
  for off in _offsets(kernel):
    dW[(slice(None), slice(None)) + off] = np.tensordot(g, _window(xp, off, outDims, stride), axes=([0, 2, 3, 4], [0, 2, 3, 4]))
  return dW

#####
# Layers
#####

class Conv:
  kind = 'conv'

  def __init__(self, name, inCh, outCh, kernel, stride, bias):
    self.name = name
    self.kernel = tuple(kernel)
    self.stride = tuple(stride)
    self.pad = padFor(self.kernel)
    self.weight = np.zeros((outCh, inCh) + self.kernel)
    self.bias = np.zeros(outCh) if bias else None

  def init(self, rng):
    fanIn = int(np.prod(self.weight.shape[1:]))
    self.weight = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / fanIn)

  def params(self):
    p = {self.name + '.weight': self.weight}
    if self.bias is not None:
      p[self.name + '.bias'] = self.bias
    return p

  def buffers(self):
    return {}

  def linear(self, x, W=None):
    return convForward(x, self.weight if W is None else W, self.stride, self.pad)

  def adjoint(self, g, inDims, W=None):
    return convAdjoint(g, self.weight if W is None else W, self.stride, self.pad, inDims)

  def forward(self, x, train, cache):
    y = self.linear(x)
    if self.bias is not None:
      y += self.bias.reshape(1, -1, 1, 1, 1)
    cache.append(_Entry(self, x, y))
    return y

  def backward(self, dy, entry, ctx, ref):
    ctx.grads[self.name + '.weight'] = convWeightGrad(dy, entry.x, self.kernel, self.stride, self.pad)
    if self.bias is not None:
      ctx.grads[self.name + '.bias'] = dy.sum(axis=(0, 2, 3, 4))
    return self.adjoint(dy, entry.x.shape[2:])

class BatchNorm:
  kind = 'bn'

  def __init__(self, name, ch, eps, momentum):
    self.name = name
    self.eps = eps
    self.momentum = momentum
    self.gamma = np.ones(ch)
    self.beta = np.zeros(ch)
    self.runningMean = np.zeros(ch)
    self.runningVar = np.ones(ch)

  def init(self, rng):
    pass

  def params(self):
    return {self.name + '.gamma': self.gamma, self.name + '.beta': self.beta}

  def buffers(self):
    return {self.name + '.running_mean': self.runningMean, self.name + '.running_var': self.runningVar}

  def forward(self, x, train, cache):
    shape = (1, -1, 1, 1, 1)
    if train:
      axes = (0, 2, 3, 4)
      n = x.size // x.shape[1]
      if n < 2:
        raise DimensionError('BatchNorm in training mode needs more than one value per channel')
      mu = x.mean(axis=axes)
      var = x.var(axis=axes)
      self.runningMean[:] = (1 - self.momentum) * self.runningMean + self.momentum * mu
      self.runningVar[:] = (1 - self.momentum) * self.runningVar + self.momentum * var * n / (n - 1)
    else:
      mu, var = self.runningMean, self.runningVar
    invStd = 1.0 / np.sqrt(var + self.eps)
    xhat = (x - mu.reshape(shape)) * invStd.reshape(shape)
    y = self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
    e = _Entry(self, x, y)
    e.xhat = xhat
    e.invStd = invStd
    e.train = train
    cache.append(e)
    return y

  def backward(self, dy, entry, ctx, ref):
    shape = (1, -1, 1, 1, 1)
    axes = (0, 2, 3, 4)
    ctx.grads[self.name + '.gamma'] = (dy * entry.xhat).sum(axis=axes)
    ctx.grads[self.name + '.beta'] = dy.sum(axis=axes)
    dxhat = dy * self.gamma.reshape(shape)
    if not entry.train:
      return dxhat * entry.invStd.reshape(shape)
    n = dy.size // dy.shape[1]
    s1 = dxhat.sum(axis=axes).reshape(shape)
    s2 = (dxhat * entry.xhat).sum(axis=axes).reshape(shape)
    return entry.invStd.reshape(shape) / n * (n * dxhat - s1 - entry.xhat * s2)

  def affine(self):
    """Eval-mode scale and shift per channel"""
    scale = self.gamma / np.sqrt(self.runningVar + self.eps)
    return scale, self.beta - self.runningMean * scale

class ReLU:
  kind = 'relu'

  def __init__(self, name):
    self.name = name

  def init(self, rng):
    pass

  def params(self):
    return {}

  def buffers(self):
    return {}

  def forward(self, x, train, cache):
    y = np.maximum(x, 0.0)
    cache.append(_Entry(self, x, y))
    return y

  def backward(self, dy, entry, ctx, ref):
    x = entry.x
    if ctx.reluMode == 'plain':
      return dy * (x > 0)
    if ctx.reluMode == 'guided':
      return dy * ((x > 0) & (dy > 0))
    # rescale: secant slope against the reference activation
    dx = x - ref.x
    dyFwd = entry.y - ref.y
    small = np.abs(dx) <= RESCALE_MIN_DELTA
    m = np.where(small, (x > 0).astype(np.float64), dyFwd / np.where(small, 1.0, dx))
    if small.any():
      resid = np.where(small, dyFwd - m * dx, 0.0)
      ctx.ledger += float((resid * dy).sum())
    return dy * m

class GlobalAvgPool:
  kind = 'gap'

  def __init__(self, name):
    self.name = name

  def init(self, rng):
    pass

  def params(self):
    return {}

  def buffers(self):
    return {}

  def forward(self, x, train, cache):
    y = x.mean(axis=(2, 3, 4))
    cache.append(_Entry(self, x, y))
    return y

  def backward(self, dy, entry, ctx, ref):
    return self.adjoint(dy, entry.x.shape[2:])

  def adjoint(self, g, inDims):
    n = int(np.prod(inDims))
    return np.broadcast_to((g / n)[:, :, None, None, None], g.shape + tuple(inDims)).copy()

class Flatten:
  kind = 'flatten'

  def __init__(self, name):
    self.name = name

  def init(self, rng):
    pass

  def params(self):
    return {}

  def buffers(self):
    return {}

  def forward(self, x, train, cache):
    y = x.reshape(x.shape[0], -1)
    cache.append(_Entry(self, x, y))
    return y

  def backward(self, dy, entry, ctx, ref):
    return dy.reshape(entry.x.shape)

class Dense:
  kind = 'dense'

  def __init__(self, name, nIn, nOut, bias):
    self.name = name
    self.weight = np.zeros((nOut, nIn))
    self.bias = np.zeros(nOut) if bias else None

  def init(self, rng):
    self.weight = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / self.weight.shape[1])

  def params(self):
    p = {self.name + '.weight': self.weight}
    if self.bias is not None:
      p[self.name + '.bias'] = self.bias
    return p

  def buffers(self):
    return {}

  def linear(self, x, W=None):
    return x @ (self.weight if W is None else W).T

  def adjoint(self, g, inDims=None, W=None):
    return g @ (self.weight if W is None else W)

  def forward(self, x, train, cache):
    if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
      raise DimensionError('Dense expects (B, {}), got {}'.format(self.weight.shape[1], x.shape))
    y = self.linear(x)
    if self.bias is not None:
      y = y + self.bias
    cache.append(_Entry(self, x, y))
    return y

  def backward(self, dy, entry, ctx, ref):
    ctx.grads[self.name + '.weight'] = dy.T @ entry.x
    if self.bias is not None:
      ctx.grads[self.name + '.bias'] = dy.sum(axis=0)
    return self.adjoint(dy)

class ResBlock:
  """relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x)), skip = identity or bn(1x1 conv)"""
  kind = 'resblock'

  def __init__(self, name, tap, spec, inCh, outCh, kernel, stride, batchNorm, bias):
    self.name = name
    self.tap = tap
    k3, s3, one = spec.kernel3(kernel), spec.stride3(stride), spec.stride3(1)
    self.conv1 = Conv(name + '.conv1', inCh, outCh, k3, s3, bias)
    self.bn1 = BatchNorm(name + '.bn1', outCh, spec.bnEps, spec.bnMomentum) if batchNorm else None
    self.relu1 = ReLU(name + '.relu1')
    self.conv2 = Conv(name + '.conv2', outCh, outCh, k3, one, bias)
    self.bn2 = BatchNorm(name + '.bn2', outCh, spec.bnEps, spec.bnMomentum) if batchNorm else None
    self.proj = None
    self.projBn = None
    if inCh != outCh or stride != 1:
      self.proj = Conv(name + '.proj', inCh, outCh, spec.kernel3(1), s3, bias)
      self.projBn = BatchNorm(name + '.proj_bn', outCh, spec.bnEps, spec.bnMomentum) if batchNorm else None
    self.relu2 = ReLU(name + '.relu2')

  def mainLayers(self):
    return [l for l in (self.conv1, self.bn1, self.relu1, self.conv2, self.bn2) if l is not None]

  def skipLayers(self):
    return [l for l in (self.proj, self.projBn) if l is not None]

  def sublayers(self):
    return self.mainLayers() + self.skipLayers() + [self.relu2]

  def init(self, rng):
    for l in self.sublayers():
      l.init(rng)

  def params(self):
    p = {}
    for l in self.sublayers():
      p.update(l.params())
    return p

  def buffers(self):
    b = {}
    for l in self.sublayers():
      b.update(l.buffers())
    return b

  def forward(self, x, train, cache):
    e = _Entry(self, x, None)
    h = x
    for l in self.mainLayers():
      h = l.forward(h, train, e.main)
    s = x
    for l in self.skipLayers():
      s = l.forward(s, train, e.skip)
    e.h = h
    e.s = s
    y = self.relu2.forward(h + s, train, e.out)
    e.y = y
    cache.taps[self.tap] = y
    cache.append(e)
    return y

  def backward(self, dy, entry, ctx, ref):
    ctx.tapGrads[self.tap] = dy
    dz = self.relu2.backward(dy, entry.out[0], ctx, ref.out[0] if ref is not None else None)
    dh = dz
    for i in reversed(range(len(entry.main))):
      sub = entry.main[i]
      dh = sub.layer.backward(dh, sub, ctx, ref.main[i] if ref is not None else None)
    ds = dz
    for i in reversed(range(len(entry.skip))):
      sub = entry.skip[i]
      ds = sub.layer.backward(ds, sub, ctx, ref.skip[i] if ref is not None else None)
    return dh + ds

#####
# Network
#####

class _Entry:
  """What one layer saw and produced during a forward pass"""
  def __init__(self, layer, x, y):
    self.layer = layer
    self.x = x
    self.y = y
    self.main = _EntryList()
    self.skip = _EntryList()
    self.out = _EntryList()

class _EntryList(list):
  def __init__(self):
    super().__init__()
    self.taps = {}

class ActivationCache:
  """Per-layer inputs and outputs of one forward pass"""
  def __init__(self, net, x, train):
    self.netVersion = net.version
    self.netId = id(net)
    self.x = x
    self.train = train
    self.entries = _EntryList()
    self.output = None

  @property
  def taps(self):
    return self.entries.taps

class _BackwardContext:
  def __init__(self, reluMode):
    self.reluMode = reluMode
    self.grads = {}
    self.tapGrads = {}
    self.ledger = 0.0

class Network:
  def __init__(self, spec):
    self.spec = spec
    self.layers = []
    self.version = 0
    ch = spec.inChannels
    dims = tuple(spec.inputDims)
    nBlocks = 0
    for i, l in enumerate(spec.layers):
      name = str(i)
      t = l['type']
      if t in ('conv', 'resblock'):
        k3 = spec.kernel3(int(l.get('kernel', 3)))
        dims = convOutDims(dims, k3, spec.stride3(int(l.get('stride', 1))), padFor(k3))
      if t == 'conv':
        k = int(l.get('kernel', 3))
        layer = Conv(name, ch, int(l['outCh']), spec.kernel3(k), spec.stride3(int(l.get('stride', 1))), bool(l.get('bias', True)))
        ch = int(l['outCh'])
      elif t == 'bn':
        layer = BatchNorm(name, ch, spec.bnEps, spec.bnMomentum)
      elif t == 'relu':
        layer = ReLU(name)
      elif t == 'resblock':
        nBlocks += 1
        layer = ResBlock(name, 'block{}'.format(nBlocks), spec, ch, int(l['outCh']), int(l.get('kernel', 3)),
                         int(l.get('stride', 1)), bool(l.get('batchNorm', True)),
                         bool(l.get('bias', not l.get('batchNorm', True))))
        ch = int(l['outCh'])
      elif t == 'gap':
        layer = GlobalAvgPool(name)
      elif t == 'flatten':
        layer = Flatten(name)
        ch = ch * int(np.prod(dims))
      else:
        layer = Dense(name, ch, int(l['out']), bool(l.get('bias', True)))
        ch = int(l['out'])
      self.layers.append(layer)

  def params(self):
    """Trainable arrays by name (references, in layer order)"""
    p = {}
    for l in self.layers:
      p.update(l.params())
    return p

  def buffers(self):
    b = {}
    for l in self.layers:
      b.update(l.buffers())
    return b

  def stateDict(self):
    s = self.params()
    s.update(self.buffers())
    return s

  def loadStateDict(self, state):
    mine = self.stateDict()
    if set(mine.keys()) != set(state.keys()):
      raise ConfigError('State mismatch: missing {} unexpected {}'.format(
        sorted(set(mine) - set(state)), sorted(set(state) - set(mine))))
    for k, arr in mine.items():
      src = np.asarray(state[k], dtype=np.float64)
      if src.shape != arr.shape:
        raise DimensionError('{}: shape {} vs {}'.format(k, src.shape, arr.shape))
      arr[...] = src
    self.touch()
    return self

  def touch(self):
    """Mark parameters as changed (invalidates activation caches)"""
    self.version += 1

  def tapNames(self):
    return [l.tap for l in self.layers if l.kind == 'resblock']

  def hasBatchNorm(self):
    for l in self.layers:
      if l.kind == 'bn':
        return True
      if l.kind == 'resblock' and (l.bn1 is not None or l.bn2 is not None or l.projBn is not None):
        return True
    return False

  def hash(self):
    state = self.stateDict()
    keys = sorted(state.keys())
    return hashArrays(np.frombuffer(self.spec.hash().encode(), dtype=np.uint8), *[state[k] for k in keys])

  def copy(self):
    return copy.deepcopy(self)

def initNetwork(spec, seed):
  """He-normal conv/dense weights, zero biases, BN gamma 1 / beta 0"""
  spec.validate()
  net = Network(spec)
  rng = subRNG(seed, 0)
  for l in net.layers:
    l.init(rng)
  return net

def asBatch(net, volumes):
  """(B, C, X, Y, Z) array from Volumes (single channel) or an ndarray"""
  if isinstance(volumes, np.ndarray):
    x = np.asarray(volumes, dtype=np.float64)
    if x.ndim == 4:
      x = x[:, None]
  else:
    x = np.stack([v.data for v in volumes])[:, None]
  if x.ndim != 5 or x.shape[1] != net.spec.inChannels:
    raise DimensionError('Expected (B, {}, X, Y, Z) input, got {}'.format(net.spec.inChannels, x.shape))
  return x

def forward(net, x, train=False):
  """Returns outputs, ActivationCache.

  x: (B, C, X, Y, Z) array or list of Volumes
  train: BatchNorm uses batch statistics (and updates running stats)
  """
  x = asBatch(net, x)
  cache = ActivationCache(net, x, train)
  h = x
  for l in net.layers:
    h = l.forward(h, train, cache.entries)
  if train and net.hasBatchNorm():
    net.touch()
  cache.netVersion = net.version
  cache.output = h
  return h, cache

def backward(net, cache, dOutput, reluMode='plain', refCache=None):
  """Reverse-mode pass.

  reluMode: plain (gradient), guided (guided backprop), rescale (DeepLift,
    needs refCache from a forward pass on the reference input)

  Returns: param grads (dict), input grad, tap grads (dict), ledger
    (rescale only: output change not accounted for by the multipliers)
  """
  if reluMode not in RELU_MODES:
    raise ConfigError('Unknown relu mode {}'.format(reluMode))
  if cache.netId != id(net) or cache.netVersion != net.version:
    raise XVError('Activation cache does not belong to this network state')
  if reluMode == 'rescale':
    if refCache is None or refCache.netId != id(net) or refCache.netVersion != net.version:
      raise XVError('Rescale mode needs a reference cache from the same network')
  dOutput = np.asarray(dOutput, dtype=np.float64)
  if dOutput.shape != cache.output.shape:
    raise DimensionError('dOutput shape {} vs output {}'.format(dOutput.shape, cache.output.shape))

  ctx = _BackwardContext(reluMode)
  g = dOutput
  for i in reversed(range(len(cache.entries))):
    e = cache.entries[i]
    g = e.layer.backward(g, e, ctx, refCache.entries[i] if refCache is not None else None)
  return ctx.grads, g, ctx.tapGrads, ctx.ledger

def predictRaw(net, x, batchSize=16):
  """Eval-mode outputs, in batches"""
  x = asBatch(net, x)
  outs = []
  for i in range(0, x.shape[0], batchSize):
    y, _ = forward(net, x[i:i + batchSize], train=False)
    outs.append(y)
  return np.concatenate(outs, axis=0)

#####
# Canonization
#####

def _foldInto(conv, bn):
  scale, shift = bn.affine()
  conv.weight = conv.weight * scale.reshape((-1, 1, 1, 1, 1))
  b = conv.bias if conv.bias is not None else np.zeros(conv.weight.shape[0])
  conv.bias = b * scale + shift

def foldBatchNorm(net):
  """Copy of net with every Conv+BatchNorm pair merged into one Conv (eval-mode statistics)"""
  folded = net.copy()
  spec = NetSpec().initFromDict(net.spec.toDict())
  layers = []
  specLayers = []
  for l, ls in zip(folded.layers, spec.layers):
    if l.kind == 'bn':
      if not layers or layers[-1].kind != 'conv':
        raise ConfigError('BatchNorm {} has no preceding conv to fold into'.format(l.name))
      _foldInto(layers[-1], l)
      specLayers[-1]['bias'] = True
      continue
    if l.kind == 'resblock':
      for conv, bnAttr in ((l.conv1, 'bn1'), (l.conv2, 'bn2'), (l.proj, 'projBn')):
        bn = getattr(l, bnAttr)
        if bn is not None:
          _foldInto(conv, bn)
          setattr(l, bnAttr, None)
      ls['batchNorm'] = False
      ls['bias'] = True
    layers.append(l)
    specLayers.append(ls)
  spec.layers = specLayers
  spec.validate()
  folded.spec = spec
  folded.layers = layers
  folded.touch()
  return folded
