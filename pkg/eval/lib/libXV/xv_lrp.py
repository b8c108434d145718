"""XAI validation: layer-wise relevance propagation

Relevance starts as the target output value and is pushed back one layer
at a time. Every layer that mixes inputs (conv, dense, global pooling) is handled as
a linear operator that can run with its weights, their positive or
negative parts, or all-ones weights; the rules only ever talk to that
operator. The residual sum is not a rule site: its relevance is split
between the two branches in proportion to their signed contributions.

Composites assign rules by depth: the first conv, the last dense, and
everything in between.
"""

import numpy as np

from libXV.xv_utils import ConfigError, DimensionError
from libXV import xv_net

DEFAULT_EPS = 1e-6

#####
# Linear operators
#####

class _LayerOp:
  """Conv or Dense with weight variants w | pos | neg | ones"""
  def __init__(self, layer, inDims):
    self.layer = layer
    self.inDims = inDims
    W = layer.weight
    self.W = {'w': W, 'pos': np.maximum(W, 0.0), 'neg': np.minimum(W, 0.0), 'ones': np.ones_like(W)}
    b = layer.bias
    shape = (1, -1, 1, 1, 1) if layer.kind == 'conv' else (1, -1)
    if b is None:
      self.b = {'w': 0.0, 'pos': 0.0, 'neg': 0.0}
    else:
      self.b = {'w': b.reshape(shape), 'pos': np.maximum(b, 0.0).reshape(shape), 'neg': np.minimum(b, 0.0).reshape(shape)}

  def fwd(self, a, kind):
    return self.layer.linear(a, self.W[kind])

  def adj(self, g, kind):
    return self.layer.adjoint(g, self.inDims, self.W[kind])

  def bias(self, kind):
    return self.b[kind]

class _PoolOp:
  """Global average pooling as uniform positive weights 1/N"""
  def __init__(self, inDims):
    self.inDims = tuple(inDims)
    self.n = int(np.prod(inDims))

  def fwd(self, a, kind):
    if kind == 'neg':
      return np.zeros(a.shape[:2])
    s = a.sum(axis=(2, 3, 4))
    return s if kind == 'ones' else s / self.n

  def adj(self, g, kind):
    shape = g.shape + self.inDims
    if kind == 'neg':
      return np.zeros(shape)
    scale = 1.0 if kind == 'ones' else 1.0 / self.n
    return np.broadcast_to((g * scale)[:, :, None, None, None], shape).copy()

  def bias(self, kind):
    return 0.0

def _safeDivide(num, den):
  out = np.zeros(np.broadcast(num, den).shape)
  nz = den != 0
  np.divide(num, den, out=out, where=nz)
  return out

def _splitSum(h, s, R, eps):
  """Relevance of z = h + s shared as h/z and s/z, z stabilized by eps*sign(z)"""
  z = h + s
  if eps > 0:
    q = R / (z + eps * np.where(z >= 0, 1.0, -1.0))
  else:
    q = _safeDivide(R, z)
  return h * q, s * q

#####
# Rules
#####

class Rule:
  name = None

  def propagate(self, op, a, R):
    raise NotImplementedError()

  def toDict(self):
    return {'rule': self.name}

class Zero(Rule):
  name = 'zero'

  def propagate(self, op, a, R):
    z = op.fwd(a, 'w') + op.bias('w')
    return a * op.adj(_safeDivide(R, z), 'w')

class Epsilon(Rule):
  name = 'epsilon'

  def __init__(self, eps=DEFAULT_EPS):
    if not eps > 0:
      raise ConfigError('Epsilon rule needs eps > 0, got {}'.format(eps))
    self.eps = float(eps)

  def propagate(self, op, a, R):
    z = op.fwd(a, 'w') + op.bias('w')
    z = z + self.eps * np.where(z >= 0, 1.0, -1.0)
    return a * op.adj(R / z, 'w')

  def toDict(self):
    return {'rule': self.name, 'eps': self.eps}

class AlphaBeta(Rule):
  name = 'alphabeta'

  def __init__(self, alpha=2.0, beta=1.0):
    if abs((alpha - beta) - 1.0) > 1e-12 or beta < 0:
      raise ConfigError('AlphaBeta needs alpha - beta = 1 and beta >= 0, got {} / {}'.format(alpha, beta))
    self.alpha = float(alpha)
    self.beta = float(beta)

  def propagate(self, op, a, R):
    ap = np.maximum(a, 0.0)
    an = np.minimum(a, 0.0)
    zp = op.fwd(ap, 'pos') + op.fwd(an, 'neg') + op.bias('pos')
    sp = _safeDivide(self.alpha * R, zp)
    out = ap * op.adj(sp, 'pos') + an * op.adj(sp, 'neg')
    if self.beta:
      zn = op.fwd(ap, 'neg') + op.fwd(an, 'pos') + op.bias('neg')
      sn = _safeDivide(self.beta * R, zn)
      out = out - (ap * op.adj(sn, 'neg') + an * op.adj(sn, 'pos'))
    return out

  def toDict(self):
    return {'rule': self.name, 'alpha': self.alpha, 'beta': self.beta}

class ZPlus(AlphaBeta):
  name = 'zplus'

  def __init__(self):
    super().__init__(1.0, 0.0)

  def toDict(self):
    return {'rule': self.name}

class Flat(Rule):
  """Inputs and weights replaced by ones: uniform split over the receptive field"""
  name = 'flat'

  def propagate(self, op, a, R):
    z = op.fwd(np.ones_like(a), 'ones')
    return op.adj(_safeDivide(R, z), 'ones')

def ruleFromDict(obj):
  """{'rule': 'epsilon', 'eps': 1e-6} and friends"""
  if isinstance(obj, str):
    obj = {'rule': obj}
  name = obj.get('rule')
  if name == 'zero':
    return Zero()
  if name == 'epsilon':
    return Epsilon(obj.get('eps', DEFAULT_EPS))
  if name == 'alphabeta':
    return AlphaBeta(obj.get('alpha', 2.0), obj.get('beta', 1.0))
  if name == 'zplus':
    return ZPlus()
  if name == 'flat':
    return Flat()
  raise ConfigError('Unknown LRP rule {}'.format(name))

#####
# Composites
#####

class Composite:
  """Rules by depth, plus the stabilizer of the residual-sum split (0 = unstabilized)"""
  def __init__(self, name, first, middle, last, sumEps=DEFAULT_EPS):
    if sumEps < 0:
      raise ConfigError('Composite sumEps must be >= 0, got {}'.format(sumEps))
    self.name = name
    self.first = first
    self.middle = middle
    self.last = last
    self.sumEps = float(sumEps)

  def toDict(self):
    return {'name': self.name, 'first': self.first.toDict(), 'middle': self.middle.toDict(), 'last': self.last.toDict(),
      'sumEps': self.sumEps}

def presetComposite(name, eps=DEFAULT_EPS):
  if name == 'EpsilonAlpha2Beta1':
    return Composite(name, AlphaBeta(2, 1), AlphaBeta(2, 1), Epsilon(eps), eps)
  if name == 'EpsilonAlpha2Beta1Flat':
    return Composite(name, Flat(), AlphaBeta(2, 1), Epsilon(eps), eps)
  if name == 'EpsilonPlus':
    return Composite(name, ZPlus(), ZPlus(), Epsilon(eps), eps)
  if name == 'EpsilonPlusFlat':
    return Composite(name, Flat(), ZPlus(), Epsilon(eps), eps)
  raise ConfigError('Unknown LRP composite {}'.format(name))

PRESETS = ['EpsilonAlpha2Beta1', 'EpsilonAlpha2Beta1Flat', 'EpsilonPlus', 'EpsilonPlusFlat']

def uniformComposite(rule, name=None):
  """The same rule at every depth. Epsilon and Zero carry their stabilizer over to the residual sum."""
  if isinstance(rule, Epsilon):
    sumEps = rule.eps
  elif isinstance(rule, Zero):
    sumEps = 0.0
  else:
    sumEps = DEFAULT_EPS
  return Composite(name or 'uniform_' + rule.name, rule, rule, rule, sumEps)

def compositeFromDict(obj):
  """{'preset': 'EpsilonPlus', 'eps': 1e-6} or {'first': ..., 'middle': ..., 'last': ..., 'sumEps': ...}"""
  if 'preset' in obj:
    return presetComposite(obj['preset'], obj.get('eps', DEFAULT_EPS))
  missing = [k for k in ('first', 'middle', 'last') if k not in obj]
  if missing:
    raise ConfigError('Composite needs a preset or first/middle/last rules (missing {})'.format(missing))
  return Composite(obj.get('name', 'custom'), ruleFromDict(obj['first']), ruleFromDict(obj['middle']), ruleFromDict(obj['last']),
    obj.get('sumEps', DEFAULT_EPS))

#####
# Propagation
#####

class _Assignment:
  def __init__(self, net, composite):
    self.composite = composite
    convs = [l for l in net.layers if l.kind == 'conv']
    dense = [l for l in net.layers if l.kind == 'dense']
    self.firstConv = convs[0] if convs else None
    self.lastDense = dense[-1] if dense else None

  def ruleFor(self, layer):
    if layer is self.lastDense:
      return self.composite.last
    if layer is self.firstConv:
      return self.composite.first
    return self.composite.middle

def _propagateEntry(entry, R, assign):
  layer = entry.layer
  kind = layer.kind
  if kind == 'relu':
    return R
  if kind == 'flatten':
    return R.reshape(entry.x.shape)
  if kind == 'bn':
    raise ConfigError('LRP needs a network without BatchNorm (fold it first)')
  if kind in ('conv', 'dense'):
    return assign.ruleFor(layer).propagate(_LayerOp(layer, entry.x.shape[2:]), entry.x, R)
  if kind == 'gap':
    return assign.composite.middle.propagate(_PoolOp(entry.x.shape[2:]), entry.x, R)
  if kind == 'resblock':
    Rz = _propagateEntry(entry.out[0], R, assign)
    Rh, Rs = _splitSum(entry.h, entry.s, Rz, assign.composite.sumEps)
    for sub in reversed(entry.main):
      Rh = _propagateEntry(sub, Rh, assign)
    for sub in reversed(entry.skip):
      Rs = _propagateEntry(sub, Rs, assign)
    return Rh + Rs
  raise ConfigError('No LRP handling for layer kind {}'.format(kind))

def lrp(net, x, composite, target=0):
  """Input relevance (same shape as x) for output unit `target`.

  x: (1, C, X, Y, Z) network input
  """
  if net.hasBatchNorm():
    raise ConfigError('LRP needs a network without BatchNorm (fold it first)')
  out, cache = xv_net.forward(net, x, train=False)
  if out.ndim != 2 or not (0 <= target < out.shape[1]):
    raise DimensionError('Target {} is not an output of shape {}'.format(target, out.shape))
  R = np.zeros_like(out)
  R[:, target] = out[:, target]
  assign = _Assignment(net, composite)
  for entry in reversed(cache.entries):
    R = _propagateEntry(entry, R, assign)
  return R, out[:, target]
