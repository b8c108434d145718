"""XAI validation: utils
"""

import time
import sys
import platform
import os
import hashlib
import json

import numpy as np

#####
# Logging
#####

def log(msg):
  """Log this message."""
  sys.stderr.write('{} {}/{}: {}\n'.format(time.strftime('%d/%m/%Y %H:%M:%S'), platform.node(), os.getpid(), msg))

def logDebug(msg):
  """Log this message only if XAIVAL_LOGLVL=debug."""
  if os.environ.get('XAIVAL_LOGLVL', 'info').lower() == 'debug':
    log(msg)

#####
# Errors
#####

class XVError(Exception):
  """Base class for errors raised by libXV"""
  pass

class ConfigError(XVError, ValueError):
  """Invalid configuration, spec, or unknown name"""
  pass

class DimensionError(XVError, ValueError):
  """Dims or shapes do not agree"""
  pass

class DegenerateError(XVError):
  """Degenerate input: constant column, empty class, singular design, ..."""
  pass

class TrainingError(XVError):
  """Training diverged"""
  pass

#####
# Hashing
#####

def hashString(string):
  """Obtain hex digest of this string.

  Returns:
    digest (str): hex chars double the length of string"""
  hashObject = hashlib.md5(string.encode())
  return hashObject.hexdigest()

def hashArrays(*arrays):
  """Hex digest over the little-endian bytes of these arrays (shape included)."""
  hashObject = hashlib.md5()
  for arr in arrays:
    arr = np.ascontiguousarray(arr)
    hashObject.update(str(arr.shape).encode())
    hashObject.update(arr.astype(arr.dtype.newbyteorder('<'), copy=False).tobytes())
  return hashObject.hexdigest()

def hashFile(path):
  """Hex digest of a file's bytes"""
  hashObject = hashlib.md5()
  with open(path, 'rb') as inStream:
    for chunk in iter(lambda: inStream.read(1 << 20), b''):
      hashObject.update(chunk)
  return hashObject.hexdigest()

def hashDict(d):
  """Hex digest of a JSON-able dict, key order independent"""
  return hashString(json.dumps(d, sort_keys=True))

#####
# Seeds
#####

def subRNG(seed, *streamIds):
  """Independent numpy Generator for (seed, streamIds...).

  Streams are derived, not consumed, so results do not depend on
  the order or the worker in which they are requested.
  """
  return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(s) for s in streamIds]))

#####
# Files
#####

def makeDirs(path):
  os.makedirs(path, exist_ok=True)
  return path

def writeToFile(f, cont):
  with open(f, 'w') as out:
    out.write(cont)

def writeToFileNDJSON(f, items):
  """"Write out items in NDJSON format. Each item must have a toNDJSON() method"""
  with open(f, 'w') as out:
    for item in items:
      out.write(item.toNDJSON() + "\n")

def envWorkers(default=None):
  """Worker count from XAIVAL_WORKERS, else default, else CPU count"""
  val = os.environ.get('XAIVAL_WORKERS')
  if val:
    try:
      n = int(val)
    except ValueError:
      raise ConfigError('XAIVAL_WORKERS must be an integer, got {}'.format(val))
    return max(1, n)
  if default is not None:
    return default
  return os.cpu_count() or 4
