"""XAI validation: NDJSON
"""

import json

import numpy as np

#####
# ND-JSON
#####

def isNDJSON(ndjson):
  return type(ndjson) is str \
         and len(ndjson) >= 2 \
         and ndjson[0] == '{' \
         and ndjson[-1] == '}' \
         and ndjson.find('\n') == -1

def _jsonDefault(obj):
  # numpy scalars and arrays sneak into config echoes
  if isinstance(obj, np.integer):
    return int(obj)
  if isinstance(obj, np.floating):
    return float(obj)
  if isinstance(obj, np.ndarray):
    return obj.tolist()
  raise TypeError('Not JSON serializable: {}'.format(type(obj)))

def toNDJSON(obj):
  """Convert this object to an NDJSON-formatted string representation."""
  ndjson = json.dumps(obj, sort_keys=True, default=_jsonDefault)
  assert(isNDJSON(ndjson))
  return ndjson

def fromNDJSON(ndjson):
  """Return a simple Python object from an ndjson-encoded string."""
  ndjson = ndjson.strip()
  assert(isNDJSON(ndjson))
  return json.loads(ndjson)

def writeJSON(path, obj):
  """Pretty, key-sorted JSON (byte-stable for identical objects)"""
  with open(path, 'w') as out:
    json.dump(obj, out, sort_keys=True, indent=2, default=_jsonDefault)
    out.write('\n')

def readJSON(path):
  with open(path, 'r') as inStream:
    return json.load(inStream)
