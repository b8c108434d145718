"""XAI validation: report tables and slice renders
"""

# Import libXV
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..')), 'eval', 'lib'))
import libXV

import libStages

# Other imports
import itertools

import numpy as np
import pandas as pd
import scipy.stats as stats
from scipy import ndimage
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import seaborn as sns

sns.set_style('whitegrid')

###
# Tables
###

def metricTable(agg, column='rma_mean'):
  """method x task matrix of one aggregate column"""
  if column not in agg.columns:
    raise libXV.ConfigError('No aggregate column {}'.format(column))
  return agg.pivot(index='method', columns='task', values=column).sort_index().sort_index(axis=1)

def minMaxRows(matrix):
  """Scale each row to [0, 1].

  A row without spread (all equal, or all missing) becomes all 0.

  Returns: scaled DataFrame, boolean Series flagging those rows
  """
  lo = matrix.min(axis=1)
  span = matrix.max(axis=1) - lo
  flat = ~(span > 0)
  scaled = matrix.sub(lo, axis=0).div(span.where(~flat), axis=0)
  scaled.loc[flat, :] = 0.0
  return scaled, flat.rename('constant_row')

def groupMeans(agg, groups, column='rma_mean'):
  """Mean of column over the tasks of each group, per method"""
  known = set(agg['task'])
  rows = []
  for group in sorted(groups):
    names = list(groups[group])
    if not names:
      raise libXV.ConfigError('Group {} is empty'.format(group))
    missing = [t for t in names if t not in known]
    if missing:
      raise libXV.ConfigError('Group {} names unknown tasks {}'.format(group, missing))
    sub = agg[agg['task'].isin(names)]
    for method, g in sub.groupby('method', sort=True):
      rows.append({'group': group, 'method': method, 'n_tasks': len(g), column: float(g[column].mean())})
  return pd.DataFrame(rows, columns=['group', 'method', 'n_tasks', column])

def runGroups(agg, groups):
  """Groups with at least one task in this run (the others belong to other stages)"""
  known = set(agg['task'])
  picked = {g: names for g, names in groups.items() if any(t in known for t in names)}
  for g in sorted(set(groups) - set(picked)):
    libXV.log('Group {} has no task in this run, skipped'.format(g))
  return picked

def methodComparison(agg, metric='rma'):
  """Per method: mean over tasks, SEM combined in quadrature, total subject count"""
  rows = []
  for method, g in agg.groupby('method', sort=True):
    g = g[g[metric + '_mean'].notna()]
    if not len(g):
      continue
    sems = g[metric + '_sem'].fillna(0.0).values
    rows.append({
      'method': method,
      'n_tasks': len(g),
      'n': int(g['n'].sum()),
      metric + '_mean': float(g[metric + '_mean'].mean()),
      metric + '_sem': float(np.sqrt(np.sum(sems ** 2)) / len(g)),
    })
  return pd.DataFrame(rows, columns=['method', 'n_tasks', 'n', metric + '_mean', metric + '_sem'])

def welchTests(comparison, metric='rma'):
  """Pairwise two-sided Welch t-tests from means and SEMs"""
  rows = []
  recs = comparison.to_dict('records')
  for a, b in itertools.combinations(recs, 2):
    sdA = a[metric + '_sem'] * np.sqrt(a['n'])
    sdB = b[metric + '_sem'] * np.sqrt(b['n'])
    t, p = stats.ttest_ind_from_stats(a[metric + '_mean'], sdA, a['n'], b[metric + '_mean'], sdB, b['n'], equal_var=False)
    rows.append({'method_a': a['method'], 'method_b': b['method'], 'mean_diff': a[metric + '_mean'] - b[metric + '_mean'],
                 't': float(t), 'p': float(p)})
  return pd.DataFrame(rows, columns=['method_a', 'method_b', 'mean_diff', 't', 'p'])

def thresholdSensitivity(sweep, defaultCutoff):
  """Best cutoff per (task, method) by mean rma, next to the default cutoff's score.

  Ties go to the smaller cutoff.
  """
  ok = sweep[~sweep['degenerate_flag'].astype(bool)]
  means = ok.groupby(['task', 'method', 'cutoff'], sort=True)['rma'].mean().reset_index()
  rows = []
  for (task, method), g in means.groupby(['task', 'method'], sort=True):
    best = g.sort_values(['rma', 'cutoff'], ascending=[False, True]).iloc[0]
    dflt = g[np.isclose(g['cutoff'], defaultCutoff)]['rma']
    rows.append({
      'task': task, 'method': method,
      'best_cutoff': float(best['cutoff']), 'best_rma': float(best['rma']),
      'default_cutoff': float(defaultCutoff), 'default_rma': float(dflt.iloc[0]) if len(dflt) else float('nan'),
    })
  return pd.DataFrame(rows, columns=['task', 'method', 'best_cutoff', 'best_rma', 'default_cutoff', 'default_rma'])

###
# Renders
###

def bestSlice(mask):
  """Axial slice holding most of the mask"""
  counts = mask.membership.sum(axis=(0, 1))
  return int(np.argmax(counts))

def outline(m):
  """Boundary pixels of a 2D boolean mask"""
  return m & ~ndimage.binary_erosion(m)

def renderSlice(volume, mask, prefix, z=None, title=None):
  """<prefix>.png (colormap, mask contour) and <prefix>.pgm (grey, outline drawn white).

  Returns: (png path, pgm path)
  """
  if mask is not None and tuple(mask.dims) != tuple(volume.dims):
    raise libXV.DimensionError('mask dims {} vs volume {}'.format(mask.dims, volume.dims))
  if z is None:
    z = bestSlice(mask) if mask is not None and mask.nSet else volume.dims[2] // 2
  if not (0 <= z < volume.dims[2]):
    raise libXV.DimensionError('slice {} outside {} slices'.format(z, volume.dims[2]))
  libXV.makeDirs(os.path.dirname(os.path.abspath(prefix)))
  sl = volume.data[:, :, z].T # rows = y
  m = mask.membership[:, :, z].T if mask is not None else None

  fig, ax = plt.subplots(figsize=(4, 4))
  ax.imshow(sl, cmap='hot', origin='lower', interpolation='nearest')
  if m is not None and m.any() and not m.all():
    ax.contour(m.astype(np.float64), levels=[0.5], colors='cyan', linewidths=1)
  ax.set_axis_off()
  if title:
    ax.set_title(title, fontsize=9)
  pngPath = prefix + '.png'
  fig.savefig(pngPath, dpi=100, bbox_inches='tight')
  plt.close(fig)

  pgmPath = libXV.writeSlicePGM(prefix + '.pgm', volume, z, marks=outline(m).T if m is not None else None)
  return pngPath, pgmPath

def _plotMatrix(scaled, path):
  fig, ax = plt.subplots(figsize=(1.2 + 0.6 * scaled.shape[1], 1.0 + 0.35 * scaled.shape[0]))
  sns.heatmap(scaled, ax=ax, vmin=0, vmax=1, cmap='viridis', annot=scaled.shape[1] <= 12, fmt='.2f', cbar=True)
  ax.set_xlabel('')
  ax.set_ylabel('')
  fig.savefig(path, bbox_inches='tight')
  plt.close(fig)

def _plotThresholds(sweep, path):
  ok = sweep[~sweep['degenerate_flag'].astype(bool)]
  if not len(ok):
    return
  fig, ax = plt.subplots(figsize=(6, 4))
  sns.lineplot(data=ok, x='cutoff', y='rma', hue='method', errorbar=None, ax=ax)
  ax.set_xlabel('Cutoff percentile')
  ax.set_ylabel('RMA')
  ax.legend(fontsize='x-small')
  fig.savefig(path, bbox_inches='tight')
  plt.close(fig)

def renderHeatmaps(cfg, rd, nSubjects=1):
  """Mean and single-subject renders of the first seed's heatmaps, ground truth outlined"""
  bundle = libStages.loadCohort(rd)
  tasks = libStages.readTasks(rd)
  seed = cfg.seeds.replicates[0]
  outDir = libXV.makeDirs(os.path.join(rd.report, 'render'))
  paths = []
  for task in tasks:
    for m in cfg.methods:
      hdir = rd.heatmapDir(task.name, seed, m.label)
      files = sorted(f for f in os.listdir(hdir) if f.endswith('.vlab')) if os.path.isdir(hdir) else []
      if not files:
        libXV.log('No heatmaps to render for {} / {}'.format(task.name, m.label))
        continue
      hs = [libXV.XVAttr.readHeatmap(os.path.join(hdir, f)) for f in files]
      maps = [libXV.postprocess(h, cfg.postprocess).volume for h in hs]
      masks = [task.groundTruth(bundle.subject(h.provenance['subjectId'])) for h in hs]

      meanMap = libXV.Volume(np.mean([v.data for v in maps], axis=0), maps[0].spacingMm)
      meanMask = libXV.RegionMask(np.mean([g.membership for g in masks], axis=0) >= 0.5, maps[0].spacingMm)
      prefix = os.path.join(outDir, '{}_{}_mean'.format(task.name, m.label))
      paths += renderSlice(meanMap, meanMask, prefix, title='{} / {} (mean)'.format(task.name, m.label))
      for h, v, g in list(zip(hs, maps, masks))[:nSubjects]:
        sid = h.provenance['subjectId']
        prefix = os.path.join(outDir, '{}_{}_{}'.format(task.name, m.label, sid))
        paths += renderSlice(v, g, prefix, title='{} / {} / {}'.format(task.name, m.label, sid))

  highMask = os.path.join(rd.report, 'highload_mask.vlab')
  if os.path.exists(highMask):
    mask = libXV.readMask(highMask)
    for m in cfg.methods:
      p = os.path.join(rd.report, 'highload_{}.vlab'.format(m.label))
      if os.path.exists(p):
        paths += renderSlice(libXV.readVolume(p), mask, os.path.join(outDir, 'highload_{}'.format(m.label)),
                             title='{} (high lesion load)'.format(m.label))
  return paths

###
# Report
###

def report(cfg, rd, render=True):
  """Every report table (CSV under report/) plus the renders.

  Returns: {table name: DataFrame}
  """
  libXV.makeDirs(rd.report)
  aggPath = rd.scorePath('aggregate.csv')
  if not os.path.exists(aggPath):
    raise libXV.ConfigError('No {} (run evaluate first)'.format(aggPath))
  agg = pd.read_csv(aggPath, dtype={'task': str, 'method': str})

  tables = {}
  rmaMatrix = metricTable(agg, 'rma_mean')
  scaled, flat = minMaxRows(rmaMatrix)
  if flat.any():
    libXV.log('Constant rows scaled to 0: {}'.format(list(flat[flat].index)))
  tables['rma_matrix'] = rmaMatrix
  tables['rma_matrix_scaled'] = scaled.assign(constant_row=flat)
  tables['rma_sd'] = metricTable(agg, 'rma_sd')
  tables['tpr'] = metricTable(agg, 'tpr_hit_mean')
  tables['fpr'] = metricTable(agg, 'fpr_flag_mean')
  groups = runGroups(agg, cfg.report.groups)
  if groups:
    tables['group_means'] = groupMeans(agg, groups)
  comparison = methodComparison(agg)
  tables['method_summary'] = comparison
  tables['method_ttests'] = welchTests(comparison)

  sweepPath = rd.scorePath('threshold_sweep.csv')
  if os.path.exists(sweepPath):
    sweep = pd.read_csv(sweepPath, dtype={'task': str, 'method': str, 'subject_id': str})
    tables['threshold_sensitivity'] = thresholdSensitivity(sweep, cfg.postprocess.cutoffPercentile)
    _plotThresholds(sweep, os.path.join(rd.report, 'threshold_sensitivity.png'))

  for name, df in tables.items():
    indexed = name in ('rma_matrix', 'rma_matrix_scaled', 'rma_sd', 'tpr', 'fpr')
    df.to_csv(os.path.join(rd.report, name + '.csv'), index=indexed, float_format='%.17g')
  if len(scaled):
    _plotMatrix(scaled, os.path.join(rd.report, 'rma_matrix_scaled.png'))

  if render:
    renderHeatmaps(cfg, rd, cfg.report.renderSubjects)
  libXV.log('Wrote {} report tables to {}'.format(len(tables), rd.report))
  return tables
