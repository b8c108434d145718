#!/usr/bin/env python3
# Validate attribution methods against synthetic ground truth.
# Commands run one pipeline step each (generate, correct, train, explain,
# evaluate, report), all of them in order (pipeline), or draw a heatmap
# slice (render). Steps share state through out/<run-id>/.

# Import libStages, libReport
import libStages
import libReport

# Import libXV
import os
import sys
sys.path.append(os.path.join(os.environ.get('XAIVAL_PROJECT_ROOT', os.path.join(os.path.dirname(os.path.abspath(__file__)), '..')), 'eval', 'lib'))
import libXV

import argparse
import traceback

COMMANDS = ('generate', 'correct', 'train', 'explain', 'evaluate', 'report', 'pipeline', 'render')

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

################

def runCommand(command, cfg, outRoot, parallelism):
  rd = libStages.RunDir(outRoot, cfg.runId)
  stage = cfg.stage.name

  if command == 'pipeline':
    rd, _ = libStages.runStage(cfg, None, outRoot, parallelism)
    libXV.log('Manifest: {}'.format(rd.manifest))
    return

  with libStages.stepContext(stage, command):
    if command == 'generate':
      libStages.generate(cfg, rd, parallelism)
    elif command == 'correct':
      libStages.correct(cfg, rd, libStages.loadCohort(rd), parallelism)
    elif command == 'train':
      bundle = libStages.loadCohort(rd)
      libStages.trainAll(cfg, rd, bundle, libStages.readTasks(rd), parallelism)
    elif command == 'explain':
      bundle = libStages.loadCohort(rd)
      libStages.explainAll(cfg, rd, bundle, libStages.readTasks(rd), parallelism)
    elif command == 'evaluate':
      bundle = libStages.loadCohort(rd)
      libStages.evaluate(cfg, rd, bundle, libStages.readTasks(rd), None, parallelism)
    elif command == 'report':
      libReport.report(cfg, rd)
  libXV.log('{} done in {}'.format(command, rd.root))

def main(command, configFile, seed, outRoot, stage, methods, parallelism, heatmapFile, maskFile, slice, outPrefix):
  libXV.log('command {} configFile {} seed {} outRoot {} stage {} methods {} parallelism {} heatmapFile {} maskFile {} slice {} outPrefix {}' \
    .format(command, configFile, seed, outRoot, stage, methods, parallelism, heatmapFile, maskFile, slice, outPrefix))

  try:
    if command == 'render':
      if not heatmapFile or not outPrefix:
        raise libXV.ConfigError('render needs --heatmap and --out-prefix')
      mask = libXV.readMask(maskFile) if maskFile else None
      png, pgm = libReport.renderSlice(libXV.readVolume(heatmapFile), mask, outPrefix, slice)
      libXV.log('Wrote {} and {}'.format(png, pgm))
      return EXIT_OK

    if not configFile:
      raise libXV.ConfigError('{} needs --config'.format(command))
    cfg = libStages.readExperimentConfig(configFile)
    cfg = cfg.withOverrides(seed=seed, stage=stage, methods=methods)
    runCommand(command, cfg, outRoot, parallelism)
  except libXV.ConfigError as err:
    libXV.log('Config error: {}'.format(err))
    return EXIT_CONFIG
  except Exception as err:
    libXV.log('Error: {}'.format(err))
    libXV.log(traceback.format_exc())
    return EXIT_RUNTIME
  return EXIT_OK

###############################################

# Parse args
parser = argparse.ArgumentParser(description='Validate attribution methods against synthetic ground truth')
parser.add_argument('command', choices=COMMANDS, help='In: Step to run. pipeline runs generate through report and writes the run manifest. render draws one heatmap slice')
parser.add_argument('--config', type=str, help='In: Experiment config (.toml), or the manifest.json of an earlier run to replay it', required=False, default=None,
  dest='configFile')
parser.add_argument('--seed', type=int, help='In: Run this single seed replicate instead of the configured [seeds] list', required=False, default=None,
  dest='seed')
parser.add_argument('--out', type=str, help='Out: Root of the run directories. Each run writes to <out>/<run-id>/', required=False, default='out',
  dest='outRoot')
parser.add_argument('--stage', type=str, help='In: Override the configured stage (localized, artificial_disease, lesion, plausibility)', required=False, default=None,
  dest='stage')
parser.add_argument('--method', type=str, action='append', help='In: Restrict to this method (label or name). Repeat for several', required=False, default=None,
  dest='methods')
parser.add_argument('--parallelism', type=int, help='Maximum cores to use (default: $XAIVAL_WORKERS, else all)', required=False, default=None,
  dest='parallelism')
parser.add_argument('--heatmap', type=str, help='In: render: heatmap or volume (.vlab)', required=False, default=None,
  dest='heatmapFile')
parser.add_argument('--mask', type=str, help='In: render: ground-truth mask (.vlab) to outline', required=False, default=None,
  dest='maskFile')
parser.add_argument('--slice', type=int, help='In: render: axial slice (default: the one holding most of the mask, else the middle one)', required=False, default=None,
  dest='slice')
parser.add_argument('--out-prefix', type=str, help='Out: render: writes <prefix>.png and <prefix>.pgm', required=False, default=None,
  dest='outPrefix')

# Parse args
args = parser.parse_args()
parallelism = args.parallelism if args.parallelism is not None else libXV.envWorkers(libXV.parallel.CPUCount.CPU_BOUND)

# Here we go!
sys.exit(main(args.command, args.configFile, args.seed, args.outRoot, args.stage, args.methods, parallelism, args.heatmapFile, args.maskFile, args.slice, args.outPrefix))
