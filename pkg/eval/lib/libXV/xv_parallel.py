"""XAI validation: Parallelism

Classes and methods to help with parallelizing a set of tasks.
"""

import multiprocessing
import os
import traceback

import libXV.xv_utils as xv_utils

####
# Public API.
####

def map(tasks, nWorkers):
    """Run a bunch of tasks in parallel.

    @param tasks: A list of libXV.parallel.ParallelTask's
    @param nWorkers: Number of workers. Use CPUCount.CPU_BOUND or libXV.envWorkers()
    @return results[]: in same order as tasks. If any task.run() throws then we put the exception in the list
    """
    if nWorkers <= 1 or len(tasks) <= 1:
        return [_runParallelTask(t) for t in tasks]

    nWorkers = min(nWorkers, len(tasks))
    with multiprocessing.Pool(nWorkers) as pool:
        results = list(pool.imap(_runParallelTask, tasks))
    return results

def mapOrRaise(tasks, nWorkers, what='task'):
    """map(), then re-raise the first captured exception with its task index.

    XVErrors keep their class so callers can still tell config errors apart.
    """
    results = map(tasks, nWorkers)
    errors = [(i, r) for i, r in enumerate(results) if isinstance(r, BaseException)]
    if not errors:
        return results
    xv_utils.log('{}/{} {}s raised'.format(len(errors), len(tasks), what))
    i, err = errors[0]
    msg = '{} {} of {}: {}'.format(what, i, len(tasks), err)
    if isinstance(err, xv_utils.XVError):
        raise type(err)(msg) from err
    raise xv_utils.XVError(msg) from err

class CPUCount():
    """Worker-count estimates"""
    CPU_BOUND = os.cpu_count() or 4

class ParallelTask():
    """Sub-class this and override run(). Instances must pickle."""
    def run(self):
        raise NotImplementedError(type(self).__name__)

####
# Helpers
####

def _runParallelTask(parallelTask):
    """Return the result of parallelTask.run(), or the exception generated when we attempt."""
    ret = None
    try:
        ret = parallelTask.run()
    except KeyboardInterrupt:
        raise
    except BaseException as err:
        xv_utils.log('Exception in {}: {}'.format(type(parallelTask).__name__, err))
        xv_utils.logDebug(traceback.format_exc())
        ret = err
    return ret
