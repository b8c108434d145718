from libXV.xv_utils import *
from libXV.xv_ndjson import *
from libXV.xv_volume import *
from libXV.xv_io import *
from libXV.xv_stats import *
from libXV.xv_cohort import *
from libXV.xv_cidp import *
from libXV.xv_metrics import *
import libXV.xv_net as XVNet # Layer classes and forward/backward share names with the methods, so add indirection
import libXV.xv_train as XVTrain
import libXV.xv_lrp as XVLrp
import libXV.xv_attribution as XVAttr
import libXV.xv_parallel as parallel
