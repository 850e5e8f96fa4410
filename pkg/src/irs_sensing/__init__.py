"""IRS-assisted wideband spectrum sensing with collaboratively trained CNNs.

Subpackages and modules:

* :mod:`irs_sensing.channel`: path loss, shadowing and IRS reflected gains
* :mod:`irs_sensing.simgen`: labelled PSD datasets
* :mod:`irs_sensing.neuralnet`: the multi-task CNN with manual backprop
* :mod:`irs_sensing.collab`: decoupled averaging, FedAvg and standalone training
* :mod:`irs_sensing.metrics`: accuracy, Pd, Pfa and CSV records
* :mod:`irs_sensing.config`, :mod:`irs_sensing.experiment`, :mod:`irs_sensing.cli`:
  experiment files, sweeps and the command line
"""

__version__ = "0.1.0"
