"""Signal-level intrusion detection for in-vehicle CAN traffic.

Modules: ``dbc`` (database parsing and signal selection), ``canlog``
(candump logs and stream statistics), ``deserialize`` (payload codec),
``pipeline`` (cache, sampler, windows), ``model`` (numpy autoencoders),
``detect`` (thresholds, detector, streaming), ``attack`` (attack injection),
``synth`` (synthetic traffic), ``eval`` (scoring and campaigns), ``cli``.
"""

__version__ = "0.1.0"
