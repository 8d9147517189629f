"""Interchange intervention training of modular glucose forecasters.

Networks whose modules mirror a compartment model of glucose-insulin
dynamics are trained to agree with that model under interchange
interventions as well as on factual forecasts.
"""

__version__ = "0.1.0"
