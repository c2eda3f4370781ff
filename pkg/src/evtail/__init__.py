from .module.estimator import EstimatorConfig, EstimatorNets, estimate
from .module.gpd import GpdParams, TailModel, fit_gpd_mle, tail_probability, tail_quantile
from .module.series import SampleSeries
