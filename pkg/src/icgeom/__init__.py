"""Point-cloud classification from geometric eigenvalue features and
dynamic-graph EdgeConv layers, with hand-written gradients."""

from .geomfeat import covariance_matrix, eigenvalues_sym3, geometric_features, per_point_features
from .graph import ball_query, farthest_point_sampling, knn_graph
from .metrics import confusion_matrix, evaluate, invariance_check, roc_curve
from .net import Model, ModelConfig, init_model, load_model, model_forward, param_count, save_model
from .pointcloud import (PointCloud, TriangleMesh, downsample_shuffle, load_mesh, normalize_unit_sphere,
                         resample_mesh, upsample_on_triangles)
from .train import TrainConfig, backward, cross_entropy_loss, make_synthetic_dataset, sgd_step, train

__version__ = "0.1.0"
