#pragma once

#include <Eigen/Core>

namespace partmim {

/// Dense row-major matrix used for activations, parameters and gradients.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

}  // namespace partmim
