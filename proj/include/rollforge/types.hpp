#pragma once

#include <Eigen/Dense>

namespace rollforge {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// Token-major activations: one row per token.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace rollforge
