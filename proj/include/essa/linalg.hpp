#pragma once

#include <Eigen/Core>

namespace essa {

// Row-major so that checkpoint arrays map onto storage directly.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace essa
