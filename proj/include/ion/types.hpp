#pragma once
#include <Eigen/Dense>
#include <complex>

namespace ion {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using cplx = std::complex<double>;

// Every parallel kernel keeps a serial reference implementation; the two
// paths are bitwise-identical (parallel loops write to preallocated slots,
// reductions run serially in fixed order).
enum class ExecPolicy { Serial, Parallel };

} // namespace ion
