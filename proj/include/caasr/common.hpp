#ifndef CAASR_COMMON_HPP
#define CAASR_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace caasr {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matf = MatX<float>;
using Matd = MatX<double>;
using Vecf = VecX<float>;
using Vecd = VecX<double>;

/// Invalid run configuration or CLI usage. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Failure inside a pipeline stage. Maps to exit code 3.
class StageError : public std::runtime_error {
 public:
  explicit StageError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitStageFailure = 3;

}  // namespace caasr

#endif  // CAASR_COMMON_HPP
