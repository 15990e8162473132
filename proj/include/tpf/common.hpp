#pragma once

#include <torch/torch.h>

#include <stdexcept>
#include <string>

namespace tpf {

/// Invalid shapes, channel counts or option combinations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or unreadable files, failed writes.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter file or checkpoint that does not match the model layout.
class IncompatibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad records, corrupt images, or too many skipped samples.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unrecoverable failure inside the optimisation loop.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Globally toggles the finite-value check run at block boundaries.
void set_finite_guard(bool enabled);
bool finite_guard_enabled();

/// Throws TrainingError when `t` holds NaN or Inf and the guard is enabled.
const torch::Tensor& guard_finite(const torch::Tensor& t, const char* where);

/// Renders a shape as "[2,3,256,256]".
std::string shape_str(torch::IntArrayRef sizes);

void require(bool condition, const std::string& message);

}  // namespace tpf
