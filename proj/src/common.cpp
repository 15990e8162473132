#include "tpf/common.hpp"

#include <atomic>
#include <sstream>

namespace tpf {

namespace {
std::atomic<bool> g_finite_guard{true};
}

void set_finite_guard(bool enabled) { g_finite_guard = enabled; }

bool finite_guard_enabled() { return g_finite_guard; }

const torch::Tensor& guard_finite(const torch::Tensor& t, const char* where) {
  if (g_finite_guard && t.defined() && t.is_floating_point()) {
    if (!torch::isfinite(t).all().item<bool>()) {
      throw TrainingError(std::string("non-finite values after ") + where);
    }
  }
  return t;
}

std::string shape_str(torch::IntArrayRef sizes) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < sizes.size(); ++i) {
    if (i) os << ',';
    os << sizes[i];
  }
  os << ']';
  return os.str();
}

void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

}  // namespace tpf
