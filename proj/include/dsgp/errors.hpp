#pragma once

#include <stdexcept>
#include <string>

namespace dsgp {

// Exception families map one-to-one onto CLI exit codes (2, 3, 4).

struct InvalidInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

} // namespace dsgp
