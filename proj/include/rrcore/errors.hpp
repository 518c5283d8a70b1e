// SPDX-License-Identifier: Apache-2.0
/**
 * @file   errors.hpp
 * @brief  Exception types shared by every rrcore module.
 *
 * The CLI maps these onto process exit codes: ConfigError -> 2,
 * DataError -> 3, NumericError -> 4. Anything else exits with 1.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace rrcore {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied configuration or flags.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed or unusable input data.
struct DataError : Error {
  using Error::Error;
};

/// Incompatible tensor shapes or an invalid graph operation.
struct ShapeError : Error {
  using Error::Error;
};

/// Non-finite values reached the optimizer.
struct NumericError : Error {
  using Error::Error;
};

} // namespace rrcore
